import numpy as np
import pytest

from esihge import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    # stale records from a failed test must not leak into the next one
    ad._records.clear()
    ad._leaves.clear()
    ad._leaf_ids.clear()
    yield
    ad._records.clear()
    ad._leaves.clear()
    ad._leaf_ids.clear()


def finite_difference(f, tensors, h=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each tensor's entries.

    f re-executes the forward pass from the tensors' current .data; the
    oracle only perturbs raw numpy storage and never touches the tape.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_close_grads(analytic, numeric, rtol=1e-4, atol=1e-8):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
