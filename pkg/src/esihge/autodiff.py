"""Dense/sparse float64 tensors with taped reverse-mode differentiation.

Tensors are at most 2-D. Binary ops broadcast a scalar, a (1, n) row, or an
(m, 1) column against an (m, n) operand; anything else is a shape error.
Every tracked op appends one record to a module-global tape; backward()
replays the records in reverse execution order exactly once, accumulates
gradients into the leaves, and frees the tape.
"""

import numpy as np
import scipy.sparse


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_records = []       # backward closures, in execution order
_leaves = []        # tracked leaf tensors touched this tape
_leaf_ids = set()
_epoch = 0          # bumped after each backward; guards stale replays
_grad_enabled = True


class no_grad:
    """Context manager that disables recording (evaluation paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_epoch")
    __array_ufunc__ = None  # force numpy to defer to our r-ops

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._epoch = None  # set when produced by a tracked op; leaves keep None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Wrap an array as an untracked Tensor."""
    return Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    """Sum g over the axes that were broadcast to reach g.shape from shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(out_data, inputs, grad_fns):
    """Create the op output and, when tracking, record its backward closure.

    grad_fns[i](g) maps the output adjoint to input i's contribution; None
    marks a non-differentiable input.
    """
    tracked = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if not tracked:
        return out
    out._epoch = _epoch
    for t in inputs:
        if t.requires_grad and t._epoch is None and id(t) not in _leaf_ids:
            _leaf_ids.add(id(t))
            _leaves.append(t)

    def _backward():
        g = out.grad
        if g is None:
            return
        for t, fn in zip(inputs, grad_fns):
            if fn is None or not t.requires_grad:
                continue
            contrib = fn(g)
            t.grad = contrib if t.grad is None else t.grad + contrib

    _records.append(_backward)
    return out


def backward(out):
    """Replay the tape in reverse, populate leaf gradients, free the tape.

    Returns a dict mapping each touched leaf tensor to its gradient array.
    """
    global _epoch
    if not isinstance(out, Tensor) or out._epoch is None:
        raise TapeError("output is not attached to the tape (detached graph)")
    if out._epoch != _epoch:
        raise TapeError("tape already consumed; re-execute the forward pass")
    if out.data.size != 1:
        raise DimensionError(f"backward needs a scalar output, got shape {out.shape}")
    out.grad = np.ones_like(out.data)
    for fn in reversed(_records):
        fn()
    grads = {t: t.grad for t in _leaves if t.grad is not None}
    _records.clear()
    _leaves.clear()
    _leaf_ids.clear()
    _epoch += 1
    return grads


def _binary(a, b, fwd, da, db):
    a, b = _coerce(a), _coerce(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None
    out_data = fwd(a.data, b.data)
    return _make(
        out_data,
        (a, b),
        [
            lambda g: _unbroadcast(da(g, a.data, b.data), a.shape),
            lambda g: _unbroadcast(db(g, a.data, b.data), b.shape),
        ],
    )


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    return _binary(
        a, b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def neg(x):
    x = _coerce(x)
    return _make(-x.data, (x,), [lambda g: -g])


def power(x, p):
    if not isinstance(p, (int, float)):
        raise DimensionError("exponent must be a python number")
    x = _coerce(x)
    out_data = x.data ** p
    return _make(out_data, (x,), [lambda g: g * p * x.data ** (p - 1)])


def exp(x):
    x = _coerce(x)
    out_data = np.exp(x.data)
    return _make(out_data, (x,), [lambda g: g * out_data])


def log(x):
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive input")
    return _make(np.log(x.data), (x,), [lambda g: g / x.data])


def sqrt(x):
    x = _coerce(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt of negative input")
    out_data = np.sqrt(x.data)
    return _make(out_data, (x,), [lambda g: g * 0.5 / np.maximum(out_data, 1e-150)])


def tanh(x):
    x = _coerce(x)
    out_data = np.tanh(x.data)
    return _make(out_data, (x,), [lambda g: g * (1.0 - out_data * out_data)])


def sigmoid(x):
    x = _coerce(x)
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _make(out_data, (x,), [lambda g: g * out_data * (1.0 - out_data)])


def relu(x):
    x = _coerce(x)
    return _make(np.maximum(x.data, 0.0), (x,), [lambda g: g * (x.data > 0)])


def softplus(x):
    # log(1 + e^x), computed as max(x, 0) + log1p(e^{-|x|})
    x = _coerce(x)
    out_data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _make(out_data, (x,), [lambda g: g * _sigmoid_np(x.data)])


def _sigmoid_np(d):
    return np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))


def atanh(x):
    x = _coerce(x)
    if np.any(np.abs(x.data) >= 1.0):
        raise DomainError("atanh argument must lie in (-1, 1)")
    return _make(np.arctanh(x.data), (x,), [lambda g: g / (1.0 - x.data * x.data)])


def asinh(x):
    x = _coerce(x)
    return _make(np.arcsinh(x.data), (x,), [lambda g: g / np.sqrt(1.0 + x.data * x.data)])


def clip(x, lo, hi):
    x = _coerce(x)
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return _make(out_data, (x,), [lambda g: g * inside])


def log_sinh_ratio(t):
    """log(t / sinh t) for t >= 0, with a Taylor branch below 1e-4.

    The series log(t/sinh t) = -t^2/6 + t^4/180 - ... truncates below 1e-16
    at the cutoff; above it, -log1p((sinh t - t)/t) avoids cancelling two
    large logarithms. The derivative 1/t - coth t gets the matching branch.
    """
    t = _coerce(t)
    d = t.data
    if np.any(d < 0.0):
        raise DomainError("log_sinh_ratio argument must be nonnegative")
    small = d < 1e-4
    safe = np.where(small, 1.0, d)
    out_data = np.where(small, -d * d / 6.0 + d ** 4 / 180.0,
                        -np.log1p((np.sinh(safe) - safe) / safe))

    def _grad(g):
        deriv = np.where(small, -d / 3.0 + d ** 3 / 45.0,
                         1.0 / safe - 1.0 / np.tanh(safe))
        return g * deriv

    return _make(out_data, (t,), [_grad])


def where(mask, a, b):
    """Select a where mask holds, b elsewhere; mask is a constant bool array."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _coerce(a), _coerce(b)
    out_data = np.where(mask, a.data, b.data)
    return _make(
        out_data,
        (a, b),
        [
            lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape),
            lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape),
        ],
    )


def norm(x, axis=1, keepdims=True, floor=1e-15):
    """Euclidean norm along an axis, clamped below by `floor`.

    The clamp keeps the adjoint x/||x|| finite at the origin.
    """
    x = _coerce(x)
    raw = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    clamped = np.maximum(raw, floor)
    out_data = clamped if keepdims else np.squeeze(clamped, axis=axis)

    def _grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * x.data / clamped

    return _make(out_data, (x,), [_grad])


def tsum(x, axis=None, keepdims=False):
    x = _coerce(x)
    _check_axis(x, axis)
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy() if g.shape != x.shape else g

    return _make(out_data, (x,), [_grad])


def tmean(x, axis=None, keepdims=False):
    x = _coerce(x)
    _check_axis(x, axis)
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(x, axis=None, keepdims=False):
    """max-shifted log-sum-exp; finite for any finite input."""
    x = _coerce(x)
    _check_axis(x, axis)
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out_keep = m + np.log(total)
    out_data = out_keep if keepdims or axis is None and x.ndim == 0 else (
        out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis=axis))
    soft = shifted / total

    def _grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return g * soft

    return _make(out_data, (x,), [_grad])


def _check_axis(x, axis):
    if axis is None:
        if x.data.size == 0:
            raise DomainError("reduction over an empty tensor")
        return
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DomainError("reduction over an empty axis")


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not chain: {a.shape} x {b.shape}")
    out_data = a.data @ b.data
    return _make(
        out_data,
        (a, b),
        [lambda g: g @ b.data.T, lambda g: a.data.T @ g],
    )


def transpose(x):
    x = _coerce(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")
    return _make(x.data.T.copy(), (x,), [lambda g: g.T])


def reshape(x, shape):
    x = _coerce(x)
    out_data = x.data.reshape(shape)
    return _make(out_data, (x,), [lambda g: g.reshape(x.shape)])


def concat(tensors, axis=1):
    tensors = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _grad_for(i):
        sl = [slice(None)] * out_data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out_data, tuple(tensors), [_grad_for(i) for i in range(len(tensors))])


def permute_rows(x, perm):
    """Reorder rows by a permutation of row indices."""
    x = _coerce(x)
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (x.shape[0],):
        raise DimensionError(f"permutation length {perm.shape} does not match {x.shape}")
    inv = np.argsort(perm)
    return _make(x.data[perm], (x,), [lambda g: g[inv]])


class SparseMatrix:
    """Immutable CSR matrix (scipy backend); the carrier for normalized adjacency."""

    def __init__(self, csr):
        csr = scipy.sparse.csr_matrix(csr, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        self._csr = csr
        self._csr_t = None
        self._validate()

    @classmethod
    def from_coo(cls, shape, rows, cols, values):
        m = scipy.sparse.coo_matrix(
            (np.asarray(values, dtype=np.float64), (rows, cols)), shape=shape)
        return cls(m.tocsr())

    @classmethod
    def from_dense(cls, dense):
        return cls(scipy.sparse.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n):
        return cls(scipy.sparse.identity(n, dtype=np.float64, format="csr"))

    def _validate(self):
        indptr, indices = self._csr.indptr, self._csr.indices
        if np.any(np.diff(indptr) < 0) or indptr[-1] != len(self._csr.data):
            raise DimensionError("corrupt CSR offsets")
        for r in range(self.shape[0]):
            row = indices[indptr[r]:indptr[r + 1]]
            if row.size > 1 and np.any(np.diff(row) <= 0):
                raise DimensionError(f"row {r} column indices not strictly increasing")

    @property
    def shape(self):
        return self._csr.shape

    @property
    def nnz(self):
        return self._csr.nnz

    @property
    def indptr(self):
        return self._csr.indptr

    @property
    def indices(self):
        return self._csr.indices

    @property
    def values(self):
        return self._csr.data

    def to_dense(self):
        return np.asarray(self._csr.todense())

    def _transposed(self):
        if self._csr_t is None:
            self._csr_t = self._csr.T.tocsr()
        return self._csr_t

    def matvec_dense(self, d):
        return self._csr @ d


def spmm(s, d):
    """Sparse (n x n) times dense (n x k); adjoint goes through the transpose."""
    if not isinstance(s, SparseMatrix):
        raise DimensionError("spmm expects a SparseMatrix left operand")
    d = _coerce(d)
    if d.ndim != 2 or s.shape[1] != d.shape[0]:
        raise DimensionError(f"spmm shapes do not chain: {s.shape} x {d.shape}")
    out_data = s.matvec_dense(d.data)
    return _make(out_data, (d,), [lambda g: s._transposed() @ g])


class Adam:
    """Adam with bias correction; state is a pure function of the update history."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if any(not isinstance(p, Tensor) for p in self.params):
            raise DimensionError("Adam parameters must be Tensors")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
