"""Encoder, decoder, and critic for the hyperbolic semi-implicit auto-encoder.

The encoder is two GCN hops: a shared relu layer of width H, then a mean
head that also consumes Bernoulli noise (the implicit-mixture draw) and a
log-scale head without noise. Means live on the ball via the origin
exponential map; scales are clamped positive. The critic maps the two ball
inputs through per-unit gyroplane layers before a plain MLP.
"""

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import DimensionError, SparseMatrix, Tensor

SIGMA_MIN = 1e-4
SIGMA_MAX = 1e2
NOISE_P = 0.5  # Bernoulli parameter of the injected noise, values in {0, 1}

CKPT_MAGIC = b"ESIH"
CKPT_VERSION = 1


@dataclass
class EncoderParams:
    """GCN weights: shared first hop, mean head (sees noise), log-scale head."""

    w1: Tensor        # (M, H)
    w_mu: Tensor      # (H + E, F)
    w_sigma: Tensor   # (H, F)
    noise_dim: int

    def tensors(self):
        return [self.w1, self.w_mu, self.w_sigma]

    def named_tensors(self):
        return [("enc.w1", self.w1), ("enc.w_mu", self.w_mu),
                ("enc.w_sigma", self.w_sigma)]


@dataclass
class PosteriorParams:
    """Per-node wrapped-normal parameters: mean on the ball, positive scales."""

    mu: Tensor       # (N, F) ball points
    sigma: Tensor    # (N, F)


@dataclass
class TNetParams:
    """Critic: F gyroplane units per ball input block, then an MLP to a scalar."""

    gyro_a_mu: list   # F tensors of shape (1, F)
    gyro_p_mu: list
    gyro_a_z: list
    gyro_p_z: list
    weights: list     # MLP weight tensors
    biases: list      # MLP bias tensors, shape (1, width)

    def tensors(self):
        return (self.gyro_a_mu + self.gyro_p_mu + self.gyro_a_z + self.gyro_p_z
                + self.weights + self.biases)

    def ball_tensors(self):
        return self.gyro_p_mu + self.gyro_p_z

    def named_tensors(self):
        out = []
        for name, group in (("t.gyro_a_mu", self.gyro_a_mu),
                            ("t.gyro_p_mu", self.gyro_p_mu),
                            ("t.gyro_a_z", self.gyro_a_z),
                            ("t.gyro_p_z", self.gyro_p_z)):
            out.extend((f"{name}.{k}", t) for k, t in enumerate(group))
        out.extend((f"t.w{k}", t) for k, t in enumerate(self.weights))
        out.extend((f"t.b{k}", t) for k, t in enumerate(self.biases))
        return out


def gcn_layer(a_hat, h, w, activation="relu"):
    """activation(A_hat @ h @ w) with activation in {relu, identity}."""
    if not isinstance(a_hat, SparseMatrix):
        raise DimensionError("gcn_layer expects a SparseMatrix adjacency")
    out = ad.spmm(a_hat, ad.matmul(h if isinstance(h, Tensor) else ad.constant(h), w))
    if activation == "relu":
        return ad.relu(out)
    if activation == "identity":
        return out
    raise DimensionError(f"unknown activation {activation!r}")


def draw_noise(rng, n, noise_dim):
    return (rng.random((n, noise_dim)) < NOISE_P).astype(np.float64)


def shared_hidden(a_hat, x, params):
    return gcn_layer(a_hat, x, params.w1, "relu")


def _mean_draw(a_hat, h1, params, c, rng, eps=None):
    n = h1.shape[0]
    if eps is None:
        eps = draw_noise(rng, n, params.noise_dim)
    mu_euc = gcn_layer(a_hat, ad.concat([h1, ad.constant(eps)], axis=1),
                       params.w_mu, "identity")
    return geo.project_to_ball(geo.exp_map0(mu_euc, c), c)


def _scale_head(a_hat, h1, params):
    # clamp in log space: identical to clipping sigma itself but the exp
    # can no longer overflow on wild weights
    log_sigma = gcn_layer(a_hat, h1, params.w_sigma, "identity")
    return ad.exp(ad.clip(log_sigma, math.log(SIGMA_MIN), math.log(SIGMA_MAX)))


def sample_psi(a_hat, x, params, c, rng, eps=None):
    """One implicit-mixture draw of the posterior parameters.

    Fresh Bernoulli noise enters only the mean head; the scale head is
    deterministic given the features.
    """
    x = x if isinstance(x, Tensor) else ad.constant(x)
    h1 = shared_hidden(a_hat, x, params)
    mu = _mean_draw(a_hat, h1, params, c, rng, eps=eps)
    return PosteriorParams(mu=mu, sigma=_scale_head(a_hat, h1, params))


def sample_psi_group(a_hat, x, params, c, rng, k_extra):
    """The step's posterior draw plus k_extra auxiliary mixture draws.

    The shared hidden layer and the scale head are computed once; only the
    mean head is redrawn with fresh noise, so the auxiliary draws form a
    mixture over means with a common sigma.
    """
    x = x if isinstance(x, Tensor) else ad.constant(x)
    h1 = shared_hidden(a_hat, x, params)
    sigma = _scale_head(a_hat, h1, params)
    first = PosteriorParams(mu=_mean_draw(a_hat, h1, params, c, rng), sigma=sigma)
    extras = [PosteriorParams(mu=_mean_draw(a_hat, h1, params, c, rng), sigma=sigma)
              for _ in range(k_extra)]
    return first, extras


def sample_z(psi, c, rng, u=None):
    """Reparameterized wrapped-normal draw; u is kept so gradients flow."""
    n, f = psi.mu.shape
    if u is None:
        u = rng.standard_normal((n, f))
    z = geo.wrapped_normal_sample(psi.mu, psi.sigma, c, u)
    return z, u


def decode_logits(z, c):
    """Inner products of the origin-tangent images of z; exactly symmetric."""
    v = geo.log_map0(z, c)
    raw = ad.matmul(v, ad.transpose(v))
    return 0.5 * (raw + ad.transpose(raw))


def tangent_coords(z, c):
    return geo.log_map0(z, c)


def default_t_widths():
    return (1000, 400, 100)


def t_critic(x, psi_mu, z, tparams, c):
    """Scalar critic per node: [x | gyro(mu) | gyro(z)] -> MLP -> (N, 1)."""
    x = x if isinstance(x, Tensor) else ad.constant(x)
    blocks = [x]
    for point, a_list, p_list in ((psi_mu, tparams.gyro_a_mu, tparams.gyro_p_mu),
                                  (z, tparams.gyro_a_z, tparams.gyro_p_z)):
        cols = [geo.gyroplane(point, a, p, c) for a, p in zip(a_list, p_list)]
        blocks.append(ad.concat(cols, axis=1))
    h = ad.concat(blocks, axis=1)
    last = len(tparams.weights) - 1
    for k, (w, b) in enumerate(zip(tparams.weights, tparams.biases)):
        h = ad.matmul(h, w) + b
        if k < last:
            h = ad.relu(h)
    return h


def save_checkpoint(path, header, named_tensors):
    """Versioned binary checkpoint.

    Header: magic, format version, N, M, F, H, E, c. Then each tensor as
    (name length, name, rank, dims, little-endian float64 payload).
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IIIIII", CKPT_VERSION, header["n"], header["m"],
                             header["f"], header["h"], header["e"]))
        fh.write(struct.pack("<d", header["c"]))
        fh.write(struct.pack("<I", len(named_tensors)))
        for name, tensor in named_tensors:
            data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (header dict, {name: array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise DimensionError(f"{path}: not a checkpoint (bad magic)")
    version, n, m, f, h, e = struct.unpack_from("<IIIIII", blob, 4)
    if version != CKPT_VERSION:
        raise DimensionError(f"{path}: unsupported checkpoint version {version}")
    (c,) = struct.unpack_from("<d", blob, 28)
    (count,) = struct.unpack_from("<I", blob, 36)
    pos = 40
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        tensors[name] = arr.astype(np.float64)
    header = {"version": version, "n": n, "m": m, "f": f, "h": h, "e": e, "c": c}
    return header, tensors


def params_from_tensors(tensors, noise_dim, requires_grad=True):
    """Rebuild (EncoderParams, TNetParams) from a checkpoint tensor dict."""
    def t(name):
        return Tensor(tensors[name], requires_grad=requires_grad)

    phi = EncoderParams(w1=t("enc.w1"), w_mu=t("enc.w_mu"),
                        w_sigma=t("enc.w_sigma"), noise_dim=noise_dim)
    groups = {"t.gyro_a_mu": [], "t.gyro_p_mu": [], "t.gyro_a_z": [], "t.gyro_p_z": []}
    weights, biases = {}, {}
    for name in tensors:
        for prefix in groups:
            if name.startswith(prefix + "."):
                groups[prefix].append((int(name.rsplit(".", 1)[1]), t(name)))
        if name.startswith("t.w"):
            weights[int(name[3:])] = t(name)
        elif name.startswith("t.b"):
            biases[int(name[3:])] = t(name)
    tnet = TNetParams(
        gyro_a_mu=[x for _, x in sorted(groups["t.gyro_a_mu"])],
        gyro_p_mu=[x for _, x in sorted(groups["t.gyro_p_mu"])],
        gyro_a_z=[x for _, x in sorted(groups["t.gyro_a_z"])],
        gyro_p_z=[x for _, x in sorted(groups["t.gyro_p_z"])],
        weights=[x for _, x in sorted(weights.items())],
        biases=[x for _, x in sorted(biases.items())],
    )
    return phi, tnet
