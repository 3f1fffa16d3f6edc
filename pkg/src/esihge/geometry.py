"""Poincare-ball operations at curvature magnitude c > 0 (ball radius 1/sqrt(c)).

Points are rows of an (N, F) tensor; per-row scalars are kept as (N, 1)
columns so they broadcast against coordinates. Every operation that
produces a ball point projects back inside the boundary margin, and the
small-argument branches below keep the maps exact at their fixed points.
All functions accept Tensors or plain arrays and are differentiable
through the tape.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor

EPS_BALL = 1e-5    # boundary margin: after projection c*||x||^2 <= (1-EPS_BALL)^2
MIN_NORM = 1e-15
ZERO_BRANCH = 1e-12  # below this the exp/log maps return their fixed point exactly


def _check_curvature(c):
    if not (isinstance(c, (int, float)) and c > 0 and math.isfinite(c)):
        raise DomainError(f"curvature must be a positive finite float, got {c!r}")
    return float(c)


def _as_points(x):
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 1:
        t = ad.reshape(t, (1, -1))
    if t.ndim != 2:
        raise DomainError(f"points must form an (N, F) array, got shape {t.shape}")
    return t


def _sqnorm(x):
    return ad.tsum(x * x, axis=1, keepdims=True)


def project_to_ball(x, c):
    """Rescale rows with sqrt(c)*||x|| >= 1 - EPS_BALL onto that radius."""
    c = _check_curvature(c)
    x = _as_points(x)
    if not np.all(np.isfinite(x.data)):
        raise DomainError("cannot project non-finite coordinates")
    max_norm = (1.0 - EPS_BALL) / math.sqrt(c)
    n = ad.norm(x, axis=1, keepdims=True, floor=MIN_NORM)
    outside = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True)) >= max_norm
    if not outside.any():
        return x
    return ad.where(outside, x * (max_norm / n), x)


def _check_inside(x, c, what="point"):
    sq = c * np.sum(x.data * x.data, axis=1)
    if np.any(sq >= 1.0):
        raise DomainError(f"{what} lies on or outside the ball of curvature {c}")


def mobius_add(x, y, c):
    """Gyrogroup addition x (+)_c y, projected back inside the ball."""
    c = _check_curvature(c)
    x, y = _as_points(x), _as_points(y)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    xy = ad.tsum(x * y, axis=1, keepdims=True)
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    if np.any(np.abs(den.data) < MIN_NORM):
        raise DomainError("Mobius addition degenerate (near-antipodal arguments)")
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    return project_to_ball(num / den, c)


def conformal_factor(x, c):
    """Metric scale lambda_x = 2 / (1 - c ||x||^2); 2 at the origin."""
    c = _check_curvature(c)
    x = _as_points(x)
    _check_inside(x, c)
    return 2.0 / (1.0 - c * _sqnorm(x))


def exp_map(z, v, c):
    """Map tangent vector v at z onto the ball; exact at v = 0."""
    c = _check_curvature(c)
    z, v = _as_points(z), _as_points(v)
    if not np.all(np.isfinite(v.data)):
        raise DomainError("tangent vector must be finite")
    sc = math.sqrt(c)
    vn = ad.norm(v, axis=1, keepdims=True, floor=MIN_NORM)
    lam = conformal_factor(z, c)
    step = ad.tanh(sc * lam * vn / 2.0) * v / (sc * vn)
    moved = mobius_add(z, step, c)
    small = np.linalg.norm(v.data, axis=1, keepdims=True) < ZERO_BRANCH
    if small.any():
        moved = ad.where(small, z, moved)
    return moved


def exp_map0(v, c):
    """Exponential map at the origin: tanh(sqrt(c)||v||) * v / (sqrt(c)||v||)."""
    c = _check_curvature(c)
    v = _as_points(v)
    if not np.all(np.isfinite(v.data)):
        raise DomainError("tangent vector must be finite")
    sc = math.sqrt(c)
    vn = ad.norm(v, axis=1, keepdims=True, floor=MIN_NORM)
    out = ad.tanh(sc * vn) * v / (sc * vn)
    small = np.linalg.norm(v.data, axis=1, keepdims=True) < ZERO_BRANCH
    if small.any():
        out = ad.where(small, v, out)
    return project_to_ball(out, c)


def log_map(z, y, c):
    """Tangent vector at z pointing to y; exact zero when y = z."""
    c = _check_curvature(c)
    z, y = _as_points(z), _as_points(y)
    _check_inside(z, c)
    _check_inside(y, c)
    sc = math.sqrt(c)
    w = mobius_add(-z, y, c)
    wn = ad.norm(w, axis=1, keepdims=True, floor=MIN_NORM)
    lam = conformal_factor(z, c)
    out = (2.0 / (sc * lam)) * ad.atanh(sc * wn) * w / wn
    small = np.linalg.norm(w.data, axis=1, keepdims=True) < ZERO_BRANCH
    if small.any():
        out = ad.where(small, ad.constant(np.zeros_like(w.data)), out)
    return out


def log_map0(y, c):
    """Logarithmic map at the origin: atanh(sqrt(c)||y||) * y / (sqrt(c)||y||)."""
    c = _check_curvature(c)
    y = _as_points(y)
    _check_inside(y, c)
    sc = math.sqrt(c)
    yn = ad.norm(y, axis=1, keepdims=True, floor=MIN_NORM)
    out = ad.atanh(sc * yn) * y / (sc * yn)
    small = np.linalg.norm(y.data, axis=1, keepdims=True) < ZERO_BRANCH
    if small.any():
        out = ad.where(small, y, out)
    return out


def distance(z, y, c):
    """Geodesic distance, as (N, 1).

    Evaluated as (2/sqrt(c)) * asinh(sqrt(c)||z-y|| / sqrt((1-c||z||^2)(1-c||y||^2))),
    an exact rewriting of the acosh closed form via acosh(1+2s) = 2 asinh(sqrt(s));
    the asinh form stays well-conditioned as z -> y.
    """
    c = _check_curvature(c)
    z, y = _as_points(z), _as_points(y)
    _check_inside(z, c)
    _check_inside(y, c)
    sc = math.sqrt(c)
    diff = ad.norm(z - y, axis=1, keepdims=True, floor=MIN_NORM)
    denom = (1.0 - c * _sqnorm(z)) * (1.0 - c * _sqnorm(y))
    return (2.0 / sc) * ad.asinh(sc * diff / ad.sqrt(denom))


def wrapped_normal_sample(mu, sigma, c, u):
    """Push u ~ N(0, I) through z = exp_mu(u * sigma / lambda_mu).

    By construction lambda_mu * log_mu(z) = u * sigma, so the density below
    is the exact law of the sample.
    """
    c = _check_curvature(c)
    mu = _as_points(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise DomainError("scale must be positive")
    u = ad.constant(u) if not isinstance(u, Tensor) else u
    lam = conformal_factor(mu, c)
    return exp_map(mu, u * sigma / lam, c)


def wrapped_normal_logpdf(z, mu, sigma, c):
    """Log-density of the wrapped normal at z, per node as (N, 1).

    log N(lambda_mu log_mu(z) | 0, diag(sigma^2))
      + (F - 1) * log(sqrt(c) d / sinh(sqrt(c) d)),   d = distance(mu, z).
    """
    c = _check_curvature(c)
    z, mu = _as_points(z), _as_points(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise DomainError("scale must be positive")
    F = z.shape[1]
    sc = math.sqrt(c)
    w = conformal_factor(mu, c) * log_map(mu, z, c)
    quad = -0.5 * ad.tsum((w / sigma) ** 2, axis=1, keepdims=True)
    log_det = ad.tsum(ad.log(sigma) + ad.constant(np.zeros_like(z.data)),
                      axis=1, keepdims=True)
    base = quad - log_det - 0.5 * F * math.log(2.0 * math.pi)
    d = distance(mu, z, c)
    return base + (F - 1) * ad.log_sinh_ratio(sc * d)


def gyroplane(z, a, p, c):
    """Signed distance to the hyperplane through p with normal a, scaled by ||a||.

    (2/sqrt(c)) * ||a|| * asinh( 2 sqrt(c) <(-p)(+)z, a> / ((1 - c||(-p)(+)z||^2) ||a||) )
    """
    c = _check_curvature(c)
    z = _as_points(z)
    a = a if isinstance(a, Tensor) else Tensor(a)
    if a.ndim == 1:
        a = ad.reshape(a, (1, -1))
    p = _as_points(p)
    if np.linalg.norm(a.data) == 0.0:
        raise DomainError("gyroplane orientation vector must be nonzero")
    sc = math.sqrt(c)
    w = mobius_add(-p, z, c)
    an = ad.norm(a, axis=1, keepdims=True, floor=MIN_NORM)
    inner = ad.tsum(w * a, axis=1, keepdims=True)
    arg = 2.0 * sc * inner / ((1.0 - c * _sqnorm(w)) * an)
    return (2.0 / sc) * an * ad.asinh(arg)


def origin(n, f):
    """(n, f) array of ball origins."""
    return np.zeros((n, f))
