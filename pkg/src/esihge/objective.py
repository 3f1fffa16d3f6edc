"""Monte Carlo estimators for the training objective.

The surrogate bound combines the reconstruction likelihood, a wrapped-normal
prior term at the origin, and the mixture entropy surrogate -log h_K; the
mutual-information term is the f-divergence dual bound with a permuted-row
marginal. One set of posterior samples is shared between the two terms per
step.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import model as mdl
from .autodiff import DimensionError, DomainError, Tensor


@dataclass
class HyperParams:
    k_mix: int = 18      # auxiliary mixture draws (K)
    j_samples: int = 3   # posterior samples per step (J)
    gamma: float = 1.0   # MI regularization weight
    c: float = 3.1       # curvature magnitude
    lr: float = 1e-5
    epochs: int = 1000
    seed: int = 1
    latent: int = 16     # F
    hidden: int = 32     # H
    noise_dim: int = 32  # E
    lr_t: Optional[float] = None
    samples: int = 16    # posterior draws averaged at evaluation time
    val_every: int = 5
    patience: int = 100  # validation checks without improvement
    t_widths: tuple = (1000, 400, 100)

    def __post_init__(self):
        if self.k_mix < 0:
            raise DomainError("K must be >= 0")
        if self.j_samples < 1:
            raise DomainError("J must be >= 1")
        if self.gamma < 0:
            raise DomainError("gamma must be >= 0")

    @property
    def lr_critic(self):
        return self.lr if self.lr_t is None else self.lr_t


@dataclass
class LossBreakdown:
    recon: float
    prior: float
    entropy_surrogate: float
    mi_bound: float
    total: float


def positive_weight(n, num_edges):
    """Ratio of ordered non-edges to ordered edges, excluding the diagonal."""
    pos = 2 * num_edges
    if pos == 0:
        raise DomainError("graph has no edges")
    return (n * n - n - pos) / pos


def recon_loglik(adj, logits, w_pos=None):
    """Weighted Bernoulli log-likelihood of the adjacency, averaged over the
    N^2 - N ordered off-diagonal pairs; positives carry weight w_pos.

    Fused primitive: the backward pass is the closed-form
    (w_pos * A * sigmoid(-L) - (1 - A) * sigmoid(L)) / count on off-diagonal
    entries, which avoids materializing intermediate N x N tensors.
    """
    logits = logits if isinstance(logits, Tensor) else ad.constant(logits)
    a = np.asarray(adj, dtype=np.float64)
    n = a.shape[0]
    if a.shape != logits.shape or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency {a.shape} vs logits {logits.shape}")
    if w_pos is None:
        w_pos = positive_weight(n, int(a.sum()) // 2)
    off = ~np.eye(n, dtype=bool)
    L = logits.data
    # log sigmoid(L) = -softplus(-L); log(1 - sigmoid(L)) = -softplus(L)
    log_sig = -(np.maximum(-L, 0.0) + np.log1p(np.exp(-np.abs(L))))
    log_one_minus = -(np.maximum(L, 0.0) + np.log1p(np.exp(-np.abs(L))))
    count = n * n - n
    total = np.sum((w_pos * a * log_sig + (1.0 - a) * log_one_minus)[off])
    out_data = np.array(total / count)

    def _grad(g):
        sig = np.where(L >= 0, 1.0 / (1.0 + np.exp(-np.abs(L))),
                       np.exp(-np.abs(L)) / (1.0 + np.exp(-np.abs(L))))
        d = (w_pos * a * (1.0 - sig) - (1.0 - a) * sig) * off / count
        return g * d

    return ad._make(out_data, (logits,), [_grad])


def log_hk(z, psi0, psi_extras, c):
    """Per-node log of the (K+1)-component posterior mixture, as (N, 1).

    logsumexp over the component wrapped-normal log-densities minus
    log(K+1); exact for K = 0 and for identical components.
    """
    comps = [geo.wrapped_normal_logpdf(z, psi0.mu, psi0.sigma, c)]
    comps += [geo.wrapped_normal_logpdf(z, pk.mu, pk.sigma, c) for pk in psi_extras]
    stacked = ad.concat(comps, axis=1)
    lse = ad.logsumexp(stacked, axis=1, keepdims=True)
    return lse - math.log(len(comps))


def log_prior(z, c):
    """Wrapped normal at the origin with unit scale, as (N, 1)."""
    n, f = z.shape
    return geo.wrapped_normal_logpdf(z, np.zeros((n, f)), np.ones((n, f)), c)


@dataclass
class StepSamples:
    psi0: mdl.PosteriorParams
    psi_extras: list
    zs: list          # J tensors (N, F)
    us: list          # matching standard-normal draws


def draw_step_samples(a_hat, x, phi, hp, rng, us=None, eps_list=None):
    """Sample the step's posterior draw, K auxiliary draws, and J latents.

    Passing us/eps_list freezes the noise (finite-difference checks)."""
    if eps_list is not None:
        # frozen noise: K+1 mean draws with the provided Bernoulli matrices
        if len(eps_list) != hp.k_mix + 1:
            raise DimensionError(f"need {hp.k_mix + 1} noise draws, got {len(eps_list)}")
        x_t = x if isinstance(x, Tensor) else ad.constant(x)
        h1 = mdl.shared_hidden(a_hat, x_t, phi)
        sigma = mdl._scale_head(a_hat, h1, phi)
        mus = [mdl._mean_draw(a_hat, h1, phi, hp.c, rng, eps=e) for e in eps_list]
        psi0 = mdl.PosteriorParams(mu=mus[0], sigma=sigma)
        extras = [mdl.PosteriorParams(mu=m, sigma=sigma) for m in mus[1:]]
    else:
        psi0, extras = mdl.sample_psi_group(a_hat, x, phi, hp.c, rng, hp.k_mix)
    zs, kept = [], []
    for j in range(hp.j_samples):
        u = None if us is None else us[j]
        z, u = mdl.sample_z(psi0, hp.c, rng, u=u)
        zs.append(z)
        kept.append(u)
    return StepSamples(psi0=psi0, psi_extras=extras, zs=zs, us=kept)


def sivi_surrogate_terms(adj, samples, c, w_pos=None):
    """(recon, prior, entropy surrogate) scalars, averaged over the J draws."""
    recon = prior = ent = None
    for z in samples.zs:
        logits = mdl.decode_logits(z, c)
        r = recon_loglik(adj, logits, w_pos=w_pos)
        p = ad.tsum(log_prior(z, c))
        h = -ad.tsum(log_hk(z, samples.psi0, samples.psi_extras, c))
        recon = r if recon is None else recon + r
        prior = p if prior is None else prior + p
        ent = h if ent is None else ent + h
    j = float(len(samples.zs))
    return recon * (1.0 / j), prior * (1.0 / j), ent * (1.0 / j)


def f_star(t):
    """Convex conjugate of u log u: f*(t) = exp(t - 1)."""
    if isinstance(t, Tensor):
        return ad.exp(t - 1.0)
    return np.exp(np.asarray(t, dtype=np.float64) - 1.0)


def mi_dual_bound(x, psi, z, tparams, c, perm):
    """f-divergence dual bound on I((X, Psi); Z).

    joint term: mean_i T(x_i, mu_i, z_i); marginal term: mean_i
    f*(T(x_i, mu_i, z_perm(i))) with one row permutation per step.
    """
    n = z.shape[0]
    if n < 2:
        raise DomainError("MI bound needs at least two nodes to permute")
    perm = np.asarray(perm, dtype=np.intp)
    t_joint = mdl.t_critic(x, psi.mu, z, tparams, c)
    z_shuf = ad.permute_rows(z, perm)
    t_marg = mdl.t_critic(x, psi.mu, z_shuf, tparams, c)
    return ad.tmean(t_joint) - ad.tmean(f_star(t_marg))


def total_loss(a_hat, x, adj, phi, tparams, hp, rng, samples=None, w_pos=None):
    """The full objective (to be maximized in phi).

    Returns (total tensor, LossBreakdown, StepSamples); the MI term uses the
    first latent draw and the same samples the surrogate consumed.
    """
    if samples is None:
        samples = draw_step_samples(a_hat, x, phi, hp, rng)
    recon, prior, ent = sivi_surrogate_terms(adj, samples, hp.c, w_pos=w_pos)
    total = recon + prior + ent
    if hp.gamma > 0.0:
        perm = rng.permutation(samples.zs[0].shape[0])
        mi = mi_dual_bound(x, samples.psi0, samples.zs[0], tparams, hp.c, perm)
        total = total + hp.gamma * mi
        mi_val = mi.item()
    else:
        mi_val = 0.0
    breakdown = LossBreakdown(recon=recon.item(), prior=prior.item(),
                              entropy_surrogate=ent.item(), mi_bound=mi_val,
                              total=recon.item() + prior.item() + ent.item()
                              + hp.gamma * mi_val)
    return total, breakdown, samples
