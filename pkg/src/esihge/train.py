"""Alternating optimization: one encoder ascent step and one critic ascent
step per epoch, validation-AUC early stopping, binary checkpoints."""

import copy
import logging
import math
import os

import numpy as np

from . import autodiff as ad
from . import evaluate as ev
from . import geometry as geo
from . import graphio as gio
from . import model as mdl
from . import objective as obj
from .autodiff import Adam, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(m, hp, seed):
    """Glorot-uniform GCN/MLP weights, zero biases, gyroplane offsets at the
    origin with unit-random orientations."""
    rng = np.random.default_rng(seed)
    f, h, e = hp.latent, hp.hidden, hp.noise_dim
    phi = mdl.EncoderParams(
        w1=Tensor(glorot(rng, m, h), requires_grad=True),
        w_mu=Tensor(glorot(rng, h + e, f), requires_grad=True),
        w_sigma=Tensor(glorot(rng, h, f), requires_grad=True),
        noise_dim=e,
    )

    def unit_rows():
        v = rng.standard_normal((1, f))
        return Tensor(v / np.linalg.norm(v), requires_grad=True)

    widths = [m + 2 * f, *hp.t_widths, 1]
    tnet = mdl.TNetParams(
        gyro_a_mu=[unit_rows() for _ in range(f)],
        gyro_p_mu=[Tensor(np.zeros((1, f)), requires_grad=True) for _ in range(f)],
        gyro_a_z=[unit_rows() for _ in range(f)],
        gyro_p_z=[Tensor(np.zeros((1, f)), requires_grad=True) for _ in range(f)],
        weights=[Tensor(glorot(rng, a, b), requires_grad=True)
                 for a, b in zip(widths[:-1], widths[1:])],
        biases=[Tensor(np.zeros((1, b)), requires_grad=True) for b in widths[1:]],
    )
    return phi, tnet


def _snapshot(phi, tnet):
    return ([t.data.copy() for t in phi.tensors()],
            [t.data.copy() for t in tnet.tensors()])


def _restore(phi, tnet, snap):
    for t, d in zip(phi.tensors(), snap[0]):
        t.data = d.copy()
    for t, d in zip(tnet.tensors(), snap[1]):
        t.data = d.copy()


def _project_ball_params(tnet, c):
    # optimizer steps can push gyroplane offsets outside the ball
    for p in tnet.ball_tensors():
        with ad.no_grad():
            p.data = geo.project_to_ball(p.data, c).data


def checkpoint_header(g, hp):
    return {"n": g.n, "m": g.m, "f": hp.latent, "h": hp.hidden,
            "e": hp.noise_dim, "c": hp.c}


def save_run_checkpoint(path, g, hp, phi, tnet):
    mdl.save_checkpoint(path, checkpoint_header(g, hp),
                        phi.named_tensors() + tnet.named_tensors())


def train(g, split, hp, out_dir=None, quiet=False):
    """Run the alternating loop; returns (phi, tnet, history).

    The encoder sees only the training positives. Validation AUC is checked
    every hp.val_every epochs; training stops after hp.patience checks
    without improvement and the best parameters are restored.
    """
    rng = np.random.default_rng(hp.seed)
    phi, tnet = init_params(g.m, hp, seed=hp.seed)
    a_hat = gio.normalize_adjacency(g.adjacency(split.train_pos))
    adj = g.adjacency_dense(split.train_pos)
    w_pos = obj.positive_weight(g.n, len(split.train_pos))
    x = ad.constant(g.x)

    opt_phi = Adam(phi.tensors(), lr=hp.lr)
    opt_t = Adam(tnet.tensors(), lr=hp.lr_critic)

    history = []
    best_auc = -1.0
    best_snap = _snapshot(phi, tnet)
    checks_since_best = 0
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if metrics_path:
        os.makedirs(out_dir, exist_ok=True)
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,recon,prior,entropy_surrogate,mi_bound,total,val_auc,val_ap\n")

    for epoch in range(1, hp.epochs + 1):
        opt_phi.zero_grad()
        opt_t.zero_grad()
        total, breakdown, samples = obj.total_loss(
            a_hat, x, adj, phi, tnet, hp, rng, w_pos=w_pos)
        if not math.isfinite(breakdown.total):
            if out_dir:
                save_run_checkpoint(os.path.join(out_dir, "last.ckpt"), g, hp, phi, tnet)
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}: {breakdown}; "
                "last finite parameters were checkpointed")
        ad.backward(-total)
        opt_phi.step()

        if hp.gamma > 0.0:
            # critic ascent on the same tuple, fresh permutation, detached encoder
            opt_phi.zero_grad()
            opt_t.zero_grad()
            psi_const = mdl.PosteriorParams(mu=samples.psi0.mu.detach(),
                                            sigma=samples.psi0.sigma.detach())
            z_const = samples.zs[0].detach()
            perm = rng.permutation(g.n)
            t_obj = obj.mi_dual_bound(x, psi_const, z_const, tnet, hp.c, perm)
            ad.backward(-t_obj)
            opt_t.step()
            _project_ball_params(tnet, hp.c)

        row = {"epoch": epoch, "recon": breakdown.recon, "prior": breakdown.prior,
               "entropy_surrogate": breakdown.entropy_surrogate,
               "mi_bound": breakdown.mi_bound, "total": breakdown.total,
               "val_auc": "", "val_ap": ""}

        if epoch % hp.val_every == 0 and len(split.val_pos):
            auc, ap = validate(g, split, a_hat, phi, hp)
            row["val_auc"], row["val_ap"] = auc, ap
            if auc > best_auc:
                best_auc = auc
                best_snap = _snapshot(phi, tnet)
                checks_since_best = 0
                if out_dir:
                    save_run_checkpoint(os.path.join(out_dir, "best.ckpt"),
                                        g, hp, phi, tnet)
            else:
                checks_since_best += 1
            if not quiet:
                log.info("epoch %d total %.4f val_auc %.4f", epoch,
                         breakdown.total, auc)
            if checks_since_best >= hp.patience:
                history.append(row)
                _append_metrics(metrics_path, row)
                break
        history.append(row)
        _append_metrics(metrics_path, row)

    if best_auc >= 0.0:
        _restore(phi, tnet, best_snap)
    if out_dir:
        save_run_checkpoint(os.path.join(out_dir, "last.ckpt"), g, hp, phi, tnet)
        if best_auc < 0.0:
            save_run_checkpoint(os.path.join(out_dir, "best.ckpt"), g, hp, phi, tnet)
    return phi, tnet, history


def _append_metrics(path, row):
    if not path:
        return
    vals = [str(row["epoch"])]
    vals += [f"{row[k]:.10g}" for k in
             ("recon", "prior", "entropy_surrogate", "mi_bound", "total")]
    for k in ("val_auc", "val_ap"):
        v = row[k]
        vals.append("" if v == "" else f"{v:.10g}")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(",".join(vals) + "\n")


def validate(g, split, a_hat, phi, hp, n_draws=4):
    """Held-out AUC/AP on the validation edges from a small-sample embedding."""
    with ad.no_grad():
        rng = np.random.default_rng(hp.seed + 7919)
        tangent, _ = ev.embed_from(a_hat, g.x, phi, hp, s=n_draws, rng=rng)
    return ev.score_split(tangent, split.val_pos, split.val_neg)
