"""Evaluation: link prediction, node classification, stored-information
estimation, hierarchy recovery, and CSV export of embeddings."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from . import geometry as geo
from . import model as mdl
from . import objective as obj
from .autodiff import Adam, DomainError, Tensor

log = logging.getLogger(__name__)


def embed_from(a_hat, x, phi, hp, s=16, rng=None):
    """Average S posterior samples in the origin's tangent space.

    Returns (tangent means (N, F), ball means (N, F)); the ball means are
    the tangent-averaged posterior centers mapped back onto the ball.
    """
    rng = rng or np.random.default_rng(0)
    with ad.no_grad():
        tan_sum = mu_tan_sum = None
        for _ in range(s):
            psi = mdl.sample_psi(a_hat, x, phi, hp.c, rng)
            z, _ = mdl.sample_z(psi, hp.c, rng)
            vt = geo.log_map0(z, hp.c).data
            mt = geo.log_map0(psi.mu, hp.c).data
            tan_sum = vt if tan_sum is None else tan_sum + vt
            mu_tan_sum = mt if mu_tan_sum is None else mu_tan_sum + mt
        tangent = tan_sum / s
        ball = geo.exp_map0(mu_tan_sum / s, hp.c).data
    return tangent, ball


def score_pairs(tangent, pairs):
    """Sigmoid inner-product scores for (i, j) index pairs."""
    pairs = np.asarray(pairs).reshape(-1, 2)
    raw = np.sum(tangent[pairs[:, 0]] * tangent[pairs[:, 1]], axis=1)
    return 1.0 / (1.0 + np.exp(-raw))


def score_split(tangent, pos_pairs, neg_pairs):
    scores = np.concatenate([score_pairs(tangent, pos_pairs),
                             score_pairs(tangent, neg_pairs)])
    labels = np.concatenate([np.ones(len(pos_pairs)), np.zeros(len(neg_pairs))])
    return auc(scores, labels), average_precision(scores, labels)


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Computed by sorted counting; bitwise identical to the all-pairs count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise DomainError("AUC needs both classes present")
    wins = np.searchsorted(neg, pos, side="left").sum()
    ties = (np.searchsorted(neg, pos, side="right")
            - np.searchsorted(neg, pos, side="left")).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def average_precision(scores, labels):
    """AP over the score-descending ranking, ties broken by label-descending
    stable order (recorded in run metadata)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise DomainError("average precision needs both classes present")
    order = np.lexsort((-labels, -scores))  # stable: score desc, then label desc
    ranked = labels[order]
    tp = np.cumsum(ranked)
    k = np.arange(1, len(ranked) + 1)
    precision = tp / k
    return float(np.sum(precision[ranked == 1]) / n_pos)


def link_prediction_eval(g, split, phi, hp, rng=None, a_hat=None):
    """Test-edge AUC/AP from averaged tangent embeddings (train graph only)."""
    from . import graphio as gio
    if a_hat is None:
        a_hat = gio.normalize_adjacency(g.adjacency(split.train_pos))
    tangent, _ = embed_from(a_hat, g.x, phi, hp, s=hp.samples, rng=rng)
    return score_split(tangent, split.test_pos, split.test_neg)


def _stratified_folds(labels, folds, rng):
    """Round-robin deal within each class after a seeded shuffle."""
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise DomainError(f"class {cls} has {len(idx)} samples; cannot stratify")
        rng.shuffle(idx)
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def node_classification(embeddings, labels, folds=10, seed=0, steps=500,
                        l2=1e-3, lr=0.5):
    """Stratified k-fold multinomial logistic regression (full-batch GD).

    Returns mean test accuracy across folds."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    assignment = _stratified_folds(y, folds, rng)
    classes = int(y.max()) + 1
    accs = []
    for fold in range(folds):
        train_idx = assignment != fold
        test_idx = ~train_idx
        if len(np.unique(y[train_idx])) < classes:
            raise DomainError(f"fold {fold} lost a class; re-stratify with another seed")
        w, b = _softmax_regression(x[train_idx], y[train_idx], classes,
                                   steps=steps, l2=l2, lr=lr)
        pred = np.argmax(x[test_idx] @ w + b, axis=1)
        accs.append(float(np.mean(pred == y[test_idx])))
    return float(np.mean(accs))


def _softmax_regression(x, y, classes, steps, l2, lr):
    n, f = x.shape
    w = np.zeros((f, classes))
    b = np.zeros((1, classes))
    onehot = np.eye(classes)[y]
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        gw = x.T @ (p - onehot) / n + l2 * w
        gb = (p - onehot).sum(axis=0, keepdims=True) / n
        w -= lr * gw
        b -= lr * gb
    return w, b


@dataclass
class MLPCritic:
    weights: list
    biases: list

    def tensors(self):
        return self.weights + self.biases

    def __call__(self, feats):
        h = feats if isinstance(feats, Tensor) else ad.constant(feats)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            if k < last:
                h = ad.relu(h)
        return h


def _mlp_critic(dims, rng):
    from .train import glorot
    widths = list(dims)
    return MLPCritic(
        weights=[Tensor(glorot(rng, a, b), requires_grad=True)
                 for a, b in zip(widths[:-1], widths[1:])],
        biases=[Tensor(np.zeros((1, b)), requires_grad=True) for b in widths[1:]],
    )


def dv_mutual_information(side_info, latents, steps=2000, lr=1e-4, seed=0,
                          hidden=(256, 64), bound="dv", average_last=100):
    """Neural estimate of I(side_info; latents) in nats.

    Trains an MLP critic on (side, z) rows against permuted-z rows and
    reports the bound averaged over the last `average_last` steps. bound
    "dv" uses mean_joint[T] - log mean_perm[e^T]; "fstar" uses
    mean_joint[T] - mean_perm[e^(T-1)]. A non-finite critic restarts once
    at lr/10.
    """
    side = np.asarray(side_info, dtype=np.float64)
    z = np.asarray(latents, dtype=np.float64)
    if side.ndim == 1:
        side = side[:, None]
    if z.ndim == 1:
        z = z[:, None]
    n = side.shape[0]
    if n < 2:
        raise DomainError("MI estimation needs at least two samples")

    def run(lr_now):
        rng = np.random.default_rng(seed)
        critic = _mlp_critic((side.shape[1] + z.shape[1], *hidden, 1), rng)
        optim = Adam(critic.tensors(), lr=lr_now)
        x_const = ad.constant(side)
        z_const = ad.constant(z)
        tail = []
        for step in range(steps):
            perm = rng.permutation(n)
            optim.zero_grad()
            t_joint = critic(ad.concat([x_const, z_const], axis=1))
            t_marg = critic(ad.concat([x_const, ad.permute_rows(z_const, perm)],
                                      axis=1))
            if bound == "dv":
                value = ad.tmean(t_joint) - (ad.logsumexp(t_marg) - math.log(n))
            elif bound == "fstar":
                value = ad.tmean(t_joint) - ad.tmean(obj.f_star(t_marg))
            else:
                raise DomainError(f"unknown bound {bound!r}")
            v = value.item()
            if not math.isfinite(v):
                return None
            ad.backward(-value)
            optim.step()
            if step >= steps - average_last:
                tail.append(v)
        return float(np.mean(tail))

    est = run(lr)
    if est is None:
        log.warning("MI critic diverged; restarting at lr/10")
        est = run(lr / 10.0)
        if est is None:
            raise DomainError("MI critic diverged twice; estimation failed")
    return est


def mi_estimate(g, phi, hp, steps=2000, seed=0, lr=1e-4, a_hat=None,
                train_edges=None):
    """Stored-information estimate on a trained, frozen encoder.

    A fresh critic (gyroplane front-end, paper-sized MLP) maximizes the
    Donsker-Varadhan bound with fresh posterior tuples and a fresh row
    permutation per step; reports the bound averaged over the last 100.
    """
    from . import graphio as gio
    from .train import init_params, _project_ball_params
    if a_hat is None:
        a_hat = gio.normalize_adjacency(
            g.adjacency(train_edges if train_edges is not None else None))

    def run(lr_now):
        rng = np.random.default_rng(seed)
        _, critic = init_params(g.m, hp, seed=seed + 101)
        optim = Adam(critic.tensors(), lr=lr_now)
        x_const = ad.constant(g.x)
        tail = []
        n = g.n
        for step in range(steps):
            with ad.no_grad():
                psi = mdl.sample_psi(a_hat, x_const, phi, hp.c, rng)
                z, _ = mdl.sample_z(psi, hp.c, rng)
            psi_c = mdl.PosteriorParams(mu=psi.mu.detach(), sigma=psi.sigma.detach())
            z_c = z.detach()
            perm = rng.permutation(n)
            optim.zero_grad()
            t_joint = mdl.t_critic(x_const, psi_c.mu, z_c, critic, hp.c)
            t_marg = mdl.t_critic(x_const, psi_c.mu, ad.permute_rows(z_c, perm),
                                  critic, hp.c)
            value = ad.tmean(t_joint) - (ad.logsumexp(t_marg) - math.log(n))
            v = value.item()
            if not math.isfinite(v):
                return None
            ad.backward(-value)
            optim.step()
            _project_ball_params(critic, hp.c)
            if step >= steps - 100:
                tail.append(v)
        return float(np.mean(tail))

    est = run(lr)
    if est is None:
        log.warning("stored-MI critic diverged; restarting at lr/10")
        est = run(lr / 10.0)
        if est is None:
            raise DomainError("stored-MI critic diverged twice")
    return est


def export_embeddings(path, embeddings, labels=None, depths=None):
    """CSV: node_id,z_1..z_F[,label][,depth]; values round-trip at 1e-15."""
    emb = np.asarray(embeddings, dtype=np.float64)
    cols = [f"z_{k + 1}" for k in range(emb.shape[1])]
    header = ["node_id", *cols]
    if labels is not None:
        header.append("label")
    if depths is not None:
        header.append("depth")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(emb.shape[0]):
            row = [str(i), *(repr(float(v)) for v in emb[i])]
            if labels is not None:
                row.append(str(int(labels[i])))
            if depths is not None:
                row.append(str(int(depths[i])))
            fh.write(",".join(row) + "\n")


def export_edges(path, edges):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("src,dst\n")
        for i, j in np.asarray(edges).reshape(-1, 2):
            fh.write(f"{i},{j}\n")


def hierarchy_metrics(ball_embeddings, depths, edges, c, n_random=10000, seed=0):
    """(Spearman of depth vs origin distance, parent-child / random distance ratio)."""
    z = np.asarray(ball_embeddings, dtype=np.float64)
    depths = np.asarray(depths)
    n = z.shape[0]
    with ad.no_grad():
        d0 = geo.distance(np.zeros_like(z), z, c).data[:, 0]
    if np.allclose(d0, d0[0]):
        raise DomainError("constant embeddings: depth correlation undefined")
    rho = spearmanr(depths, d0).correlation

    edges = np.asarray(edges).reshape(-1, 2)
    with ad.no_grad():
        d_edge = geo.distance(z[edges[:, 0]], z[edges[:, 1]], c).data[:, 0]
    edge_set = {(int(i), int(j)) for i, j in edges}
    edge_set |= {(j, i) for i, j in edge_set}
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_random:
        cand = rng.integers(0, n, size=(n_random, 2))
        for i, j in cand:
            if i == j or (int(i), int(j)) in edge_set:
                continue
            pairs.append((i, j))
            if len(pairs) == n_random:
                break
    pairs = np.asarray(pairs)
    with ad.no_grad():
        d_rand = geo.distance(z[pairs[:, 0]], z[pairs[:, 1]], c).data[:, 0]
    return float(rho), float(d_edge.mean() / d_rand.mean())
