"""Citation-network ingestion, adjacency normalization, edge splits, and the
synthetic hierarchical image-tree generator.

File formats:
  .content   <node-id>\t<f1>\t...\t<fM>\t<label>
  .cites     <cited-id>\t<citing-id>
  synthetic export: P5 binary PGM per node, plus .content/.cites in the same
  layout and a depth.csv (node_id,depth).
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import DomainError, SparseMatrix

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


@dataclass
class Graph:
    """Undirected attributed graph; adjacency is binary, symmetric, diagonal-free."""

    x: np.ndarray                      # (N, M) float64 features
    edges: np.ndarray                  # (E, 2) int, i < j, unique
    labels: Optional[np.ndarray] = None
    num_classes: int = 0
    ids: Optional[list] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if not np.all(np.isfinite(self.x)):
            raise ParseError("feature rows must be finite")
        n = self.x.shape[0]
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ParseError("edge endpoint out of range")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ParseError("edges must be stored as i < j")
            if len(np.unique(self.edges[:, 0] * n + self.edges[:, 1])) != len(self.edges):
                raise ParseError("duplicate edges")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.size and self.labels.max() >= self.num_classes:
                raise ParseError("label id exceeds class count")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def m(self):
        return self.x.shape[1]

    @property
    def num_edges(self):
        return len(self.edges)

    def adjacency(self, edges=None):
        """Symmetric binary adjacency as a SparseMatrix (zero diagonal)."""
        e = self.edges if edges is None else np.asarray(edges).reshape(-1, 2)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return SparseMatrix.from_coo((self.n, self.n), rows, cols, np.ones(len(rows)))

    def adjacency_dense(self, edges=None):
        e = self.edges if edges is None else np.asarray(edges).reshape(-1, 2)
        a = np.zeros((self.n, self.n))
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
        return a


@dataclass
class EdgeSplit:
    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray
    seed: int


@dataclass
class SyntheticTreeConfig:
    nodes: int = 63
    side: int = 64
    intensity: tuple = (0.2, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.nodes < 1:
            raise DomainError("node count must be >= 1")
        if self.side < 8:
            raise DomainError("image side must be >= 8")


def load_citation(content_path, cites_path, normalize_rows=False):
    """Read .content/.cites files into a Graph.

    Node order follows the content file. Citations to unknown ids are
    skipped (counted in a warning); self-citations are dropped; edges are
    symmetrized and deduplicated. Labels get ids in sorted label order.
    """
    ids, rows, raw_labels = [], [], []
    with open(content_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError(f"{content_path}:{lineno}: expected id, features, label")
            ids.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:-1]])
            except ValueError as e:
                raise ParseError(f"{content_path}:{lineno}: bad feature value ({e})") from None
            raw_labels.append(parts[-1])
    if not ids:
        raise ParseError(f"{content_path}: empty graph")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ParseError(f"{content_path}: inconsistent feature counts {sorted(widths)}")

    index = {node_id: i for i, node_id in enumerate(ids)}
    if len(index) != len(ids):
        raise ParseError(f"{content_path}: duplicate node ids")
    classes = sorted(set(raw_labels))
    label_ids = np.array([classes.index(l) for l in raw_labels], dtype=np.int64)

    pairs = set()
    skipped = 0
    with open(cites_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{cites_path}:{lineno}: expected two node ids")
            a, b = parts
            if a not in index or b not in index:
                skipped += 1
                continue
            i, j = index[a], index[b]
            if i == j:
                continue
            pairs.add((min(i, j), max(i, j)))
    if skipped:
        log.warning("%s: skipped %d citations to unknown ids", cites_path, skipped)

    x = np.array(rows, dtype=np.float64)
    if normalize_rows:
        sums = x.sum(axis=1, keepdims=True)
        sums[sums == 0] = 1.0
        x = x / sums
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return Graph(x=x, edges=edges, labels=label_ids, num_classes=len(classes), ids=ids)


def normalize_adjacency(adj):
    """Symmetric renormalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    if not isinstance(adj, SparseMatrix):
        raise DomainError("normalize_adjacency expects a SparseMatrix")
    n = adj.shape[0]
    indptr, indices, values = adj.indptr, adj.indices, adj.values
    rows = np.repeat(np.arange(n), np.diff(indptr))
    cols = indices.astype(np.int64)
    vals = values.copy()
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    vals = np.concatenate([vals, np.ones(n)])
    deg = np.zeros(n)
    np.add.at(deg, rows, vals)
    dinv = deg ** -0.5
    return SparseMatrix.from_coo((n, n), rows, cols, vals * dinv[rows] * dinv[cols])


def split_edges(g, fractions=(0.85, 0.05, 0.10), seed=0):
    """Partition undirected edges into train/val/test and sample matching negatives.

    Deterministic for a seed. The training graph (train positives only) is
    what the encoder sees; negatives are uniform non-edges, no self pairs,
    no duplicates, verified against the full edge set.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DomainError(f"fractions must sum to 1, got {fractions}")
    e = g.num_edges
    if e < 20:
        raise DomainError(f"graph has {e} edges; split would be degenerate")
    rng = np.random.default_rng(seed)
    order = rng.permutation(e)
    n_test = int(round(fractions[2] * e))
    n_val = int(round(fractions[1] * e))
    test_pos = g.edges[order[:n_test]]
    val_pos = g.edges[order[n_test:n_test + n_val]]
    train_pos = g.edges[order[n_test + n_val:]]

    true_set = {(int(i), int(j)) for i, j in g.edges}
    neg = _sample_non_edges(g.n, n_val + n_test, true_set, rng)
    return EdgeSplit(train_pos=train_pos, val_pos=val_pos, test_pos=test_pos,
                     val_neg=neg[:n_val], test_neg=neg[n_val:], seed=seed)


def _sample_non_edges(n, count, true_set, rng):
    max_pairs = n * (n - 1) // 2
    if count > max_pairs - len(true_set):
        raise DomainError("not enough non-edges to sample")
    chosen = set()
    out = []
    while len(out) < count:
        draw = rng.integers(0, n, size=(max(64, 2 * (count - len(out))), 2))
        for i, j in draw:
            if i == j:
                continue
            pair = (int(min(i, j)), int(max(i, j)))
            if pair in true_set or pair in chosen:
                continue
            chosen.add(pair)
            out.append(pair)
            if len(out) == count:
                break
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def generate_synthetic_tree(cfg=None, **kwargs):
    """Build the image tree: each child copies its parent image and adds one
    non-overlapping random shape (convex polygon or disc) at random intensity.

    Returns (graph, depths, images); features are the vectorized pixels in
    [0, 1], edges are parent-child pairs, labels are node depths.
    """
    cfg = cfg or SyntheticTreeConfig(**kwargs)
    rng = np.random.default_rng(cfg.seed)
    side = cfg.side
    images = np.zeros((cfg.nodes, side, side))
    lo, hi = cfg.intensity

    images[0] = _place_shape(np.zeros((side, side)), rng, lo, hi, kind="polygon")
    for child in range(1, cfg.nodes):
        parent = (child - 1) // 2
        images[child] = _place_shape(images[parent].copy(), rng, lo, hi)

    depths = np.array([int(math.floor(math.log2(i + 1))) for i in range(cfg.nodes)],
                      dtype=np.int64)
    edges = np.array([[(i - 1) // 2, i] for i in range(1, cfg.nodes)],
                     dtype=np.int64).reshape(-1, 2)
    x = images.reshape(cfg.nodes, side * side).copy()
    g = Graph(x=x, edges=edges, labels=depths, num_classes=int(depths.max()) + 1)
    return g, depths, images


def _place_shape(canvas, rng, lo, hi, tries=100, kind=None):
    """Draw one random filled shape on free pixels; shrink after `tries` misses.

    The rasterized mask must be a single 8-connected region so every
    child-parent difference is one shape."""
    from scipy.ndimage import label
    side = canvas.shape[0]
    occupied = canvas > 0
    radius = side / 6.0
    min_radius = 1.5
    eight = np.ones((3, 3), dtype=int)
    while radius >= min_radius:
        for _ in range(tries):
            mask = _random_shape_mask(side, radius, rng, kind)
            if mask.sum() == 0 or (mask & occupied).any():
                continue
            if label(mask, structure=eight)[1] != 1:
                continue
            out = canvas.copy()
            out[mask] = rng.uniform(lo, hi)
            return out
        radius *= 0.7
    raise DomainError("could not place a non-overlapping shape; increase the image side")


def _random_shape_mask(side, radius, rng, kind=None):
    cx, cy = rng.uniform(radius, side - radius, size=2)
    yy, xx = np.mgrid[0:side, 0:side]
    if kind is None:
        kind = "disc" if rng.random() < 0.4 else "polygon"
    if kind == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    nv = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
    px = cx + radius * np.cos(angles)
    py = cy + radius * np.sin(angles)
    # convex polygon: point is inside iff on the same side of every edge
    mask = np.ones((side, side), dtype=bool)
    for k in range(nv):
        x1, y1 = px[k], py[k]
        x2, y2 = px[(k + 1) % nv], py[(k + 1) % nv]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        mask &= cross >= 0
    return mask


def write_pgm(path, image):
    """8-bit binary PGM (P5); image values in [0, 1]."""
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / maxval


def export_synthetic(out_dir, graph, depths, images):
    """Write PGMs, .content/.cites in the citation layout, and depth.csv."""
    os.makedirs(out_dir, exist_ok=True)
    for i, img in enumerate(images):
        write_pgm(os.path.join(out_dir, f"node{i:04d}.pgm"), img)
    with open(os.path.join(out_dir, "tree.content"), "w", encoding="utf-8") as fh:
        for i in range(graph.n):
            feats = "\t".join(repr(float(v)) for v in graph.x[i])
            fh.write(f"{i}\t{feats}\t{depths[i]}\n")
    with open(os.path.join(out_dir, "tree.cites"), "w", encoding="utf-8") as fh:
        for i, j in graph.edges:
            fh.write(f"{i}\t{j}\n")
    with open(os.path.join(out_dir, "depth.csv"), "w", encoding="utf-8") as fh:
        fh.write("node_id,depth\n")
        for i, d in enumerate(depths):
            fh.write(f"{i},{d}\n")
