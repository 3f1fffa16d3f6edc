import os

import numpy as np
import pytest

from esihge import graphio as gio
from esihge.autodiff import DomainError


def write_toy_citation(tmp_path, content_rows, cites_rows):
    content = tmp_path / "toy.content"
    cites = tmp_path / "toy.cites"
    content.write_text("\n".join(content_rows) + "\n", encoding="utf-8")
    cites.write_text("\n".join(cites_rows) + "\n" if cites_rows else "",
                     encoding="utf-8")
    return str(content), str(cites)


class TestLoadCitation:
    def test_two_node_single_citation(self, tmp_path):
        content, cites = write_toy_citation(
            tmp_path,
            ["a\t1\t0\t1\tml", "b\t0\t1\t0\tdb"],
            ["a\tb"],
        )
        g = gio.load_citation(content, cites)
        assert (g.n, g.m, g.num_classes) == (2, 3, 2)
        np.testing.assert_array_equal(g.edges, [[0, 1]])
        dense = g.adjacency_dense()
        np.testing.assert_array_equal(dense, [[0, 1], [1, 0]])

    def test_self_citations_dropped_and_unknown_skipped(self, tmp_path, caplog):
        content, cites = write_toy_citation(
            tmp_path,
            ["a\t1\t0\tml", "b\t0\t1\tml", "c\t1\t1\tdb"],
            ["a\ta", "a\tmissing", "b\tc", "c\tb"],
        )
        g = gio.load_citation(content, cites)
        np.testing.assert_array_equal(g.edges, [[1, 2]])

    def test_malformed_line_reports_lineno(self, tmp_path):
        content, cites = write_toy_citation(
            tmp_path, ["a\t1\tml", "b\tnotanumber\tml"], [])
        with pytest.raises(gio.ParseError, match="toy.content:2"):
            gio.load_citation(content, cites)

    def test_empty_graph_rejected(self, tmp_path):
        content, cites = write_toy_citation(tmp_path, [""], [])
        with pytest.raises(gio.ParseError, match="empty"):
            gio.load_citation(content, cites)

    def test_loader_is_pure(self, tmp_path):
        content, cites = write_toy_citation(
            tmp_path,
            [f"n{i}\t" + "\t".join("01"[j % 2] for j in range(4)) + "\tx"
             for i in range(6)],
            ["n0\tn1", "n2\tn3", "n4\tn5", "n1\tn2"],
        )
        g1 = gio.load_citation(content, cites)
        g2 = gio.load_citation(content, cites)
        np.testing.assert_array_equal(g1.x, g2.x)
        np.testing.assert_array_equal(g1.edges, g2.edges)

    def test_pubmed_like_export_format(self, tmp_path):
        # truncated export in the Pubmed schema: 500 features, 3 classes
        rng = np.random.default_rng(0)
        rows = []
        for i in range(30):
            feats = "\t".join(f"{v:.4f}" for v in rng.random(500) * (rng.random(500) < 0.1))
            rows.append(f"p{i}\t{feats}\tclass{i % 3}")
        cites = [f"p{i}\tp{(i * 7 + 1) % 30}" for i in range(40)]
        content, cpath = write_toy_citation(tmp_path, rows, cites)
        g = gio.load_citation(content, cpath)
        assert (g.n, g.m, g.num_classes) == (30, 500, 3)
        assert g.num_edges > 0


class TestNormalizeAdjacency:
    def test_single_isolated_node(self):
        g = gio.Graph(x=np.ones((1, 2)), edges=np.empty((0, 2)))
        ahat = gio.normalize_adjacency(g.adjacency())
        np.testing.assert_array_equal(ahat.to_dense(), [[1.0]])

    def test_two_node_edge(self):
        g = gio.Graph(x=np.ones((2, 2)), edges=np.array([[0, 1]]))
        ahat = gio.normalize_adjacency(g.adjacency())
        np.testing.assert_allclose(ahat.to_dense(), np.full((2, 2), 0.5), atol=1e-15)

    def test_spectral_radius_at_most_one(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            dense = np.triu((rng.random((n, n)) < 0.4).astype(float), k=1)
            edges = np.argwhere(dense > 0)
            g = gio.Graph(x=np.ones((n, 1)), edges=edges)
            ahat = gio.normalize_adjacency(g.adjacency()).to_dense()
            eigs = np.linalg.eigvalsh(ahat)
            assert np.max(np.abs(eigs)) <= 1.0 + 1e-10


def toy_graph(n=40, seed=0, min_edges=60):
    rng = np.random.default_rng(seed)
    edges = set()
    while len(edges) < min_edges:
        i, j = rng.integers(0, n, 2)
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return gio.Graph(x=rng.random((n, 5)), edges=np.array(sorted(edges)))


class TestSplitEdges:
    def test_partition_and_fractions(self):
        g = toy_graph(min_edges=100)
        split = gio.split_edges(g, seed=3)
        e = g.num_edges
        assert len(split.test_pos) == round(0.10 * e)
        assert len(split.val_pos) == round(0.05 * e)
        total = np.concatenate([split.train_pos, split.val_pos, split.test_pos])
        assert len(total) == e
        as_set = {tuple(p) for p in total}
        assert as_set == {tuple(p) for p in g.edges}

    def test_deterministic_for_seed(self):
        g = toy_graph()
        s1 = gio.split_edges(g, seed=11)
        s2 = gio.split_edges(g, seed=11)
        for a, b in [(s1.train_pos, s2.train_pos), (s1.val_neg, s2.val_neg),
                     (s1.test_neg, s2.test_neg)]:
            np.testing.assert_array_equal(a, b)

    def test_negatives_clean(self):
        g = toy_graph(min_edges=120)
        split = gio.split_edges(g, seed=5)
        true_set = {tuple(p) for p in g.edges}
        negs = np.concatenate([split.val_neg, split.test_neg])
        assert len(negs) == len(split.val_pos) + len(split.test_pos)
        seen = set()
        for i, j in negs:
            assert i != j
            pair = (min(i, j), max(i, j))
            assert pair not in true_set
            assert pair not in seen
            seen.add(pair)

    def test_refuses_tiny_graphs(self):
        g = toy_graph(n=10, min_edges=10)
        with pytest.raises(DomainError, match="degenerate"):
            gio.split_edges(g, seed=0)


class TestSyntheticTree:
    def test_default_shape(self):
        g, depths, images = gio.generate_synthetic_tree(nodes=63, side=64, seed=1)
        assert (g.n, g.m, g.num_edges) == (63, 4096, 62)
        assert images.shape == (63, 64, 64)
        assert depths[0] == 0
        assert depths.max() == 5
        assert np.all(g.x >= 0) and np.all(g.x <= 1)

    def test_depth_list_follows_complete_tree(self):
        _, depths, _ = gio.generate_synthetic_tree(nodes=15, side=32, seed=2)
        expected = [0] + [1] * 2 + [2] * 4 + [3] * 8
        np.testing.assert_array_equal(depths, expected)

    def test_child_extends_parent(self):
        g, _, images = gio.generate_synthetic_tree(nodes=15, side=48, seed=3)
        for child in range(1, 15):
            parent = (child - 1) // 2
            diff = images[child] != images[parent]
            # pixels agree outside the newly placed shape, which lands on
            # previously black pixels
            assert diff.sum() > 0
            assert np.all(images[parent][diff] == 0)
            assert np.all(images[child][diff] > 0)

    def test_new_shape_is_one_connected_region(self):
        from scipy.ndimage import label
        _, _, images = gio.generate_synthetic_tree(nodes=15, side=48, seed=4)
        eight = np.ones((3, 3), dtype=int)
        for child in range(1, 15):
            parent = (child - 1) // 2
            diff = (images[child] != images[parent]).astype(int)
            _, count = label(diff, structure=eight)
            assert count == 1

    def test_seed_determinism(self):
        g1, _, im1 = gio.generate_synthetic_tree(nodes=31, side=32, seed=9)
        g2, _, im2 = gio.generate_synthetic_tree(nodes=31, side=32, seed=9)
        np.testing.assert_array_equal(im1, im2)
        np.testing.assert_array_equal(g1.x, g2.x)

    def test_export_and_reload(self, tmp_path):
        g, depths, images = gio.generate_synthetic_tree(nodes=15, side=16, seed=5)
        out = str(tmp_path / "synth")
        gio.export_synthetic(out, g, depths, images)
        assert len([f for f in os.listdir(out) if f.endswith(".pgm")]) == 15
        back = gio.read_pgm(os.path.join(out, "node0003.pgm"))
        np.testing.assert_allclose(back, images[3], atol=1.0 / 255)
        g2 = gio.load_citation(os.path.join(out, "tree.content"),
                               os.path.join(out, "tree.cites"))
        assert g2.n == 15 and g2.m == 256
        np.testing.assert_allclose(g2.x, g.x, atol=1e-15)
        depth_rows = np.loadtxt(os.path.join(out, "depth.csv"), delimiter=",",
                                skiprows=1, dtype=np.int64)
        np.testing.assert_array_equal(depth_rows[:, 1], depths)
