import itertools

import numpy as np
import pytest

from gpt_lab.graphs import (
    DataError,
    GraphParseError,
    GraphSample,
    GraphValidationError,
    batch,
    count_components,
    degree_encoding,
    gen_downstream,
    gen_pretext,
    has_cycle_of_length,
    make_folds,
    read_graph_file,
    rwpe,
    triangle_count,
    with_rwpe,
    write_graph_file,
)

RNG = np.random.default_rng(7)


def sample(n, edges, label=None, d=3, rng=RNG):
    return GraphSample(n, rng.normal(size=(n, d)), tuple(edges), label)


def triangle():
    return sample(3, [(0, 1), (1, 2), (0, 2)])


def random_graph(n, p, rng):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return sample(n, edges, rng=rng)


# -- independent oracles -----------------------------------------------------


def oracle_triangles(g: GraphSample) -> int:
    adj = set(g.edges)
    have = lambda a, b: (min(a, b), max(a, b)) in adj
    return sum(1 for a, b, c in itertools.combinations(range(g.n), 3)
               if have(a, b) and have(b, c) and have(a, c))


def oracle_cycle(g: GraphSample, length: int) -> bool:
    adj = set(g.edges)
    have = lambda a, b: (min(a, b), max(a, b)) in adj
    for nodes in itertools.combinations(range(g.n), length):
        first, rest = nodes[0], nodes[1:]
        for perm in itertools.permutations(rest):
            ring = (first,) + perm
            if all(have(ring[i], ring[(i + 1) % length]) for i in range(length)):
                return True
    return False


# -- encodings ---------------------------------------------------------------


class TestRwpe:
    def test_triangle_by_hand(self):
        # on K3 every 1-step walk leaves the node; every 2-step walk has
        # 2 equally likely moves back, one of which returns
        enc = rwpe(triangle(), 2).data
        assert np.allclose(enc, [[0.0, 0.5]] * 3, atol=1e-15)

    def test_single_edge_must_return(self):
        enc = rwpe(sample(2, [(0, 1)]), 2).data
        assert np.allclose(enc, [[0.0, 1.0]] * 2, atol=1e-15)

    def test_isolated_node_zero_row(self):
        enc = rwpe(sample(3, [(0, 1)]), 4).data
        assert np.array_equal(enc[2], np.zeros(4))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        g = random_graph(8, 0.4, rng)
        perm = rng.permutation(8)
        relabeled = GraphSample(
            8, g.features,  # features play no role in the encoding
            tuple((int(perm[i]), int(perm[j])) for i, j in g.edges))
        base = rwpe(g, 5).data
        moved = rwpe(relabeled, 5).data
        assert np.allclose(moved[perm], base, atol=1e-12)


class TestDegreeEncoding:
    def test_triangle(self):
        assert degree_encoding(triangle(), 8).tolist() == [2, 2, 2]

    def test_path(self):
        g = sample(3, [(0, 1), (1, 2)])
        assert degree_encoding(g, 8).tolist() == [1, 2, 1]

    def test_star_clamps(self):
        g = sample(21, [(0, i) for i in range(1, 21)])
        enc = degree_encoding(g, 8)
        assert enc[0] == 8 and set(enc[1:].tolist()) == {1}


def test_with_rwpe_widens_features():
    g = triangle()
    out = with_rwpe([g], 4)[0]
    assert out.feature_dim == g.feature_dim + 4
    assert np.array_equal(out.features[:, :g.feature_dim], g.features)


# -- batching ----------------------------------------------------------------


class TestBatch:
    def test_single_graph_all_real(self):
        g = triangle()
        b = batch([g])
        assert b.n_max == 3
        assert b.node_mask.all() and b.attn_mask.all()

    def test_mask_counts(self):
        b = batch([sample(3, [(0, 1)]), sample(5, [(0, 1), (2, 3)])])
        assert b.sample_sizes() == [3, 5]
        assert b.node_mask.sum(axis=1).tolist() == [3, 5]

    def test_attn_mask_is_outer_and_of_node_mask(self):
        b = batch([sample(3, []), sample(5, [])])
        for bi in range(2):
            assert np.array_equal(b.attn_mask[bi],
                                  np.outer(b.node_mask[bi], b.node_mask[bi]))

    def test_heterogeneous_width_rejected(self):
        with pytest.raises(DataError, match="feature widths"):
            batch([sample(3, [], d=3), sample(3, [], d=4)])

    def test_heterogeneous_label_arity_rejected(self):
        with pytest.raises(DataError, match="label arity"):
            batch([sample(3, [], label=[1.0]), sample(3, [])])


# -- generators --------------------------------------------------------------


class TestPretext:
    def test_k4_has_four_triangles(self):
        k4 = sample(4, itertools.combinations(range(4), 2))
        assert triangle_count(k4) == 4

    def test_tree_label_zero(self):
        g = sample(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)])
        assert triangle_count(g) == 0

    def test_labels_match_oracle_and_normalization(self):
        for g in gen_pretext(25, (4, 10), seed=11):
            assert g.label[0] == pytest.approx(oracle_triangles(g) / g.n, abs=0)

    def test_deterministic(self):
        a = gen_pretext(10, (4, 8), seed=5)
        b = gen_pretext(10, (4, 8), seed=5)
        for ga, gb in zip(a, b):
            assert ga.n == gb.n and ga.edges == gb.edges
            assert np.array_equal(ga.features, gb.features)
            assert np.array_equal(ga.label, gb.label)

    def test_size_range_validated(self):
        with pytest.raises(DataError):
            gen_pretext(5, (2, 8), seed=0)


class TestDownstream:
    def test_unknown_task(self):
        with pytest.raises(DataError, match="unknown task"):
            gen_downstream(5, "nope", seed=0)

    def test_motif_labels_match_subset_oracle(self):
        data = gen_downstream(40, "motif_presence", seed=3, size_range=(6, 10))
        for g in data:
            assert g.label[0] == float(oracle_cycle(g, 4))

    def test_motif_balance_within_five_percent(self):
        data = gen_downstream(100, "motif_presence", seed=9)
        positives = sum(g.label[0] for g in data)
        assert abs(positives / len(data) - 0.5) <= 0.05

    def test_planted_cycle_and_tree_edge_cases(self):
        data = gen_downstream(30, "motif_presence", seed=1, size_range=(6, 9))
        assert any(g.label[0] == 1.0 for g in data)
        assert any(g.label[0] == 0.0 for g in data)

    def test_community_count_matches_components(self):
        data = gen_downstream(25, "community_count", seed=4)
        for g in data:
            assert g.label[0] == float(count_components(g))
        assert {g.label[0] for g in data} >= {1.0, 2.0}

    def test_multi_motif_labels_and_balance(self):
        data = gen_downstream(60, "multi_motif", seed=6, size_range=(6, 12))
        for g in data:
            for col, length in enumerate((3, 4, 5)):
                assert g.label[col] == float(oracle_cycle(g, length)), (g.edges, col)
        labels = np.stack([g.label for g in data])
        assert np.all(np.abs(labels.mean(axis=0) - 0.5) <= 0.05)

    def test_deterministic(self):
        a = gen_downstream(8, "motif_presence", seed=2)
        b = gen_downstream(8, "motif_presence", seed=2)
        for ga, gb in zip(a, b):
            assert ga.edges == gb.edges and np.array_equal(ga.features, gb.features)


def test_has_cycle_matches_oracle_on_random_graphs():
    rng = np.random.default_rng(12)
    for _ in range(30):
        g = random_graph(7, 0.35, rng)
        for length in (3, 4, 5):
            assert has_cycle_of_length(g, length) == oracle_cycle(g, length)


# -- file format ---------------------------------------------------------------


class TestGraphFile:
    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.gr"
        write_graph_file(path, [])
        assert read_graph_file(path) == []

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        graphs = [random_graph(int(rng.integers(3, 9)), 0.4, rng) for _ in range(10)]
        graphs = [GraphSample(g.n, g.features, g.edges, rng.normal(size=2))
                  for g in graphs]
        path = tmp_path / "ds.gr"
        write_graph_file(path, graphs)
        back = read_graph_file(path)
        assert len(back) == len(graphs)
        for a, b in zip(graphs, back):
            assert a.n == b.n and a.edges == b.edges
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.label, b.label)

    def test_out_of_range_edge_reports_line(self, tmp_path):
        path = tmp_path / "bad.gr"
        path.write_text("GPTGRAPH v1 d=1 t=0\ng 6 1\n" + "0.0\n" * 6 + "e 5 9\ny\n")
        with pytest.raises(GraphValidationError, match="line 9"):
            read_graph_file(path)

    def test_malformed_line_reports_line(self, tmp_path):
        path = tmp_path / "bad.gr"
        path.write_text("GPTGRAPH v1 d=2 t=0\ng 1 0\n0.0\ny\n")
        with pytest.raises(GraphParseError, match="line 3"):
            read_graph_file(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.gr"
        path.write_text("GRAPHS v9 d=1 t=0\n")
        with pytest.raises(GraphParseError, match="line 1"):
            read_graph_file(path)


# -- sample validation ---------------------------------------------------------


class TestGraphSample:
    def test_rejects_self_loop(self):
        with pytest.raises(GraphValidationError, match="self-loop"):
            sample(3, [(1, 1)])

    def test_rejects_duplicate_edge(self):
        with pytest.raises(GraphValidationError, match="duplicate"):
            sample(3, [(0, 1), (1, 0)])

    def test_rejects_out_of_range(self):
        with pytest.raises(GraphValidationError, match="out of range"):
            sample(3, [(0, 3)])


# -- folds ---------------------------------------------------------------------


class TestFolds:
    def test_partition_properties(self):
        split = make_folds(23, 5, seed=1)
        counts = np.bincount(split.folds, minlength=5)
        assert counts.sum() == 23
        assert counts.max() - counts.min() <= 1

    def test_train_eval_disjoint_cover(self):
        split = make_folds(20, 5, seed=2)
        for f in range(5):
            tr, ev = split.train_eval(f)
            assert len(set(tr) & set(ev)) == 0
            assert len(tr) + len(ev) == 20

    def test_deterministic(self):
        a = make_folds(50, 5, seed=3)
        b = make_folds(50, 5, seed=3)
        assert np.array_equal(a.folds, b.folds)
