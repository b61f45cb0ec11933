import math

import numpy as np
import pytest

from gpt_lab.graphs import GraphSample, batch
from gpt_lab.models import (
    Backbone,
    BackboneConfig,
    MpgnnLayerParams,
    PredictionHead,
    backbone_forward,
    mpgnn_layer_forward,
    prepare_batch,
    readout,
    transformer_layer_forward,
)
from gpt_lab.tensor import ContractError, Tape, Tensor, backward, tsum

RNG = np.random.default_rng(100)


def make_graph(n, edges, d=3, rng=RNG, label=(1.0,)):
    return GraphSample(n, rng.normal(size=(n, d)), tuple(edges), np.array(label))


def random_graph(n, p, rng, d=3):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return make_graph(n, edges, d=d, rng=rng)


def permute_graph(g, perm):
    inv = np.argsort(perm)
    return GraphSample(g.n, g.features[inv],
                       tuple((int(perm[i]), int(perm[j])) for i, j in g.edges),
                       g.label)


# ---------------------------------------------------------------------------
# Independent scalar oracle for the transformer layer (plain Python loops)
# ---------------------------------------------------------------------------


def _oracle_ln(row, gain, bias, eps=1e-5):
    d = len(row)
    mu = sum(row) / d
    var = sum((v - mu) ** 2 for v in row) / d
    return [(v - mu) / math.sqrt(var + eps) * g + b
            for v, g, b in zip(row, gain, bias)]


def _oracle_matvec(row, w):
    return [sum(row[a] * w[a][c] for a in range(len(row))) for c in range(len(w[0]))]


def _oracle_gelu(z):
    return 0.5 * z * (1.0 + math.erf(z / math.sqrt(2.0)))


def oracle_transformer_layer(x, mask, p):
    """Naive re-implementation: returns (output, per-head attention rows)."""
    n, d = x.shape
    gain1, bias1 = p.ln1_gain.data.tolist(), p.ln1_bias.data.tolist()
    gain2, bias2 = p.ln2_gain.data.tolist(), p.ln2_bias.data.tolist()
    h = [_oracle_ln(list(x[i]), gain1, bias1) for i in range(n)]
    dq = p.w_q[0].shape[1]
    head_cols = []
    attn_all = []
    for wq, wk, wv in zip(p.w_q, p.w_k, p.w_v):
        q = [_oracle_matvec(h[i], wq.data.tolist()) for i in range(n)]
        k = [_oracle_matvec(h[i], wk.data.tolist()) for i in range(n)]
        v = [_oracle_matvec(h[i], wv.data.tolist()) for i in range(n)]
        attn = []
        for i in range(n):
            scores = [sum(q[i][c] * k[j][c] for c in range(dq)) / math.sqrt(dq)
                      if mask[i][j] else None for j in range(n)]
            top = max(s for s in scores if s is not None)
            exps = [math.exp(s - top) if s is not None else 0.0 for s in scores]
            z = sum(exps)
            attn.append([e / z for e in exps])
        head_cols.append([[sum(attn[i][j] * v[j][c] for j in range(n))
                           for c in range(dq)] for i in range(n)])
        attn_all.append(attn)
    concat = [[c for head in head_cols for c in head[i]] for i in range(n)]
    mixed = [[m + b for m, b in zip(_oracle_matvec(concat[i], p.w_out.data.tolist()),
                                    p.b_out.data.tolist())] for i in range(n)]
    x1 = [[x[i][c] + mixed[i][c] for c in range(d)] for i in range(n)]
    out = []
    for i in range(n):
        h2 = _oracle_ln(x1[i], gain2, bias2)
        ff1 = [_oracle_gelu(z + b) for z, b in
               zip(_oracle_matvec(h2, p.w_ff1.data.tolist()), p.b_ff1.data.tolist())]
        ff2 = [z + b for z, b in
               zip(_oracle_matvec(ff1, p.w_ff2.data.tolist()), p.b_ff2.data.tolist())]
        out.append([x1[i][c] + ff2[c] for c in range(d)])
    return np.array(out), attn_all


def _layer_params(dim, heads, seed=0, ffn_mult=2):
    cfg = BackboneConfig(kind="transformer", feature_dim=dim, dim=dim,
                         heads=heads, layers=1, ffn_mult=ffn_mult)
    return Backbone.init(cfg, seed=seed).layers[0]


class TestTransformerLayer:
    def test_matches_scalar_oracle(self):
        p = _layer_params(dim=6, heads=2, seed=3)
        x = RNG.normal(size=(4, 6))
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 2] = mask[2, 0] = False
        got = transformer_layer_forward(Tensor(x), mask, p).data
        want, _ = oracle_transformer_layer(x, mask, p)
        assert np.abs(got - want).max() <= 1e-10

    def test_single_node_attention_weight_is_one(self):
        p = _layer_params(dim=4, heads=2, seed=1)
        x = RNG.normal(size=(1, 4))
        _, attn = oracle_transformer_layer(x, np.ones((1, 1), dtype=bool), p)
        for head in attn:
            assert head[0][0] == pytest.approx(1.0, abs=0)
        got = transformer_layer_forward(Tensor(x), np.ones((1, 1), dtype=bool), p).data
        want, _ = oracle_transformer_layer(x, np.ones((1, 1), dtype=bool), p)
        assert np.abs(got - want).max() <= 1e-12

    def test_zero_query_key_gives_uniform_attention_over_unmasked(self):
        p = _layer_params(dim=4, heads=2, seed=2)
        for wq, wk in zip(p.w_q, p.w_k):
            wq.data[:] = 0.0
            wk.data[:] = 0.0
        x = RNG.normal(size=(5, 4))
        mask = np.ones((5, 5), dtype=bool)
        mask[:, 4] = False
        mask[4, 4] = True
        _, attn = oracle_transformer_layer(x, mask, p)
        for head in attn:
            for i in range(4):
                alive = [head[i][j] for j in range(5) if mask[i][j]]
                assert np.allclose(alive, 1.0 / len(alive), atol=1e-15)
        got = transformer_layer_forward(Tensor(x), mask, p).data
        want, _ = oracle_transformer_layer(x, mask, p)
        assert np.abs(got - want).max() <= 1e-10


# ---------------------------------------------------------------------------
# MPGNN layer vs a naive double loop
# ---------------------------------------------------------------------------


def oracle_mpgnn_layer(h, neighbors, weight, bias, mode):
    n, d = h.shape
    agg = np.zeros_like(h)
    for i in range(n):
        rows = [h[i]] + [h[j] for j in neighbors[i]]
        if mode == "sum":
            agg[i] = np.sum(rows, axis=0)
        elif mode == "mean":
            agg[i] = np.mean(rows, axis=0)
        else:
            agg[i] = np.max(rows, axis=0)
    lin = agg @ weight + bias
    return np.array([[_oracle_gelu(v) for v in row] for row in lin])


class TestMpgnnLayer:
    @pytest.mark.parametrize("mode", ["sum", "mean", "max"])
    def test_matches_double_loop_oracle(self, mode):
        rng = np.random.default_rng(4)
        h = rng.normal(size=(5, 4))
        neighbors = [[1, 2], [0], [0, 3, 4], [2], [2]]
        params = MpgnnLayerParams(weight=Tensor(rng.normal(size=(4, 4))),
                                  bias=Tensor(rng.normal(size=4)),
                                  aggregation=mode)
        got = mpgnn_layer_forward(Tensor(h), neighbors, params).data
        want = oracle_mpgnn_layer(h, neighbors, params.weight.data,
                                  params.bias.data, mode)
        assert np.abs(got - want).max() <= 1e-12

    def test_isolated_node_sum_is_self_only(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=(3, 4))
        params = MpgnnLayerParams(weight=Tensor(rng.normal(size=(4, 4))),
                                  bias=Tensor(np.zeros(4)), aggregation="sum")
        out = mpgnn_layer_forward(Tensor(h), [[1], [0], []], params).data
        lin = h[2] @ params.weight.data
        want = np.array([_oracle_gelu(v) for v in lin])
        assert np.abs(out[2] - want).max() <= 1e-12

    def test_symmetric_inputs_give_identical_outputs(self):
        h = np.tile(np.array([0.3, -0.7, 1.1]), (3, 1))
        params = MpgnnLayerParams(weight=Tensor(np.eye(3)), bias=Tensor(np.zeros(3)),
                                  aggregation="mean")
        tri = [[1, 2], [0, 2], [0, 1]]
        out = mpgnn_layer_forward(Tensor(h), tri, params).data
        assert np.abs(out - out[0]).max() == 0.0


# ---------------------------------------------------------------------------
# Readout
# ---------------------------------------------------------------------------


class TestReadout:
    def test_single_node_both_modes(self):
        h = Tensor(RNG.normal(size=(1, 4)))
        for mode in ("sum", "mean"):
            assert np.array_equal(readout(h, [True], mode).data, h.data[0])

    def test_mean_of_two_rows(self):
        h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert np.array_equal(readout(h, [True, True], "mean").data, [0.5, 0.5])

    def test_padding_excluded_matches_stripped(self):
        rows = RNG.normal(size=(6, 3))
        mask = np.array([True, True, False, True, False, False])
        got = readout(Tensor(rows), mask, "mean").data
        want = rows[mask].mean(axis=0)
        assert np.abs(got - want).max() <= 1e-15

    def test_exclusion_set(self):
        rows = RNG.normal(size=(4, 2))
        got = readout(Tensor(rows), np.ones(4, bool), "sum",
                      exclude=np.array([True, False, False, False])).data
        assert np.allclose(got, rows[1:].sum(axis=0), atol=1e-15)

    def test_empty_inclusion_rejected(self):
        with pytest.raises(ContractError, match="empty"):
            readout(Tensor(RNG.normal(size=(2, 2))), [False, False], "mean")


# ---------------------------------------------------------------------------
# Whole-backbone properties
# ---------------------------------------------------------------------------


def _build(kind, rng_seed=0, **kw):
    defaults = dict(feature_dim=3, dim=8, heads=2, layers=2, ffn_mult=2,
                    readout="mean", rwpe_steps=3, degree_embed=True, max_degree=4)
    defaults.update(kw)
    cfg = BackboneConfig(kind=kind, **defaults)
    bb = Backbone.init(cfg, seed=rng_seed)
    head = PredictionHead.init(cfg.dim, 1, seed=rng_seed)
    return cfg, bb, head


class TestBackboneForward:
    @pytest.mark.parametrize("kind", ["transformer", "mpgnn"])
    def test_permutation_invariance(self, kind):
        rng = np.random.default_rng(11)
        cfg, bb, head = _build(kind)
        g = random_graph(6, 0.5, rng)
        perm = rng.permutation(6)
        base = backbone_forward(prepare_batch([g], cfg), bb, head).data
        moved = backbone_forward(prepare_batch([permute_graph(g, perm)], cfg),
                                 bb, head).data
        assert np.abs(base - moved).max() <= 1e-9

    @pytest.mark.parametrize("kind", ["transformer", "mpgnn"])
    def test_batched_equals_per_sample(self, kind):
        rng = np.random.default_rng(12)
        cfg, bb, head = _build(kind)
        graphs = [random_graph(int(rng.integers(3, 8)), 0.4, rng) for _ in range(5)]
        batched = backbone_forward(prepare_batch(graphs, cfg), bb, head).data
        for i, g in enumerate(graphs):
            solo = backbone_forward(prepare_batch([g], cfg), bb, head).data
            assert np.abs(batched[i] - solo[0]).max() <= 1e-10

    def test_duplicate_sample_gives_identical_rows(self):
        rng = np.random.default_rng(13)
        cfg, bb, head = _build("transformer")
        g = random_graph(5, 0.5, rng)
        out = backbone_forward(prepare_batch([g, g], cfg), bb, head).data
        assert np.abs(out[0] - out[1]).max() <= 1e-12

    def test_structure_blind_without_encodings(self):
        cfg, bb, head = _build("transformer", rwpe_steps=0, degree_embed=False)
        rng = np.random.default_rng(14)
        feats = rng.normal(size=(5, 3))
        a = GraphSample(5, feats, ((0, 1), (1, 2)), np.array([0.0]))
        b = GraphSample(5, feats, ((0, 4), (2, 3), (3, 4)), np.array([0.0]))
        out_a = backbone_forward(prepare_batch([a], cfg), bb, head).data
        out_b = backbone_forward(prepare_batch([b], cfg), bb, head).data
        assert np.array_equal(out_a, out_b)

    def test_structure_visible_with_encodings(self):
        cfg, bb, head = _build("transformer", rwpe_steps=4)
        rng = np.random.default_rng(15)
        feats = rng.normal(size=(5, 3))
        a = GraphSample(5, feats, ((0, 1), (1, 2)), np.array([0.0]))
        b = GraphSample(5, feats, ((0, 1), (1, 2), (0, 2)), np.array([0.0]))
        out_a = backbone_forward(prepare_batch([a], cfg), bb, head).data
        out_b = backbone_forward(prepare_batch([b], cfg), bb, head).data
        assert np.abs(out_a - out_b).max() > 1e-8

    def test_feature_width_mismatch_rejected(self):
        cfg, bb, head = _build("transformer")
        bad = batch([random_graph(4, 0.5, np.random.default_rng(1))])
        with pytest.raises(Exception, match="width"):
            backbone_forward(bad, bb, head)

    @pytest.mark.parametrize("kind", ["transformer", "mpgnn"])
    def test_no_dead_parameters_under_full_tuning(self, kind):
        """Directional finite-difference sensitivity is nonzero for every tensor."""
        rng = np.random.default_rng(16)
        cfg, bb, head = _build(kind, rng_seed=5)
        graphs = [random_graph(5, 0.6, rng), random_graph(4, 0.6, rng)]
        prepared = prepare_batch(graphs, cfg)
        weights = rng.normal(size=(2, 1))

        def value():
            out = backbone_forward(prepared, bb, head)
            return float((out.data * weights).sum())

        params = {**bb.named_params(), **head.named_params()}
        h = 1e-4
        for name, t in params.items():
            direction = np.random.default_rng(abs(hash(name)) % 2**32).normal(size=t.shape)
            t.data += h * direction
            up = value()
            t.data -= 2 * h * direction
            down = value()
            t.data += h * direction
            assert abs(up - down) / (2 * h) > 1e-10, f"parameter {name} is dead"

    @pytest.mark.parametrize("kind", ["transformer", "mpgnn"])
    def test_gradients_cover_all_params_under_full_tuning(self, kind):
        rng = np.random.default_rng(17)
        cfg, bb, head = _build(kind, rng_seed=6)
        prepared = prepare_batch([random_graph(5, 0.6, rng)], cfg)
        params = {**bb.named_params(), **head.named_params()}
        with Tape():
            grads = backward(tsum(backbone_forward(prepared, bb, head)))
        for name, t in params.items():
            assert t in grads, f"no gradient for {name}"


class TestStateRoundTrip:
    def test_state_arrays_round_trip(self):
        cfg, bb, _ = _build("transformer")
        state = bb.state_arrays()
        other = Backbone.init(cfg, seed=99)
        other.load_state(state)
        for name, t in other.named_params().items():
            assert np.array_equal(t.data, state[name])

    def test_load_rejects_name_mismatch(self):
        cfg, bb, _ = _build("transformer")
        state = bb.state_arrays()
        state.pop("input_proj.bias")
        with pytest.raises(ContractError, match="mismatch"):
            bb.load_state(state)
