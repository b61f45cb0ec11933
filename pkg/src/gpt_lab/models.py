"""Freezable backbones: a graph transformer, an MPGNN, readout and head.

Batched execution flattens every sample's real nodes into one tall
matrix and restricts attention / message passing to block-diagonal,
within-sample index sets. Padding never enters the computation, so a
batched forward agrees with per-sample forwards.

Prompt hooks (graph token addition, prefix slots, virtual token nodes)
are applied here when a prompt context is supplied; with no context the
executed operation sequence is identical to a prompt-free build.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gpt_lab.graphs import BatchedGraph, GraphSample, with_rwpe
from gpt_lab.graphs import batch as batch_graphs
from gpt_lab.seeding import rng_for
from gpt_lab.tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    add_rows_masked,
    concat_cols,
    concat_rows,
    embedding,
    gelu,
    layer_norm,
    masked_pool_rows,
    matmul,
    neighbor_max,
    overwrite_rows,
    scale,
    slice_rows,
    softmax_masked,
    transpose,
)

__all__ = [
    "BackboneConfig",
    "TransformerLayerParams",
    "MpgnnLayerParams",
    "Backbone",
    "PredictionHead",
    "transformer_layer_forward",
    "mpgnn_layer_forward",
    "readout",
    "encode_nodes",
    "backbone_forward",
    "prepare_batch",
    "RowLayout",
    "LN_EPS",
]

LN_EPS = 1e-5

_KINDS = ("transformer", "mpgnn")
_READOUTS = ("sum", "mean")
_AGGREGATIONS = ("sum", "mean", "max")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    feature_dim: int
    dim: int
    heads: int = 4
    layers: int = 6
    ffn_mult: int = 4
    readout: str = "mean"
    rwpe_steps: int = 0
    degree_embed: bool = False
    max_degree: int = 8
    aggregation: str = "sum"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractError(f"unknown backbone kind {self.kind!r}")
        if self.readout not in _READOUTS:
            raise ContractError(f"unknown readout {self.readout!r}")
        if self.aggregation not in _AGGREGATIONS:
            raise ContractError(f"unknown aggregation {self.aggregation!r}")
        if self.layers < 1:
            raise ContractError("need at least one layer")
        if self.kind == "transformer" and self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.feature_dim < 1 or self.dim < 1:
            raise ContractError("feature_dim and dim must be positive")

    @property
    def input_width(self) -> int:
        return self.feature_dim + self.rwpe_steps

    @property
    def head_width(self) -> int:
        return self.dim // self.heads


@dataclass
class TransformerLayerParams:
    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_out: Tensor
    b_out: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class MpgnnLayerParams:
    weight: Tensor
    bias: Tensor
    aggregation: str


def _init_matrix(rng, rows, cols) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols)),
                  requires_grad=True)


def _zeros(n) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


class Backbone:
    """Input projection, optional degree table and a stack of layers."""

    def __init__(self, cfg: BackboneConfig, w_in: Tensor, b_in: Tensor,
                 degree_table: Tensor | None, layers: list):
        self.cfg = cfg
        self.w_in = w_in
        self.b_in = b_in
        self.degree_table = degree_table
        self.layers = layers

    @classmethod
    def init(cls, cfg: BackboneConfig, seed: int) -> "Backbone":
        rng = rng_for(seed, "init-backbone")
        w_in = _init_matrix(rng, cfg.input_width, cfg.dim)
        b_in = _zeros(cfg.dim)
        table = None
        if cfg.degree_embed:
            table = Tensor(rng.normal(0.0, 0.02, size=(cfg.max_degree + 1, cfg.dim)),
                           requires_grad=True)
        layers = []
        for _ in range(cfg.layers):
            if cfg.kind == "transformer":
                dq = cfg.head_width
                layers.append(TransformerLayerParams(
                    w_q=[_init_matrix(rng, cfg.dim, dq) for _ in range(cfg.heads)],
                    w_k=[_init_matrix(rng, cfg.dim, dq) for _ in range(cfg.heads)],
                    w_v=[_init_matrix(rng, cfg.dim, dq) for _ in range(cfg.heads)],
                    w_out=_init_matrix(rng, cfg.dim, cfg.dim),
                    b_out=_zeros(cfg.dim),
                    w_ff1=_init_matrix(rng, cfg.dim, cfg.ffn_mult * cfg.dim),
                    b_ff1=_zeros(cfg.ffn_mult * cfg.dim),
                    w_ff2=_init_matrix(rng, cfg.ffn_mult * cfg.dim, cfg.dim),
                    b_ff2=_zeros(cfg.dim),
                    ln1_gain=_ones(cfg.dim), ln1_bias=_zeros(cfg.dim),
                    ln2_gain=_ones(cfg.dim), ln2_bias=_zeros(cfg.dim),
                ))
            else:
                layers.append(MpgnnLayerParams(
                    weight=_init_matrix(rng, cfg.dim, cfg.dim),
                    bias=_zeros(cfg.dim),
                    aggregation=cfg.aggregation,
                ))
        return cls(cfg, w_in, b_in, table, layers)

    def named_params(self) -> dict[str, Tensor]:
        out = {"input_proj.weight": self.w_in, "input_proj.bias": self.b_in}
        if self.degree_table is not None:
            out["degree_table"] = self.degree_table
        for i, layer in enumerate(self.layers):
            if isinstance(layer, TransformerLayerParams):
                for h in range(len(layer.w_q)):
                    out[f"layer{i}.wq{h}"] = layer.w_q[h]
                    out[f"layer{i}.wk{h}"] = layer.w_k[h]
                    out[f"layer{i}.wv{h}"] = layer.w_v[h]
                out[f"layer{i}.out.weight"] = layer.w_out
                out[f"layer{i}.out.bias"] = layer.b_out
                out[f"layer{i}.ffn1.weight"] = layer.w_ff1
                out[f"layer{i}.ffn1.bias"] = layer.b_ff1
                out[f"layer{i}.ffn2.weight"] = layer.w_ff2
                out[f"layer{i}.ffn2.bias"] = layer.b_ff2
                out[f"layer{i}.norm1.gain"] = layer.ln1_gain
                out[f"layer{i}.norm1.bias"] = layer.ln1_bias
                out[f"layer{i}.norm2.gain"] = layer.ln2_gain
                out[f"layer{i}.norm2.bias"] = layer.ln2_bias
            else:
                out[f"layer{i}.weight"] = layer.weight
                out[f"layer{i}.bias"] = layer.bias
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        if set(arrays) != set(params):
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            raise ContractError(f"parameter name mismatch: missing={sorted(missing)}, "
                                f"unexpected={sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


class PredictionHead:
    """Linear map from graph embedding to task outputs, optionally one hidden layer."""

    def __init__(self, w: Tensor, b: Tensor,
                 w_hidden: Tensor | None = None, b_hidden: Tensor | None = None):
        self.w = w
        self.b = b
        self.w_hidden = w_hidden
        self.b_hidden = b_hidden

    @classmethod
    def init(cls, dim: int, out_dim: int, seed: int, hidden: bool = False) -> "PredictionHead":
        rng = rng_for(seed, "init-head")
        w_hidden = b_hidden = None
        if hidden:
            w_hidden = _init_matrix(rng, dim, dim)
            b_hidden = _zeros(dim)
        return cls(_init_matrix(rng, dim, out_dim), _zeros(out_dim), w_hidden, b_hidden)

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        if self.w_hidden is not None:
            out["head.hidden.weight"] = self.w_hidden
            out["head.hidden.bias"] = self.b_hidden
        out["head.weight"] = self.w
        out["head.bias"] = self.b
        return out

    def forward(self, hg: Tensor) -> Tensor:
        if self.w_hidden is not None:
            hg = gelu(add(matmul(hg, self.w_hidden), self.b_hidden))
        return add(matmul(hg, self.w), self.b)


# ---------------------------------------------------------------------------
# Layer forwards
# ---------------------------------------------------------------------------


def transformer_layer_forward(x: Tensor, attn_mask: np.ndarray,
                              params: TransformerLayerParams) -> Tensor:
    """Pre-norm block: multi-head masked attention, then the FFN, with residuals."""
    h = layer_norm(x, params.ln1_gain, params.ln1_bias, LN_EPS)
    dq = params.w_q[0].shape[1]
    inv_sqrt = 1.0 / math.sqrt(dq)
    heads = []
    for wq, wk, wv in zip(params.w_q, params.w_k, params.w_v):
        q, k, v = matmul(h, wq), matmul(h, wk), matmul(h, wv)
        attn = softmax_masked(scale(matmul(q, transpose(k)), inv_sqrt), attn_mask)
        heads.append(matmul(attn, v))
    mixed = add(matmul(concat_cols(heads), params.w_out), params.b_out)
    x1 = add(x, mixed)
    h2 = layer_norm(x1, params.ln2_gain, params.ln2_bias, LN_EPS)
    ff = add(matmul(gelu(add(matmul(h2, params.w_ff1), params.b_ff1)), params.w_ff2),
             params.b_ff2)
    return add(x1, ff)


def mpgnn_layer_forward(h: Tensor, neighbors: Sequence[Sequence[int]],
                        params: MpgnnLayerParams) -> Tensor:
    """Aggregate each node with its neighborhood, then linear + GELU."""
    n = h.shape[0]
    if len(neighbors) != n:
        raise ShapeError(f"adjacency covers {len(neighbors)} nodes, embeddings have {n}")
    if params.aggregation == "max":
        agg = neighbor_max(h, [[i, *nb] for i, nb in enumerate(neighbors)])
    else:
        m = np.zeros((n, n))
        for i, nb in enumerate(neighbors):
            m[i, i] = 1.0
            for j in nb:
                m[i, j] = 1.0
        if params.aggregation == "mean":
            m /= m.sum(axis=1, keepdims=True)
        agg = matmul(Tensor(m), h)
    return gelu(add(matmul(agg, params.weight), params.bias))


def readout(h: Tensor, node_mask, mode: str, exclude=None) -> Tensor:
    """Permutation-invariant pooling over real, non-excluded positions."""
    m = np.asarray(node_mask, dtype=bool).copy()
    if exclude is not None:
        m &= ~np.asarray(exclude, dtype=bool)
    return masked_pool_rows(h, m, mode)


# ---------------------------------------------------------------------------
# Batched forward with prompt hooks
# ---------------------------------------------------------------------------


@dataclass
class RowLayout:
    """Row bookkeeping for the flattened batch as prompt rows are added."""

    blocks: list[tuple[int, int]]        # current row range per sample
    nodes: list[tuple[int, int]]         # original-node row range per sample
    prefix_starts: list[int] = field(default_factory=list)

    @property
    def total_rows(self) -> int:
        return self.blocks[-1][1] if self.blocks else 0

    def node_rows(self, sample: int) -> range:
        s, e = self.nodes[sample]
        return range(s, e)


def _block_attention_mask(layout: RowLayout) -> np.ndarray:
    r = layout.total_rows
    mask = np.zeros((r, r), dtype=bool)
    for s, e in layout.blocks:
        mask[s:e, s:e] = True
    return mask


def _prepend_slots(h: Tensor, layout: RowLayout, p_len: int) -> tuple[Tensor, RowLayout]:
    """Insert p_len leading slot rows per sample (filled by overwrite later)."""
    filler = Tensor(np.zeros((p_len, h.shape[1])))
    parts, blocks, nodes, starts = [], [], [], []
    offset = 0
    for (bs, be), (ns, ne) in zip(layout.blocks, layout.nodes):
        parts.append(filler)
        parts.append(slice_rows(h, bs, be))
        width = be - bs
        starts.append(offset)
        blocks.append((offset, offset + p_len + width))
        nodes.append((offset + p_len + (ns - bs), offset + p_len + (ne - bs)))
        offset += p_len + width
    new_layout = RowLayout(blocks, nodes, starts)
    return concat_rows(parts), new_layout


def _append_token_rows(h: Tensor, layout: RowLayout, tokens: Tensor) -> tuple[Tensor, RowLayout]:
    """Append the token rows at the end of each sample block."""
    p_len = tokens.shape[0]
    parts, blocks, nodes, starts = [], [], [], []
    offset = 0
    for (bs, be), (ns, ne) in zip(layout.blocks, layout.nodes):
        parts.append(slice_rows(h, bs, be))
        parts.append(tokens)
        width = be - bs
        blocks.append((offset, offset + width + p_len))
        nodes.append((offset + (ns - bs), offset + (ne - bs)))
        starts.append(offset + width)
        offset += width + p_len
    new_layout = RowLayout(blocks, nodes, starts)
    return concat_rows(parts), new_layout


def _flat_features(batch: BatchedGraph) -> tuple[np.ndarray, np.ndarray, RowLayout]:
    sizes = batch.sample_sizes()
    feats = batch.features.data
    blocks, degs = [], []
    ranges = []
    offset = 0
    for b, n in enumerate(sizes):
        blocks.append(feats[b, :n])
        degs.append(batch.degrees[b, :n])
        ranges.append((offset, offset + n))
        offset += n
    layout = RowLayout(ranges, list(ranges))
    return np.concatenate(blocks, axis=0), np.concatenate(degs), layout


def _mpgnn_groups(batch: BatchedGraph, layout: RowLayout,
                  token_ranges: list[tuple[int, int]] | None) -> list[list[int]]:
    """Flat neighbor lists (self excluded); tokens link to all original nodes."""
    total = layout.total_rows
    groups: list[list[int]] = [[] for _ in range(total)]
    for b, adj in enumerate(batch.adjacency):
        ns, _ = layout.nodes[b]
        for local, nb in enumerate(adj):
            groups[ns + local] = [ns + j for j in nb]
    if token_ranges is not None:
        for b, (ts, te) in enumerate(token_ranges):
            ns, ne = layout.nodes[b]
            original = list(range(ns, ne))
            for row in range(ts, te):
                groups[row] = list(original)
            for node in original:
                groups[node].extend(range(ts, te))
    return groups


def prepare_batch(graphs: Sequence[GraphSample], cfg: BackboneConfig) -> BatchedGraph:
    """Batch samples with the encodings this backbone expects concatenated."""
    if cfg.rwpe_steps > 0:
        graphs = with_rwpe(graphs, cfg.rwpe_steps)
    return batch_graphs(graphs)


def encode_nodes(batch: BatchedGraph, backbone: Backbone,
                 prompt_ctx=None) -> tuple[Tensor, RowLayout]:
    """Final-layer embeddings for the flattened batch, plus row bookkeeping.

    The layout's ``nodes`` ranges locate each sample's original-node rows;
    prompt slot / token rows, when present, sit outside those ranges.
    """
    cfg = backbone.cfg
    flat, flat_deg, layout = _flat_features(batch)
    if flat.shape[1] != cfg.input_width:
        raise ShapeError(f"batch feature width {flat.shape[1]} does not match "
                         f"input projection width {cfg.input_width}")
    x = Tensor(flat)

    token = getattr(prompt_ctx, "graph_token", None) if prompt_ctx is not None else None
    stage = getattr(prompt_ctx, "token_stage", "post_projection") if prompt_ctx is not None else None
    prefixes = dict(getattr(prompt_ctx, "prefixes", {}) or {}) if prompt_ctx is not None else {}
    virtual = getattr(prompt_ctx, "virtual_tokens", None) if prompt_ctx is not None else None

    if token is not None and stage == "pre_projection":
        x = add_rows_masked(x, token, None)
    h = add(matmul(x, backbone.w_in), backbone.b_in)
    if backbone.degree_table is not None:
        ids = np.minimum(flat_deg, cfg.max_degree)
        h = add(h, embedding(backbone.degree_table, ids))
    if token is not None and stage == "post_projection":
        h = add_rows_masked(h, token, None)

    token_ranges = None
    if virtual is not None and virtual.shape[0] > 0:
        if prefixes:
            raise ContractError("virtual token nodes and prefix slots are exclusive")
        h, layout = _append_token_rows(h, layout, virtual)
        token_ranges = [(s, s + virtual.shape[0]) for s in layout.prefix_starts]

    if cfg.kind == "transformer":
        prompted = sorted(prefixes)
        first = prompted[0] if prompted else None
        mask = _block_attention_mask(layout)
        for li in range(cfg.layers):
            if first is not None and li == first:
                p_len = prefixes[first].shape[0]
                h, layout = _prepend_slots(h, layout, p_len)
                mask = _block_attention_mask(layout)
            if li in prefixes:
                h = overwrite_rows(h, prefixes[li], layout.prefix_starts)
            h = transformer_layer_forward(h, mask, backbone.layers[li])
    else:
        if prefixes:
            raise ContractError("prefix tokens require the transformer backbone")
        groups = _mpgnn_groups(batch, layout, token_ranges)
        for li in range(cfg.layers):
            h = mpgnn_layer_forward(h, groups, backbone.layers[li])
    return h, layout


def backbone_forward(batch: BatchedGraph, backbone: Backbone,
                     head: PredictionHead | None = None,
                     prompt_ctx=None) -> Tensor:
    """Per-sample predictions (B x t), or graph embeddings when head is None.

    Readout always pools over original-node rows only, so prompt rows never
    change which positions are averaged.
    """
    h, layout = encode_nodes(batch, backbone, prompt_ctx)
    pooled = []
    total = layout.total_rows
    for ns, ne in layout.nodes:
        m = np.zeros(total, dtype=bool)
        m[ns:ne] = True
        pooled.append(masked_pool_rows(h, m, backbone.cfg.readout))
    hg = concat_rows(pooled)
    return head.forward(hg) if head is not None else hg
