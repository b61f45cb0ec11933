"""Task-specific prompt parameters and the freeze/trainable partition.

A prompt set bundles the graph token (one vector added to every node),
per-layer prefix matrices that overwrite the leading slot rows of
prompted transformer layers, and, for the MPGNN analogue, virtual token
nodes wired to every original node. The freeze registry splits all named
parameters into a frozen backbone part and the trainable prompt + head
part; frozen tensors never enter a gradient map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from gpt_lab.graphs import GraphSample
from gpt_lab.seeding import rng_for
from gpt_lab.tensor import ContractError, ShapeError, Tensor, add_rows_masked, overwrite_rows

__all__ = [
    "MODES",
    "TOKEN_STAGES",
    "PromptSet",
    "FreezeRegistry",
    "VirtualNodeGraph",
    "init_prompts",
    "build_registry",
    "apply_graph_prompt",
    "inject_prefix",
    "deepgpt_transform",
    "virtual_prompt_nodes",
    "count_params",
]

MODES = ("ft", "lightweight", "prefix_only", "deepgpt", "virtual_node")
TOKEN_STAGES = ("post_projection", "pre_projection")


@dataclass
class PromptSet:
    """The trainable prompt parameters for one task."""

    graph_token: Tensor | None = None
    prefixes: dict[int, Tensor] = field(default_factory=dict)
    p_len: int = 0
    token_stage: str = "post_projection"
    virtual_tokens: Tensor | None = None

    def __post_init__(self):
        if self.token_stage not in TOKEN_STAGES:
            raise ContractError(f"unknown token stage {self.token_stage!r}")
        widths = set()
        for layer, p in self.prefixes.items():
            if p.ndim != 2:
                raise ShapeError(f"prefix for layer {layer} must be a matrix")
            if p.shape[0] != self.p_len:
                raise ShapeError(f"prefix for layer {layer} has {p.shape[0]} rows, "
                                 f"expected p_len={self.p_len}")
            widths.add(p.shape[1])
        if len(widths) > 1:
            raise ShapeError(f"prefix widths disagree: {sorted(widths)}")
        if self.virtual_tokens is not None and self.prefixes:
            raise ContractError("virtual tokens and prefixes are exclusive")
        for t in self._tensors():
            if not t.requires_grad:
                raise ContractError("prompt parameters must require gradients")

    @property
    def prompted_layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.prefixes))

    def _tensors(self) -> list[Tensor]:
        out = [p for _, p in sorted(self.prefixes.items())]
        if self.graph_token is not None:
            out.append(self.graph_token)
        if self.virtual_tokens is not None:
            out.append(self.virtual_tokens)
        return out

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        if self.graph_token is not None:
            out["prompt.token"] = self.graph_token
        for layer in self.prompted_layers:
            out[f"prompt.prefix{layer}"] = self.prefixes[layer]
        if self.virtual_tokens is not None:
            out["prompt.virtual"] = self.virtual_tokens
        return out

    def is_empty(self) -> bool:
        return not self.named_params()


def _interval(prompted_layers, n_layers: int) -> tuple[int, ...]:
    if prompted_layers is None:
        lo, hi = 0, n_layers - 1
    else:
        lo, hi = prompted_layers
    if not (0 <= lo <= hi < n_layers):
        raise ContractError(f"prompted interval [{lo}, {hi}] invalid for "
                            f"{n_layers} layers")
    return tuple(range(lo, hi + 1))


def init_prompts(mode: str, dim: int, n_layers: int, p_len: int, seed: int,
                 prompted_layers: tuple[int, int] | None = None,
                 token_stage: str = "post_projection",
                 token_width: int | None = None) -> PromptSet:
    """Fresh prompt parameters for a tuning mode.

    ``prompted_layers`` is an inclusive (first, last) layer interval and
    defaults to all layers. ``token_width`` only matters for the
    pre-projection token stage, where the token lives at input width.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ContractError(f"unknown tuning mode {mode!r}")
    rng = rng_for(seed, "init-prompts")
    if mode in ("ft", "lightweight"):
        return PromptSet()
    if mode == "virtual_node":
        if p_len < 1:
            raise ContractError("virtual_node mode needs p_len >= 1")
        tokens = Tensor(rng.normal(0.0, 0.02, size=(p_len, dim)), requires_grad=True)
        return PromptSet(virtual_tokens=tokens, p_len=p_len)
    if p_len < 1:
        raise ContractError(f"{mode} mode needs p_len >= 1")
    layers = _interval(prompted_layers, n_layers)
    prefixes = {li: Tensor(rng.normal(0.0, 0.02, size=(p_len, dim)), requires_grad=True)
                for li in layers}
    token = None
    if mode == "deepgpt":
        width = dim if token_stage == "post_projection" else int(token_width)
        token = Tensor(rng.normal(0.0, 0.02, size=width), requires_grad=True)
    return PromptSet(graph_token=token, prefixes=prefixes, p_len=p_len,
                     token_stage=token_stage)


@dataclass(frozen=True)
class FreezeRegistry:
    """Total, disjoint split of every named parameter into frozen/trainable."""

    frozen: dict[str, Tensor]
    trainable: dict[str, Tensor]

    def __post_init__(self):
        overlap = set(self.frozen) & set(self.trainable)
        if overlap:
            raise ContractError(f"parameters both frozen and trainable: {sorted(overlap)}")

    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.frozen)
        out.update(self.trainable)
        return out


def build_registry(backbone, head, prompts: PromptSet, mode: str) -> FreezeRegistry:
    """Partition backbone, head and prompt parameters for a tuning mode.

    Also sets ``requires_grad`` flags so frozen parameters can never show
    up in a gradient map. The prediction head is trainable in every mode.
    """
    mode = mode.lower()
    if mode not in MODES:
        raise ContractError(f"unknown tuning mode {mode!r}")
    backbone_params = backbone.named_params()
    head_params = head.named_params()
    prompt_params = prompts.named_params()
    if mode == "ft" and prompt_params:
        raise ContractError("full fine-tuning does not use prompt parameters")
    if mode in ("prefix_only", "deepgpt") and not prompts.prefixes:
        raise ContractError(f"{mode} mode needs prefix parameters")
    if mode == "prefix_only" and prompts.graph_token is not None:
        raise ContractError("prefix_only mode must not carry a graph token")
    if mode == "virtual_node" and prompts.virtual_tokens is None:
        raise ContractError("virtual_node mode needs virtual tokens")

    trainable = dict(head_params)
    trainable.update(prompt_params)
    if mode == "ft":
        trainable.update(backbone_params)
        frozen = {}
    else:
        frozen = dict(backbone_params)
    for t in frozen.values():
        t.requires_grad = False
    for t in trainable.values():
        t.requires_grad = True
    return FreezeRegistry(frozen=frozen, trainable=trainable)


def count_params(registry: FreezeRegistry) -> dict[str, float]:
    """Exact frozen/trainable entry counts and the trainable fraction."""
    frozen = sum(t.data.size for t in registry.frozen.values())
    trainable = sum(t.data.size for t in registry.trainable.values())
    total = frozen + trainable
    return {
        "frozen_count": int(frozen),
        "trainable_count": int(trainable),
        "ratio": trainable / total if total else 0.0,
    }


# ---------------------------------------------------------------------------
# Prompt application
# ---------------------------------------------------------------------------


def apply_graph_prompt(x: Tensor, token: Tensor, node_mask=None) -> Tensor:
    """Add the graph token to every real node row; padding rows untouched."""
    return add_rows_masked(x, token, node_mask)


def inject_prefix(e: Tensor, prefix: Tensor, layer: int, prompts: PromptSet,
                  starts=(0,)) -> Tensor:
    """Overwrite the slot rows of ``e`` with this layer's prefix matrix.

    Replacement semantics: the previous slot values are discarded, and
    gradient reaches earlier prefixes only through attention into the
    real-node rows. ``starts`` gives the slot offset of each sample block
    (a single sequence keeps the default leading block).
    """
    if layer not in prompts.prefixes:
        raise ContractError(f"layer {layer} is not in the prompted set "
                            f"{prompts.prompted_layers}")
    return overwrite_rows(e, prefix, starts)


def deepgpt_transform(batch, prompts: PromptSet, backbone=None) -> PromptSet:
    """Validate prompts against the batch/backbone and return the forward context.

    The returned context is consumed by ``backbone_forward``: graph token
    after the input projection, one sequence extension, prefix overwrites
    at each prompted layer, and readout restricted to original nodes.
    """
    if backbone is not None:
        cfg = backbone.cfg
        for layer, p in prompts.prefixes.items():
            if layer >= cfg.layers:
                raise ContractError(f"prompted layer {layer} out of range for "
                                    f"{cfg.layers}-layer backbone")
            if p.shape[1] != cfg.dim:
                raise ShapeError(f"prefix width {p.shape[1]} != model width {cfg.dim}")
        if prompts.graph_token is not None:
            want = cfg.dim if prompts.token_stage == "post_projection" else cfg.input_width
            if prompts.graph_token.shape[0] != want:
                raise ShapeError(f"graph token width {prompts.graph_token.shape[0]} "
                                 f"!= expected {want}")
        if prompts.virtual_tokens is not None and prompts.virtual_tokens.shape[1] != cfg.dim:
            raise ShapeError("virtual token width does not match model width")
    return prompts


@dataclass(frozen=True)
class VirtualNodeGraph:
    """A graph augmented with token nodes connected to every original node.

    Token embeddings bypass the input projection (they live at model
    width), so the structure and the values are kept separate here.
    """

    base: GraphSample
    tokens: Tensor

    @property
    def p_len(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_total(self) -> int:
        return self.base.n + self.p_len

    @property
    def token_positions(self) -> range:
        return range(self.base.n, self.n_total)

    def edges(self) -> tuple[tuple[int, int], ...]:
        extra = [(i, self.base.n + t)
                 for t in range(self.p_len) for i in range(self.base.n)]
        return self.base.edges + tuple(extra)


def virtual_prompt_nodes(g: GraphSample, tokens: Tensor) -> VirtualNodeGraph:
    """Augment a graph with trainable token nodes wired to all original nodes."""
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (p_len, d), got shape {tokens.shape}")
    return VirtualNodeGraph(base=g, tokens=tokens)
