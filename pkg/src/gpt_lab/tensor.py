"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every operation computes eagerly on numpy arrays. When a ``Tape`` is
active and an operand participates in gradients, the operation records a
node holding per-input backward closures; ``backward`` replays the node
list once, in reverse, and returns a gradient map keyed by the leaf
tensors that require gradients.

Shapes are kept deliberately rigid: scalars, vectors and matrices only,
and the single allowed broadcast is a row vector over the rows of a
matrix. Everything else is a shape error.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateRowError",
    "ContractError",
    "MASK_FILL",
    "backward",
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "gelu",
    "tsum",
    "softmax_masked",
    "layer_norm",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "masked_pool_rows",
    "add_rows_masked",
    "overwrite_rows",
    "embedding",
    "neighbor_max",
    "bce_with_logits",
]

MASK_FILL = -1e30  # additive pre-exponentiation mask value

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateRowError(ValueError):
    """A masked softmax row has no unmasked entries."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class Tensor:
    """A dense float64 array, optionally tracked on the active tape.

    ``tape_id`` is the slot handle on the tape the tensor was last
    recorded on; it is only meaningful while that tape is the active one
    (tapes are rebuilt per forward pass).
    """

    __slots__ = ("data", "requires_grad", "tape_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def copy_data(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the module-level primitives.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


_GradFn = Callable[[np.ndarray], np.ndarray]


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in execution order, so each node's inputs precede
    it and a single reverse sweep visits every node exactly once.
    """

    def __init__(self):
        self.nodes: list[tuple[int, list[tuple[int, _GradFn]]]] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_slot = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def _slot_for(self, t: Tensor) -> int | None:
        """Slot of ``t`` on this tape, registering grad leaves on first use."""
        if t._tape is self and t.tape_id is not None:
            return t.tape_id
        if t.requires_grad:
            slot = self._next_slot
            self._next_slot += 1
            t._tape = self
            t.tape_id = slot
            self._leaves[slot] = t
            return slot
        return None

    def _emit(self, out: Tensor, deps: list[tuple[int, _GradFn]]) -> None:
        slot = self._next_slot
        self._next_slot += 1
        out._tape = self
        out.tape_id = slot
        self.nodes.append((slot, deps))


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, pairs: Iterable[tuple[Tensor, _GradFn]]) -> Tensor:
    """Record ``out`` on the active tape when any input is tracked."""
    tape = _active_tape()
    if tape is None:
        return out
    deps = []
    for t, fn in pairs:
        slot = tape._slot_for(t)
        if slot is not None:
            deps.append((slot, fn))
    if deps:
        tape._emit(out, deps)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar loss for every grad-leaf it touches.

    Returns a map from leaf Tensor to its gradient array. Tensors with
    ``requires_grad=False`` never appear. Calling this twice on the same
    loss yields identical maps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.tape_id is None:
        raise ContractError("loss is not recorded on the active tape")
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for out_slot, deps in reversed(tape.nodes):
        g = grads.pop(out_slot, None)
        if g is None:
            continue
        for slot, fn in deps:
            contrib = fn(g)
            prev = grads.get(slot)
            grads[slot] = contrib if prev is None else prev + contrib
    return {leaf: grads[slot] for slot, leaf in tape._leaves.items() if slot in grads}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_mask(mask, shape: tuple[int, ...], what: str) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if m.shape != shape:
        raise ShapeError(f"{what}: mask shape {m.shape} does not match data shape {shape}")
    return m


# ---------------------------------------------------------------------------
# Recorded primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, [(a, lambda g: g.T.copy())])


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "rowvec"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only row-vector-over-rows broadcast is supported)")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over rows of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b, "add")
    out = Tensor(a.data + b.data)
    if kind == "same":
        return _record(out, [(a, lambda g: g), (b, lambda g: g)])
    return _record(out, [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a row vector broadcast over rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    if kind == "same":
        return _record(out, [(a, lambda g: g * bd), (b, lambda g: g * ad)])
    return _record(out, [(a, lambda g: g * bd), (b, lambda g: (g * ad).sum(axis=0))])


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, [(a, lambda g: g * c)])


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-form) GELU."""
    a = _as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad / _SQRT2))
    out = Tensor(ad * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT_2PI
        return g * (cdf + ad * pdf)

    return _record(out, [(a, bwd)])


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = _as_tensor(a)
    ad = a.data
    out = Tensor(np.sum(ad))
    return _record(out, [(a, lambda g: g * np.ones_like(ad))])


def softmax_masked(scores: Tensor, mask=None) -> Tensor:
    """Row softmax with masked entries pinned to exactly zero.

    Masking adds ``MASK_FILL`` before exponentiation and zeroes the masked
    outputs afterwards; rows are stabilized by max subtraction. A row with
    no unmasked entry is rejected.
    """
    scores = _as_tensor(scores)
    if scores.ndim != 2:
        raise ShapeError(f"softmax_masked needs a matrix, got shape {scores.shape}")
    if mask is None:
        m = np.ones(scores.shape, dtype=bool)
    else:
        m = _as_mask(mask, scores.shape, "softmax_masked")
    alive = m.any(axis=1)
    if not alive.all():
        row = int(np.argmin(alive))
        raise DegenerateRowError(f"softmax_masked: row {row} is fully masked")
    shifted = scores.data + np.where(m, 0.0, MASK_FILL)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e[~m] = 0.0
    probs = e / e.sum(axis=1, keepdims=True)
    out = Tensor(probs)

    def bwd(g):
        dot = (g * probs).sum(axis=1, keepdims=True)
        return probs * (g - dot)

    return _record(out, [(scores, bwd)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine map."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
                         f"do not match width {d}")
    if not eps > 0:
        raise ContractError("layer_norm requires eps > 0")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def bwd_x(g):
        dxhat = g * gd
        return inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))

    return _record(out, [
        (x, bwd_x),
        (gain, lambda g: (g * xhat).sum(axis=0)),
        (bias, lambda g: g.sum(axis=0)),
    ])


def _row_block(t: Tensor) -> np.ndarray:
    if t.ndim == 1:
        return t.data[None, :]
    if t.ndim == 2:
        return t.data
    raise ShapeError(f"concat_rows parts must be vectors or matrices, got shape {t.shape}")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack parts along the row axis; 1-D parts become single rows."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    blocks = [_row_block(p) for p in parts]
    width = blocks[0].shape[1]
    for p, b in zip(parts, blocks):
        if b.shape[1] != width:
            raise ShapeError(f"concat_rows: width mismatch {b.shape[1]} vs {width}")
    out = Tensor(np.concatenate(blocks, axis=0))
    deps = []
    offset = 0
    for p, b in zip(parts, blocks):
        start, stop = offset, offset + b.shape[0]
        if p.ndim == 1:
            deps.append((p, lambda g, s=start: g[s].copy()))
        else:
            deps.append((p, lambda g, s=start, e=stop: g[s:e].copy()))
        offset = stop
    return _record(out, deps)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack matrices along the column axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols: expected {rows}-row matrices, got shape {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    deps = []
    offset = 0
    for p in parts:
        start, stop = offset, offset + p.shape[1]
        deps.append((p, lambda g, s=start, e=stop: g[:, s:e].copy()))
        offset = stop
    return _record(out, deps)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_rows needs a matrix, got shape {a.shape}")
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: range [{start}, {stop}) out of bounds for {n} rows")
    out = Tensor(a.data[start:stop].copy())
    ad = a.data

    def bwd(g):
        z = np.zeros_like(ad)
        z[start:stop] = g
        return z

    return _record(out, [(a, bwd)])


def masked_pool_rows(x: Tensor, row_mask, mode: str) -> Tensor:
    """Sum or mean over the selected rows, returning a width-d vector."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"masked_pool_rows needs a matrix, got shape {x.shape}")
    if mode not in ("sum", "mean"):
        raise ContractError(f"unknown pooling mode {mode!r}")
    m = _as_mask(row_mask, (x.shape[0],), "masked_pool_rows")
    count = int(m.sum())
    if count == 0:
        raise ContractError("masked_pool_rows: empty inclusion set")
    pooled = x.data[m].sum(axis=0)
    if mode == "mean":
        pooled = pooled / count
    out = Tensor(pooled)
    xd = x.data
    w = 1.0 if mode == "sum" else 1.0 / count

    def bwd(g):
        z = np.zeros_like(xd)
        z[m] = g * w
        return z

    return _record(out, [(x, bwd)])


def add_rows_masked(x: Tensor, v: Tensor, row_mask=None) -> Tensor:
    """Add vector ``v`` to each selected row of ``x``; other rows untouched."""
    x, v = _as_tensor(x), _as_tensor(v)
    if x.ndim != 2 or v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeError(f"add_rows_masked: shapes {x.shape} and {v.shape} are incompatible")
    if row_mask is None:
        m = np.ones(x.shape[0], dtype=bool)
    else:
        m = _as_mask(row_mask, (x.shape[0],), "add_rows_masked")
    outd = x.data.copy()
    outd[m] += v.data
    out = Tensor(outd)
    return _record(out, [(x, lambda g: g), (v, lambda g: g[m].sum(axis=0))])


def overwrite_rows(base: Tensor, rows: Tensor, starts: Sequence[int]) -> Tensor:
    """Replace ``rows.shape[0]``-row blocks of ``base`` at each start offset.

    Replacement, not addition: the overwritten entries of ``base`` receive
    no gradient, while ``rows`` accumulates gradient from every block.
    """
    base, rows = _as_tensor(base), _as_tensor(rows)
    if base.ndim != 2 or rows.ndim != 2 or base.shape[1] != rows.shape[1]:
        raise ShapeError(f"overwrite_rows: shapes {base.shape} and {rows.shape} are incompatible")
    p = rows.shape[0]
    starts = sorted(int(s) for s in starts)
    for i, s in enumerate(starts):
        if s < 0 or s + p > base.shape[0]:
            raise ShapeError(f"overwrite_rows: block at {s} exceeds {base.shape[0]} rows")
        if i and s < starts[i - 1] + p:
            raise ContractError("overwrite_rows: overlapping blocks")
    outd = base.data.copy()
    for s in starts:
        outd[s:s + p] = rows.data
    out = Tensor(outd)

    def bwd_base(g):
        z = g.copy()
        for s in starts:
            z[s:s + p] = 0.0
        return z

    def bwd_rows(g):
        acc = np.zeros_like(rows.data)
        for s in starts:
            acc += g[s:s + p]
        return acc

    return _record(out, [(base, bwd_base), (rows, bwd_rows)])


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; gradients scatter-add back."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"embedding: table shape {table.shape}, ids shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx].copy())
    td = table.data

    def bwd(g):
        z = np.zeros_like(td)
        np.add.at(z, idx, g)
        return z

    return _record(out, [(table, bwd)])


def neighbor_max(h: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Per-row elementwise max over each row's index group.

    Gradient routes to the argmax entry of each (row, column) pair; the
    caller includes a row in its own group when self-aggregation is wanted.
    """
    h = _as_tensor(h)
    if h.ndim != 2:
        raise ShapeError(f"neighbor_max needs a matrix, got shape {h.shape}")
    n, d = h.shape
    if len(groups) == 0:
        raise ContractError("neighbor_max: no groups given")
    hd = h.data
    outd = np.empty((len(groups), d))
    src = np.empty((len(groups), d), dtype=np.int64)
    for i, grp in enumerate(groups):
        idx = np.asarray(grp, dtype=np.int64)
        if idx.size == 0:
            raise ContractError(f"neighbor_max: group {i} is empty")
        sub = hd[idx]
        arg = sub.argmax(axis=0)
        outd[i] = sub[arg, np.arange(d)]
        src[i] = idx[arg]
    out = Tensor(outd)
    cols = np.arange(d)

    def bwd(g):
        z = np.zeros_like(hd)
        np.add.at(z, (src.ravel(), np.tile(cols, len(groups))), g.ravel())
        return z

    return _record(out, [(h, bwd)])


def bce_with_logits(logits: Tensor, labels, label_mask=None) -> Tensor:
    """Mean binary cross-entropy over unmasked entries, from raw logits.

    Uses the stable ``max(x,0) - x*y + log1p(exp(-|x|))`` form. Labels must
    be 0/1 wherever the mask is true; masked entries are ignored entirely,
    which is how multi-task targets with missing values are handled.
    """
    logits = _as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: labels shape {y.shape} vs logits {logits.shape}")
    if label_mask is None:
        m = np.ones(logits.shape, dtype=bool)
    else:
        m = _as_mask(label_mask, logits.shape, "bce_with_logits")
    count = int(m.sum())
    if count == 0:
        raise ContractError("bce_with_logits: every label is masked")
    ym = y[m]
    if not np.all((ym == 0.0) | (ym == 1.0)):
        raise ContractError("bce_with_logits: unmasked labels must be 0 or 1")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(per[m].sum() / count)

    def bwd(g):
        gx = (expit(x) - y) * m
        return gx * (float(g) / count)

    return _record(out, [(logits, bwd)])
