"""Optimizer, schedule, losses, metrics and the cross-validated training loop.

One ``train`` call runs a tuning regime over k folds against a frozen
backbone checkpoint. Everything is deterministic given the top-level
seed: fold assignment, parameter init, epoch shuffles and therefore every
recorded loss. Wall-clock durations are recorded but never feed back into
the computation.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from gpt_lab.graphs import DataError, GraphSample, make_folds, with_rwpe
from gpt_lab.graphs import batch as batch_graphs
from gpt_lab.models import Backbone, BackboneConfig, PredictionHead, backbone_forward
from gpt_lab.prompt import MODES, PromptSet, build_registry, count_params, deepgpt_transform, init_prompts
from gpt_lab.seeding import rng_for
from gpt_lab.tensor import ContractError, Tape, Tensor, backward, bce_with_logits, mul, scale, tsum

__all__ = [
    "AdamW",
    "Schedule",
    "TuningConfig",
    "RunRecord",
    "FoldResult",
    "UndefinedMetricError",
    "lr_at",
    "bce_loss",
    "mse_loss",
    "rmse",
    "auroc",
    "average_precision",
    "clip_global_norm",
    "train",
    "METRICS",
]

METRICS = ("auroc", "ap", "rmse")


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. single-class AUROC)."""


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a fixed named parameter set.

    The decay multiplies parameters by (1 - lr_t * wd) before the moment
    update is applied, so with wd=0 the update equals plain Adam.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr_t: float) -> None:
        if set(grads) != set(self.m):
            missing = set(self.m) - set(grads)
            extra = set(grads) - set(self.m)
            raise ContractError(f"gradient/parameter key mismatch: "
                                f"missing={sorted(missing)}, unexpected={sorted(extra)}")
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                p.data *= 1.0 - lr_t * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    decay: str = "cosine"

    def __post_init__(self):
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ContractError(f"need 0 <= warmup ({self.warmup_epochs}) "
                                f"< total ({self.total_epochs})")
        if self.decay not in ("cosine", "linear"):
            raise ContractError(f"unknown decay {self.decay!r}")


def lr_at(epoch: float, schedule: Schedule) -> float:
    """Linear ramp to base over warmup, then cosine or linear decay to zero."""
    if not (0 <= epoch < schedule.total_epochs):
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.warmup_epochs and epoch < schedule.warmup_epochs:
        return schedule.base_lr * epoch / schedule.warmup_epochs
    span = schedule.total_epochs - schedule.warmup_epochs
    progress = (epoch - schedule.warmup_epochs) / span
    if schedule.decay == "cosine":
        return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.base_lr * (1.0 - progress)


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------


def bce_loss(logits: Tensor, labels, label_mask=None) -> Tensor:
    """Masked mean binary cross-entropy from logits (stable log-sigmoid form)."""
    return bce_with_logits(logits, labels, label_mask)


def mse_loss(preds: Tensor, labels) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != preds.shape:
        raise ContractError(f"mse_loss: labels shape {y.shape} vs preds {preds.shape}")
    diff = preds + Tensor(-y)
    return scale(tsum(mul(diff, diff)), 1.0 / y.size)


def rmse(preds, labels) -> float:
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    pos = y == 1.0
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Precision summed at each positive's rank (descending, stable ties)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n_pos = int((y == 1.0).sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx] == 1.0:
            hits += 1
            total += hits / rank
    return float(total / n_pos)


def clip_global_norm(grads: dict[str, np.ndarray],
                     max_norm: float = 5.0) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TuningConfig:
    mode: str
    metric: str = "auroc"
    p_len: int = 10
    prompted_layers: tuple[int, int] | None = None
    token_stage: str = "post_projection"
    lr: float = 3e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float = 5.0
    epochs: int = 100
    warmup_epochs: int = 5
    decay: str = "cosine"
    batch_size: int = 32
    folds: int = 5
    head_hidden: bool = False

    def __post_init__(self):
        if self.mode.lower() not in MODES:
            raise ContractError(f"unknown tuning mode {self.mode!r}")
        if self.metric not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.folds < 2:
            raise ContractError("batch_size/epochs/folds out of range")
        Schedule(self.lr, self.warmup_epochs, self.epochs, self.decay)

    @property
    def higher_is_better(self) -> bool:
        return self.metric != "rmse"


@dataclass
class RunRecord:
    """Per-epoch trace of one fold's training run."""

    train_losses: list[float] = field(default_factory=list)
    eval_metrics: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    epochs_to_best: int = 0

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "eval_metrics": self.eval_metrics,
            "epoch_seconds": self.epoch_seconds,
            "epochs_to_best": self.epochs_to_best,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(list(d["train_losses"]), list(d["eval_metrics"]),
                   list(d["epoch_seconds"]), int(d["epochs_to_best"]))


@dataclass
class FoldResult:
    fold: int
    record: RunRecord
    final_metric: float
    trainable_count: int
    frozen_count: int
    prompt_state: dict[str, np.ndarray]
    backbone_state: dict[str, np.ndarray] | None = None  # ft mode only


def _subseed(seed: int, *path) -> int:
    return int(rng_for(seed, *path).integers(0, 2**63 - 1))


def _validate(config: TuningConfig, dataset, backbone_cfg: BackboneConfig) -> int:
    mode = config.mode.lower()
    if not dataset:
        raise DataError("empty dataset")
    t = dataset[0].label_dim
    if t == 0:
        raise DataError("training needs labeled samples")
    for g in dataset:
        if g.label_dim != t:
            raise DataError("label arity differs across the dataset")
    if mode in ("prefix_only", "deepgpt") and backbone_cfg.kind != "transformer":
        raise ContractError(f"{mode} mode requires the transformer backbone")
    if mode == "virtual_node" and backbone_cfg.kind != "mpgnn":
        raise ContractError("virtual_node mode requires the mpgnn backbone")
    if config.metric in ("auroc", "ap"):
        for g in dataset:
            lab = g.label[np.isfinite(g.label)]
            if not np.all((lab == 0.0) | (lab == 1.0)):
                raise DataError("classification metrics need 0/1 labels")
    return t


def _metric_value(config: TuningConfig, scores: np.ndarray, labels: np.ndarray) -> float:
    if config.metric == "rmse":
        return rmse(scores, labels)
    fn = auroc if config.metric == "auroc" else average_precision
    vals = []
    for col in range(labels.shape[1]):
        mask = np.isfinite(labels[:, col])
        try:
            vals.append(fn(scores[mask, col], labels[mask, col]))
        except UndefinedMetricError:
            continue
    if not vals:
        raise UndefinedMetricError("metric undefined on every task column")
    return float(np.mean(vals))


def _loss(config: TuningConfig, out: Tensor, labels: np.ndarray) -> Tensor:
    if config.metric == "rmse":
        return mse_loss(out, labels)
    return bce_loss(out, labels, np.isfinite(labels))


def _encode_dataset(dataset, backbone_cfg: BackboneConfig) -> list[GraphSample]:
    if backbone_cfg.rwpe_steps:
        return with_rwpe(dataset, backbone_cfg.rwpe_steps)
    return list(dataset)


def _fit(config: TuningConfig, encoded, train_idx, eval_idx, bb, head,
         prompts: PromptSet, registry, shuffle_rng) -> RunRecord:
    """The shared epoch loop: shuffled minibatches, clip, AdamW, epoch eval."""
    optimizer = AdamW(registry.trainable, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
    schedule = Schedule(config.lr, config.warmup_epochs, config.epochs, config.decay)
    eval_batch = batch_graphs([encoded[i] for i in eval_idx])
    eval_labels = eval_batch.labels.data
    ctx = deepgpt_transform(eval_batch, prompts, bb) if not prompts.is_empty() else None

    record = RunRecord()
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr_t = lr_at(epoch, schedule)
        order = shuffle_rng.permutation(len(train_idx))
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            chunk = [int(train_idx[i]) for i in order[lo:lo + config.batch_size]]
            batch = batch_graphs([encoded[i] for i in chunk])
            with Tape():
                out = backbone_forward(batch, bb, head, prompt_ctx=ctx)
                loss = _loss(config, out, batch.labels.data)
                grads = backward(loss)
            named = {}
            for name, t in registry.trainable.items():
                if t not in grads:
                    raise ContractError(f"trainable parameter {name} received no gradient")
                named[name] = grads[t]
            named = clip_global_norm(named, config.clip)
            optimizer.step(registry.trainable, named, lr_t)
            loss_sum += float(loss.data) * len(chunk)
        record.train_losses.append(loss_sum / len(train_idx))
        scores = backbone_forward(eval_batch, bb, head, prompt_ctx=ctx).data
        record.eval_metrics.append(_metric_value(config, scores, eval_labels))
        record.epoch_seconds.append(time.perf_counter() - started)

    metrics = np.asarray(record.eval_metrics)
    best = int(np.argmax(metrics)) if config.higher_is_better else int(np.argmin(metrics))
    record.epochs_to_best = best + 1
    return record


def _fold_pieces(config: TuningConfig, backbone_cfg: BackboneConfig,
                 backbone_state, out_dim: int, seed: int, fold: int):
    bb = Backbone.init(backbone_cfg, seed=0)
    bb.load_state(backbone_state)
    fold_seed = _subseed(seed, "fold", fold)
    head = PredictionHead.init(backbone_cfg.dim, out_dim, seed=fold_seed,
                               hidden=config.head_hidden)
    prompts = init_prompts(config.mode.lower(), backbone_cfg.dim, backbone_cfg.layers,
                           config.p_len, seed=fold_seed,
                           prompted_layers=config.prompted_layers,
                           token_stage=config.token_stage,
                           token_width=backbone_cfg.input_width)
    return bb, head, prompts


def _run_fold(args) -> FoldResult:
    (config, dataset, backbone_cfg, backbone_state, seed, fold) = args
    split = make_folds(len(dataset), config.folds, seed)
    train_idx, eval_idx = split.train_eval(fold)
    encoded = _encode_dataset(dataset, backbone_cfg)
    mode = config.mode.lower()
    bb, head, prompts = _fold_pieces(config, backbone_cfg, backbone_state,
                                     dataset[0].label_dim, seed, fold)
    registry = build_registry(bb, head, prompts, mode)
    counts = count_params(registry)
    record = _fit(config, encoded, train_idx, eval_idx, bb, head, prompts,
                  registry, rng_for(seed, "shuffle", fold))
    prompt_state = {name: t.data.copy() for name, t in prompts.named_params().items()}
    prompt_state.update({name: t.data.copy() for name, t in head.named_params().items()})
    return FoldResult(fold=fold, record=record, final_metric=record.eval_metrics[-1],
                      trainable_count=counts["trainable_count"],
                      frozen_count=counts["frozen_count"],
                      prompt_state=prompt_state,
                      backbone_state=bb.state_arrays() if mode == "ft" else None)


def _worker_cap() -> int:
    env = os.environ.get("GPT_LAB_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ContractError(f"GPT_LAB_THREADS must be an integer, got {env!r}") from None
        if cap >= 1:
            return cap
    return os.cpu_count() or 1


def train(config: TuningConfig, dataset: list[GraphSample],
          backbone_cfg: BackboneConfig, backbone_state: dict[str, np.ndarray],
          seed: int, parallel: int = 1) -> list[FoldResult]:
    """Run one tuning regime over all folds against a frozen backbone state.

    Folds are independent; with ``parallel > 1`` they run in a process
    pool (capped by GPT_LAB_THREADS) and results are returned in fold
    order either way.
    """
    _validate(config, dataset, backbone_cfg)
    jobs = [(config, dataset, backbone_cfg, backbone_state, seed, fold)
            for fold in range(config.folds)]
    workers = min(parallel, config.folds, _worker_cap())
    if workers <= 1:
        return [_run_fold(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_fold, jobs))


def evaluate_fold(config: TuningConfig, dataset: list[GraphSample],
                  backbone_cfg: BackboneConfig, backbone_state: dict[str, np.ndarray],
                  prompt_state: dict[str, np.ndarray], seed: int, fold: int) -> float:
    """Metric of a stored prompt+head state on one fold's evaluation split.

    Reconstructs the exact fold split and prompt shapes used by ``train``,
    then overwrites the prompt/head values with the stored arrays, so a
    saved prompt checkpoint reproduces the recorded metric exactly.
    """
    _validate(config, dataset, backbone_cfg)
    split = make_folds(len(dataset), config.folds, seed)
    _, eval_idx = split.train_eval(fold)
    encoded = _encode_dataset(dataset, backbone_cfg)
    bb, head, prompts = _fold_pieces(config, backbone_cfg, backbone_state,
                                     dataset[0].label_dim, seed, fold)
    named = dict(prompts.named_params())
    named.update(head.named_params())
    if set(named) != set(prompt_state):
        raise ContractError(f"prompt state keys {sorted(prompt_state)} do not match "
                            f"the configured mode's parameters {sorted(named)}")
    for name, t in named.items():
        arr = np.asarray(prompt_state[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ContractError(f"{name}: stored shape {arr.shape} != {t.shape}")
        t.data = arr.copy()
    eval_batch = batch_graphs([encoded[i] for i in eval_idx])
    ctx = deepgpt_transform(eval_batch, prompts, bb) if not prompts.is_empty() else None
    scores = backbone_forward(eval_batch, bb, head, prompt_ctx=ctx).data
    return _metric_value(config, scores, eval_batch.labels.data)


def pretrain(dataset: list[GraphSample], backbone_cfg: BackboneConfig,
             seed: int, epochs: int = 30, lr: float = 1e-3,
             weight_decay: float = 0.0, batch_size: int = 32,
             warmup_epochs: int = 2, decay: str = "cosine", clip: float = 5.0,
             eval_fraction: float = 0.1) -> tuple[dict[str, np.ndarray], RunRecord]:
    """Full training of a fresh backbone + throwaway head on a regression pretext.

    A seeded holdout split provides the per-epoch RMSE trace; the returned
    state holds only the backbone parameters (the pretext head is dropped).
    """
    config = TuningConfig(mode="ft", metric="rmse", epochs=epochs, lr=lr,
                          weight_decay=weight_decay, batch_size=batch_size,
                          warmup_epochs=warmup_epochs, decay=decay, clip=clip)
    _validate(config, dataset, backbone_cfg)
    encoded = _encode_dataset(dataset, backbone_cfg)
    n_eval = max(1, int(round(len(dataset) * eval_fraction)))
    perm = rng_for(seed, "pretrain-split").permutation(len(dataset))
    eval_idx, train_idx = perm[:n_eval], perm[n_eval:]
    bb = Backbone.init(backbone_cfg, seed=_subseed(seed, "pretrain-backbone"))
    head = PredictionHead.init(backbone_cfg.dim, dataset[0].label_dim,
                               seed=_subseed(seed, "pretrain-head"))
    registry = build_registry(bb, head, PromptSet(), "ft")
    record = _fit(config, encoded, train_idx, eval_idx, bb, head, PromptSet(),
                  registry, rng_for(seed, "pretrain-shuffle"))
    return bb.state_arrays(), record
