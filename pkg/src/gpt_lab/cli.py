"""Experiment runner: pretrain, tune, ablate, report.

Every command is driven by one config file plus a handful of flags, and
writes CSV/JSON artifacts into an output directory. Exit codes: 0 on
success, 2 for config problems, 3 for data problems, 4 for checkpoint
mismatches.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from gpt_lab.checkpoint import (
    CheckpointError,
    CheckpointMismatchError,
    fingerprint,
    load_backbone,
    save_backbone,
    save_prompt,
)
from gpt_lab.config import ConfigError, ExperimentConfig, load_config
from gpt_lab.graphs import DataError, gen_downstream, gen_pretext, read_graph_file
from gpt_lab.tensor import ContractError
from gpt_lab.training import RunRecord, TuningConfig, pretrain, train

__all__ = ["main"]

_PROMPT_MODES = ("prefix_only", "deepgpt", "virtual_node")

TUNE_CSV_FIELDS = ["mode", "metric", "trainable_params", "mean", "std",
                   "epochs_to_best_mean"]
FOLD_CSV_FIELDS = ["fold", "final_metric", "epochs_to_best"]
ABLATE_CSV_FIELDS = ["axis", "cell", "trainable_params", "mean", "std",
                     "epochs_to_best_mean"]
REPORT_CSV_FIELDS = ["mode", "runs", "epochs_to_best_mean", "epoch_seconds_mean"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def read_csv(path, expected_fields: list[str] | None = None) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if expected_fields is not None and reader.fieldnames != expected_fields:
            raise DataError(f"{path}: unexpected CSV schema {reader.fieldnames}")
        return list(reader)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def _load_dataset(cfg: ExperimentConfig, seed: int):
    task = cfg.task
    if task is None:
        raise ConfigError("this command needs a [task] section")
    if task.graph_file is not None:
        return read_graph_file(task.graph_file)
    return gen_downstream(task.count, task.generator, seed,
                          size_range=(task.min_nodes, task.max_nodes),
                          feature_dim=task.feature_dim)


def _tuning_with_overrides(cfg: ExperimentConfig, args) -> TuningConfig:
    tuning = cfg.tuning
    if tuning is None:
        raise ConfigError("this command needs a [tuning] section")
    if args.folds is not None:
        tuning = dataclasses.replace(tuning, folds=args.folds)
    return tuning


def _aggregate_row(tuning: TuningConfig, results) -> dict:
    finals = np.array([r.final_metric for r in results])
    return {
        "mode": tuning.mode.lower(),
        "metric": tuning.metric,
        "trainable_params": results[0].trainable_count,
        "mean": float(finals.mean()),
        "std": float(finals.std(ddof=1)) if len(finals) > 1 else 0.0,
        "epochs_to_best_mean": float(np.mean([r.record.epochs_to_best
                                              for r in results])),
    }


def _dump_run(out: Path, tuning: TuningConfig, results, seed: int,
              backbone_fp: str, command: str) -> None:
    records = out / "runrecords"
    records.mkdir(parents=True, exist_ok=True)
    for r in results:
        _write_json(records / f"fold{r.fold}.json", r.record.to_dict())
    fold_rows = [{"fold": r.fold, "final_metric": float(r.final_metric),
                  "epochs_to_best": r.record.epochs_to_best} for r in results]
    write_csv(out / "fold_metrics.csv", FOLD_CSV_FIELDS, fold_rows)
    _write_json(out / "run_meta.json", {
        "command": command,
        "mode": tuning.mode.lower(),
        "metric": tuning.metric,
        "seed": seed,
        "folds": tuning.folds,
        "trainable_params": results[0].trainable_count,
        "frozen_params": results[0].frozen_count,
        "backbone_fingerprint": backbone_fp,
    })


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if cfg.pretrain is None:
        raise ConfigError("pretrain needs a [pretrain] section")
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pre = cfg.pretrain
    data = gen_pretext(pre.count, (pre.min_nodes, pre.max_nodes), seed,
                       feature_dim=cfg.backbone.feature_dim)
    state, record = pretrain(data, cfg.backbone, seed, epochs=pre.epochs,
                             lr=pre.lr, weight_decay=pre.weight_decay,
                             batch_size=pre.batch_size,
                             warmup_epochs=pre.warmup_epochs, decay=pre.decay,
                             clip=pre.clip, eval_fraction=pre.eval_fraction)
    ckpt_path = out / "backbone.ckpt"
    save_backbone(ckpt_path, cfg.backbone, state)
    _write_json(out / "pretrain_record.json", {
        "seed": seed,
        "count": pre.count,
        "final_rmse": record.eval_metrics[-1],
        **record.to_dict(),
    })
    print(f"wrote {ckpt_path}")
    print(f"final pretext RMSE: {record.eval_metrics[-1]:.6f}")
    return 0


def cmd_tune(args) -> int:
    cfg = load_config(args.config)
    tuning = _tuning_with_overrides(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seed
    backbone_cfg, backbone_state = load_backbone(args.ckpt, expected=cfg.backbone)
    dataset = _load_dataset(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = train(tuning, dataset, backbone_cfg, backbone_state, seed,
                    parallel=args.parallel)
    row = _aggregate_row(tuning, results)
    write_csv(out / "metrics.csv", TUNE_CSV_FIELDS, [row])
    _dump_run(out, tuning, results, seed, fingerprint(backbone_cfg), "tune")

    if tuning.mode.lower() in _PROMPT_MODES:
        last = results[-1]
        save_prompt(out / "prompt.ckpt", dim=backbone_cfg.dim,
                    layers=backbone_cfg.layers, mode=tuning.mode.lower(),
                    p_len=tuning.p_len, token_stage=tuning.token_stage,
                    backbone_fingerprint=fingerprint(backbone_cfg),
                    state=last.prompt_state,
                    extra={"fold": last.fold, "seed": seed})
    print(f"{row['mode']}: {tuning.metric} mean={row['mean']:.4f} "
          f"std={row['std']:.4f} trainable={row['trainable_params']}")
    return 0


def _ablate_variant(tuning: TuningConfig, axis: str, cell) -> tuple[str, TuningConfig]:
    if axis == "depth":
        if tuning.mode.lower() not in ("deepgpt", "prefix_only"):
            raise ConfigError("depth ablation needs a prefix-based tuning mode")
        return f"{cell[0]}-{cell[1]}", dataclasses.replace(tuning, prompted_layers=cell)
    if axis == "length":
        if tuning.mode.lower() not in _PROMPT_MODES:
            raise ConfigError("length ablation needs a prompt-based tuning mode")
        return str(cell), dataclasses.replace(tuning, p_len=cell)
    return str(cell), dataclasses.replace(tuning, mode=cell)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if cfg.ablate is None:
        raise ConfigError("ablate needs an [ablate] section")
    tuning = _tuning_with_overrides(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seed
    backbone_cfg, backbone_state = load_backbone(args.ckpt, expected=cfg.backbone)
    dataset = _load_dataset(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    axis = cfg.ablate.axis
    for cell in cfg.ablate.cells():
        name, variant = _ablate_variant(tuning, axis, cell)
        results = train(variant, dataset, backbone_cfg, backbone_state, seed,
                        parallel=args.parallel)
        agg = _aggregate_row(variant, results)
        rows.append({"axis": axis, "cell": name,
                     "trainable_params": agg["trainable_params"],
                     "mean": agg["mean"], "std": agg["std"],
                     "epochs_to_best_mean": agg["epochs_to_best_mean"]})
        cell_dir = out / "cells" / name
        cell_dir.mkdir(parents=True, exist_ok=True)
        _dump_run(cell_dir, variant, results, seed, fingerprint(backbone_cfg),
                  "ablate")
        print(f"[{axis}={name}] mean={agg['mean']:.4f} "
              f"trainable={agg['trainable_params']}")
    write_csv(out / f"ablate_{axis}.csv", ABLATE_CSV_FIELDS, rows)
    return 0


def cmd_report(args) -> int:
    per_mode: dict[str, dict] = {}
    for run_dir in args.run_dirs:
        run = Path(run_dir)
        meta_path = run / "run_meta.json"
        records_dir = run / "runrecords"
        if not meta_path.exists() or not records_dir.is_dir():
            raise DataError(f"{run_dir}: incomplete run directory "
                            "(needs run_meta.json and runrecords/)")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        record_files = sorted(records_dir.glob("fold*.json"))
        if not record_files:
            raise DataError(f"{run_dir}: no fold records")
        bucket = per_mode.setdefault(meta["mode"], {
            "runs": 0, "epochs_to_best": [], "epoch_seconds": []})
        bucket["runs"] += 1
        for rf in record_files:
            record = RunRecord.from_dict(json.loads(rf.read_text(encoding="utf-8")))
            bucket["epochs_to_best"].append(record.epochs_to_best)
            bucket["epoch_seconds"].extend(record.epoch_seconds)

    rows = [{"mode": mode,
             "runs": bucket["runs"],
             "epochs_to_best_mean": float(np.mean(bucket["epochs_to_best"])),
             "epoch_seconds_mean": float(np.mean(bucket["epoch_seconds"]))}
            for mode, bucket in sorted(per_mode.items())]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "report.csv", REPORT_CSV_FIELDS, rows)
    for row in rows:
        print(f"{row['mode']}: epochs_to_best={row['epochs_to_best_mean']:.2f} "
              f"epoch_seconds={row['epoch_seconds_mean']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpt-lab",
                                     description="graph prompt tuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt: bool):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override [experiment] seed")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="backbone checkpoint")
            p.add_argument("--folds", type=int, default=None,
                           help="override fold count (default 5)")
            p.add_argument("--parallel", type=int, default=1,
                           help="fold worker processes")

    p = sub.add_parser("pretrain", help="pretrain a backbone on the pretext task")
    common(p, ckpt=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="tune against a frozen backbone over k folds")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("ablate", help="run a depth/length/component sweep")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate run records into a summary CSV")
    p.add_argument("run_dirs", nargs="+", help="completed run directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return 4
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
