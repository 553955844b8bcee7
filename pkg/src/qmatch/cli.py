"""Command-line pipeline: prepare-data, pretrain, evaluation, sweeps, reports.

All commands are deterministic given a config and seeds, and every output is
a plain file (JSON manifest, checkpoint container, JSONL results, CSV grids).
Exit codes: 0 success, 2 config error, 3 runtime/training error.
"""

from __future__ import annotations

import argparse
import csv as csvmod
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

from . import data as datamod
from .augment import CorruptionConfig
from .data import (
    DataError,
    PreprocessState,
    SplitSpec,
    apply_preprocess,
    fit_preprocess,
    load_csv,
    load_manifest,
    load_schema,
    make_splits,
    preset_split,
    save_manifest,
)
from .distill import EmbeddingQueue, QMatchConfig
from .model import (
    CheckpointError,
    ConfigError,
    EncoderConfig,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    DEFAULT_GRIDS,
    TrainLoopConfig,
    TrainingError,
    TrialResult,
    aggregate,
    finetune,
    format_rank,
    grid_search,
    linear_eval,
    pretrain,
    run_trial,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Published schema for run-config files (flags override these values).
RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "algorithm": {"type": "string"},
        "seed": {"type": "integer"},
        "seeds": {"type": "array", "items": {"type": "integer"}},
        "output_dir": {"type": "string"},
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layer_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "maxout_k": {"type": "integer", "minimum": 1},
                "projector_dim": {"type": "integer", "minimum": 1},
                "batchnorm_momentum": {"type": "number"},
                "mlp_projector": {"type": "boolean"},
            },
        },
        "loop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "max_epochs": {"type": "integer", "minimum": 1},
                "downstream_max_epochs": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "pretext_learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "trials": {"type": "integer", "minimum": 1},
            },
        },
        "qmatch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau_student": {"type": "number", "exclusiveMinimum": 0},
                "tau_teacher": {"type": "number", "exclusiveMinimum": 0},
                "tau_ema": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "queue_capacity": {"type": "integer", "minimum": 1},
            },
        },
        "corruption": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["resample", "zero"]},
                "p_student": {"type": "number", "minimum": 0, "maximum": 1},
                "p_teacher": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "extra": {"type": "object"},
    },
}


def data_root() -> Path:
    return Path(os.environ.get("QMATCH_DATA_DIR", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else data_root() / p


def load_run_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if jsonschema is not None:
        try:
            jsonschema.validate(cfg, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(f"{path}: {e.message}") from None
    return cfg


class Workspace:
    """A prepared-data directory: manifest, preprocess state, meta."""

    def __init__(self, directory: Path):
        self.dir = Path(directory)
        with open(self.dir / "meta.json") as fh:
            self.meta = json.load(fh)
        self.splits = load_manifest(self.dir / "splits.json")
        with open(self.dir / "preprocess.json") as fh:
            self.state = PreprocessState.from_dict(json.load(fh))
        schema = load_schema(_resolve(self.meta["schema"]))
        self.dataset = load_csv(_resolve(self.meta["csv"]), schema,
                                name=self.meta["name"])


def cmd_prepare_data(args) -> int:
    schema = load_schema(args.schema)
    dataset = load_csv(args.csv, schema, name=args.name or Path(args.csv).stem)
    quantile = args.quantile
    if args.preset:
        spec = preset_split(args.preset, seed=args.seed)
        if quantile is None:
            quantile = datamod.PRESETS[args.preset].get("quantile", False)
    else:
        with open(args.split_spec) as fh:
            spec = SplitSpec(**json.load(fh), seed=args.seed)
    splits = make_splits(dataset, spec)
    state = fit_preprocess(dataset, rows=splits["pretext_train"],
                           quantile=bool(quantile))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(splits, out / "splits.json",
                  metadata={"seed": args.seed, "preset": args.preset,
                            "dataset": dataset.name})
    with open(out / "preprocess.json", "w") as fh:
        json.dump(state.to_dict(), fh, sort_keys=True, separators=(",", ":"))
    with open(out / "meta.json", "w") as fh:
        json.dump({"csv": str(args.csv), "schema": str(args.schema),
                   "name": dataset.name, "preset": args.preset,
                   "seed": args.seed, "quantile": bool(quantile)},
                  fh, sort_keys=True, separators=(",", ":"))
    sizes = {k: len(v) for k, v in splits.items()}
    print(f"prepared {dataset.name}: " +
          ", ".join(f"{k}={v}" for k, v in sorted(sizes.items())))
    return EXIT_OK


def _build_configs(args, ws: Workspace):
    cfg = load_run_config(args.config) if args.config else {}

    def pick(flag_val, section, key, default):
        if flag_val is not None:
            return flag_val
        return cfg.get(section, {}).get(key, default) if section else cfg.get(key, default)

    enc_over = cfg.get("encoder", {})
    widths = args.widths or enc_over.get("layer_widths") or [2048, 2048, 4096, 4096, 8192]
    encoder = EncoderConfig(
        input_dim=ws.state.output_dim,
        layer_widths=tuple(widths),
        maxout_k=enc_over.get("maxout_k", 4),
        projector_dim=enc_over.get("projector_dim", 128),
        mlp_projector=enc_over.get("mlp_projector", False),
    )
    loop = TrainLoopConfig(
        batch_size=pick(args.batch_size, "loop", "batch_size", 512),
        max_epochs=pick(args.max_epochs, "loop", "max_epochs", 200),
        downstream_max_epochs=pick(None, "loop", "downstream_max_epochs", 500),
        patience=pick(args.patience, "loop", "patience", 32),
        learning_rate=pick(args.lr, "loop", "learning_rate", 1e-3),
        pretext_learning_rate=pick(args.pretext_lr, "loop", "pretext_learning_rate", 1e-3),
        weight_decay=pick(None, "loop", "weight_decay", 1e-1),
    )
    qm = QMatchConfig(
        tau_student=pick(args.tau_student, "qmatch", "tau_student", 0.1),
        tau_teacher=pick(None, "qmatch", "tau_teacher", 0.04),
        tau_ema=pick(None, "qmatch", "tau_ema", 0.9),
        queue_capacity=pick(args.queue_size, "qmatch", "queue_capacity", 512),
    )
    corr = CorruptionConfig(
        mode=pick(None, "corruption", "mode", "resample"),
        p_student=pick(args.p_student, "corruption", "p_student", 0.3),
        p_teacher=pick(args.p_teacher, "corruption", "p_teacher", 0.0),
    )
    extra = cfg.get("extra", {})
    algorithm = args.algorithm or cfg.get("algorithm")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    return algorithm, encoder, loop, qm, corr, extra, seed


def _resolved_config_dict(algorithm, encoder, loop, qm, corr, extra, seed) -> dict:
    from dataclasses import asdict
    return {"algorithm": algorithm, "seed": seed,
            "encoder": encoder.to_dict(), "loop": asdict(loop),
            "qmatch": asdict(qm), "corruption": asdict(corr), "extra": extra}


def cmd_pretrain(args) -> int:
    ws = Workspace(Path(args.data))
    algorithm, encoder, loop, qm, corr, extra, seed = _build_configs(args, ws)
    if algorithm is None:
        raise ConfigError("no algorithm given (flag --algorithm or config file)")
    resolved = _resolved_config_dict(algorithm, encoder, loop, qm, corr, extra, seed)
    if args.dry_run:
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return EXIT_OK
    result = pretrain(algorithm, ws.dataset, ws.splits, ws.state, encoder, loop, seed,
                      qm_config=qm, corruption=corr, extra=extra)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, ema=result.ema,
                    metadata={"algorithm": algorithm, "seed": seed,
                              "best_epoch": result.best_epoch,
                              "preprocess_ref": str(Path(args.data) / "preprocess.json"),
                              "config": resolved},
                    queue_storage=result.queue.snapshot() if result.queue else None)
    print(f"best_epoch={result.best_epoch} "
          f"best_val_loss={min(result.val_history):.6f} "
          f"epochs_run={len(result.val_history)} checkpoint={out}")
    return EXIT_OK


def _append_result(path, result: TrialResult):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(result.to_json() + "\n")


def cmd_eval(args, task: str) -> int:
    ws = Workspace(Path(args.data))
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    loop = TrainLoopConfig(
        learning_rate=args.lr if args.lr is not None else 1e-3,
        downstream_max_epochs=args.max_epochs or 500,
        patience=args.patience or 32,
        batch_size=args.batch_size or 512,
    )
    algorithm = ckpt["metadata"].get("algorithm", "unknown")
    fn = linear_eval if task == "linear" else finetune
    result = fn(ckpt["params"], ws.dataset, ws.splits, ws.state, loop,
                args.seed if args.seed is not None else 0,
                algorithm=algorithm)
    _append_result(args.out, result)
    print(f"{task} val_accuracy={result.val_accuracy:.2f} "
          f"test_accuracy={result.test_accuracy:.2f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    ws = Workspace(Path(args.data))
    algorithm, encoder, loop, qm, corr, extra, seed = _build_configs(args, ws)
    if algorithm is None:
        raise ConfigError("no algorithm given")
    seeds = _parse_seeds(args, default=[seed])
    if args.grid:
        with open(args.grid) as fh:
            grid = json.load(fh)
    else:
        grid = dict(DEFAULT_GRIDS["common"])
        grid.update(DEFAULT_GRIDS.get(algorithm, {}))
    best_point, results, outcomes = grid_search(
        algorithm, grid, args.task, ws.dataset, ws.splits, ws.state,
        encoder, loop, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        _append_result(out / "results.jsonl", r)
    summary = {"best_point": best_point,
               "points": [{"point": o["point"], "failed": o["failed"],
                           "val_accuracy": (o["result"].val_accuracy
                                            if o["result"] else None)}
                          for o in outcomes]}
    with open(out / "grid.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    accs = [r.test_accuracy for r in results]
    print(f"best_point={json.dumps(best_point, sort_keys=True)} "
          f"test_accuracy={np.mean(accs):.2f}+/-{np.std(accs, ddof=1) if len(accs) > 1 else 0.0:.2f}")
    return EXIT_OK


def _parse_seeds(args, default):
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",")]
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return default


SWEEP_KINDS = ("corruption-heatmap", "queue-size", "label-fraction", "pretext-size")


def cmd_sweep(args) -> int:
    ws = Workspace(Path(args.data))
    algorithm, encoder, loop, qm, corr, extra, seed = _build_configs(args, ws)
    algorithm = algorithm or "qmatch"
    seeds = _parse_seeds(args, default=[0])
    values = [float(v) for v in args.values.split(",")] if args.values else None

    rows: list[dict] = []

    def run_cell(axes: dict, qm_c, corr_c, splits):
        cell = []
        for s in seeds:
            r = run_trial(algorithm, args.task, ws.dataset, splits, ws.state,
                          encoder, loop, s, qm_config=qm_c, corruption=corr_c,
                          extra=extra, hyperparameters=axes)
            cell.append(r.test_accuracy)
            rows.append({**axes, "seed": s, "accuracy": r.test_accuracy})
        mean = float(np.mean(cell))
        std = float(np.std(cell, ddof=1)) if len(cell) > 1 else 0.0
        for row in rows[-len(cell):]:
            row["mean_accuracy"] = mean
            row["std_accuracy"] = std

    if args.kind == "corruption-heatmap":
        ps = values or [0.0, 0.3, 0.5]
        pt = [float(v) for v in args.teacher_values.split(",")] if args.teacher_values else ps
        for p_s in ps:
            for p_t in pt:
                c = CorruptionConfig(mode=corr.mode, p_student=p_s, p_teacher=p_t)
                run_cell({"p_student": p_s, "p_teacher": p_t}, qm, c, ws.splits)
    elif args.kind == "queue-size":
        sizes = [int(v) for v in (values or [2 ** 9, 2 ** 11])]
        for m in sizes:
            q = QMatchConfig(tau_student=qm.tau_student, tau_teacher=qm.tau_teacher,
                             tau_ema=qm.tau_ema, queue_capacity=m)
            run_cell({"queue_size": m}, q, corr, ws.splits)
    elif args.kind == "label-fraction":
        fractions = values or [0.01, 0.1, 1.0]
        base = {k: v.copy() for k, v in ws.splits.items()}
        rng = np.random.default_rng(seed)
        for frac in fractions:
            splits = dict(base)
            k = max(ws.dataset.num_classes, round(frac * len(base["down_train"])))
            splits["down_train"] = datamod._stratified_take(
                base["down_train"], ws.dataset.labels, min(k, len(base["down_train"])), rng)
            run_cell({"label_fraction": frac}, qm, corr, splits)
    elif args.kind == "pretext-size":
        fractions = values or [0.25, 0.5, 1.0]
        base = {k: v.copy() for k, v in ws.splits.items()}
        for frac in fractions:
            splits = dict(base)
            k = max(loop.batch_size, round(frac * len(base["pretext_train"])))
            splits["pretext_train"] = base["pretext_train"][:min(k, len(base["pretext_train"]))]
            run_cell({"pretext_size": len(splits["pretext_train"])}, qm, corr, splits)
    else:
        raise ConfigError(f"unknown sweep kind {args.kind!r}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = sorted({k for row in rows for k in row})
    with open(out, "w", newline="") as fh:
        writer = csvmod.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    results: list[TrialResult] = []
    for path in args.results:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    results.append(TrialResult.from_json(line))
    if not results:
        raise ConfigError("no result lines found")
    agg = aggregate(results)

    lines = []
    header = ["algorithm"] + agg["datasets"] + ["avg_rank"]
    lines.append("  ".join(f"{h:>18}" for h in header))
    order = sorted(agg["algorithms"], key=lambda a: agg["avg_rank"][a])
    for a in order:
        cells = []
        for d in agg["datasets"]:
            s = agg["stats"].get((a, d))
            cells.append(f"{s['mean']:.2f} +/- {s['std']:.2f}" if s else "-")
        lines.append("  ".join([f"{a:>18}"] + [f"{c:>18}" for c in cells]
                               + [f"{format_rank(agg['avg_rank'][a]):>18}"]))
    table = "\n".join(lines)
    print(table)
    if args.json:
        payload = {
            "cells": {f"{a}|{d}": s for (a, d), s in agg["stats"].items()},
            "ranks": {f"{a}|{d}": r for (a, d), r in agg["ranks"].items()},
            "avg_rank": {a: format_rank(v) for a, v in agg["avg_rank"].items()},
        }
        with open(args.json, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmatch",
                                     description="Queue-based self-distillation for tabular data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build split manifests and preprocessing state")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--preset", choices=sorted(datamod.PRESETS), default=None)
    p.add_argument("--split-spec", default=None, help="JSON file with SplitSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=None)
    p.add_argument("--quantile", action=argparse.BooleanOptionalAction, default=None)

    def train_flags(q):
        q.add_argument("--config", default=None, help="run-config JSON (schema-validated)")
        q.add_argument("--algorithm", default=None)
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--widths", type=lambda s: [int(w) for w in s.split(",")], default=None)
        q.add_argument("--batch-size", type=int, default=None)
        q.add_argument("--max-epochs", type=int, default=None)
        q.add_argument("--patience", type=int, default=None)
        q.add_argument("--lr", type=float, default=None)
        q.add_argument("--pretext-lr", type=float, default=None)
        q.add_argument("--tau-student", type=float, default=None)
        q.add_argument("--queue-size", type=int, default=None)
        q.add_argument("--p-student", type=float, default=None)
        q.add_argument("--p-teacher", type=float, default=None)

    p = sub.add_parser("pretrain", help="run a pretext task and write a checkpoint")
    p.add_argument("--data", required=True, help="prepared-data directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--dry-run", action="store_true")
    train_flags(p)

    for task, name in (("linear", "linear-eval"), ("finetune", "finetune")):
        p = sub.add_parser(name, help=f"{task} evaluation of a checkpoint")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="JSONL results file (appended)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--max-epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.set_defaults(task=task)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=["linear", "finetune"], default="linear")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--grid", default=None, help="JSON file: {param: [values]}")
    train_flags(p)

    p = sub.add_parser("sweep", help="sensitivity sweeps, emitted as plot-ready CSV")
    p.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--task", choices=["linear", "finetune"], default="linear")
    p.add_argument("--seeds", default=None)
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--teacher-values", default=None,
                   help="teacher corruption values (corruption-heatmap)")
    train_flags(p)

    p = sub.add_parser("report", help="aggregate results into a rank table")
    p.add_argument("results", nargs="+", help="JSONL result files")
    p.add_argument("--json", default=None, help="also write the table as JSON")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        if args.command == "prepare-data":
            if bool(args.preset) == bool(args.split_spec):
                raise ConfigError("give exactly one of --preset or --split-spec")
            return cmd_prepare_data(args)
        if args.command == "pretrain":
            return cmd_pretrain(args)
        if args.command in ("linear-eval", "finetune"):
            return cmd_eval(args, args.task)
        if args.command == "grid":
            return cmd_grid(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "report":
            return cmd_report(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CheckpointError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
