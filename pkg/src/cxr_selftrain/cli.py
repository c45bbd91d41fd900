"""Command-line entry point: ``cxr-selftrain <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid configuration or arguments and 2
when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ENV_CHEXPERT_ROOT,
    ConfigError,
    ExperimentConfig,
    desk_scale_config,
    full_scale_dataset,
    load_config,
)
from .data.datasets import CLASSES, DatasetFormatError, LabeledDataset
from .engine import evaluate_model
from .experiment import (
    aggregate_reports,
    load_pool,
    prepare_data,
    run_ablation,
    run_student,
    run_teacher,
    write_metrics,
    write_run_dir,
)

log = logging.getLogger("cxr_selftrain")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _resolve_config(args) -> ExperimentConfig | None:
    cfg = load_config(args.config) if args.config else desk_scale_config()
    if args.full_scale:
        root = os.environ.get(ENV_CHEXPERT_ROOT)
        if not root:
            return None
        cfg.dataset = full_scale_dataset(root)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg.validate()


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_dir(out: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return out / f"seed_{seed}" if len(cfg.seeds) > 1 else out


def _write_aggregate(out: Path, reports: dict) -> None:
    if len(reports) > 1:
        (out / "aggregate.json").write_text(json.dumps(aggregate_reports(reports), indent=2, sort_keys=True) + "\n")


def _find_teacher(spec: str, seed: int, multi: bool) -> Path:
    p = Path(spec)
    candidates = [p] if p.is_file() else [p / f"seed_{seed}" / "checkpoint.bin", p / "checkpoint.bin"]
    if not multi and p.is_dir():
        candidates.reverse()
    for c in candidates:
        if c.is_file():
            return c
    raise UsageError(f"no teacher checkpoint for seed {seed} under {spec}")


def cmd_synth_data(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args.out, args.force)
    if args.seed is not None:
        cfg.dataset = replace(cfg.dataset, data_seed=args.seed)
    if args.n is not None:
        cfg.dataset = replace(cfg.dataset, n_pool=args.n)
    if cfg.dataset.kind != "synthetic":
        raise UsageError("synth-data needs a synthetic dataset section")
    # imported here so the CSV path does not depend on the renderer
    from .data.synthetic import write_dataset

    pool, test = load_pool(cfg)
    for name, ds in (("train", pool), ("valid", test)):
        moved = LabeledDataset([replace(r, image_path=f"{name}/{r.image_path}") for r in ds], ds.root)
        write_dataset(moved, out, f"{name}.csv")
        counts = dict(zip(CLASSES, ds.positive_counts().astype(int).tolist()))
        print(f"{name}: {len(ds)} images, positives " + ", ".join(f"{c}={n}" for c, n in counts.items()))
    return EXIT_OK


def cmd_train_teacher(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args.out, args.force)
    reports = {}
    for seed in cfg.seeds:
        model, record, report = run_teacher(cfg, seed)
        write_run_dir(_seed_dir(out, cfg, seed), cfg, seed, model, record, report)
        print(f"seed {seed}: teacher W-AUC {report.w_auc:.4f} W-PRC {report.w_prc:.4f}")
        reports[seed] = report
    _write_aggregate(out, reports)
    return EXIT_OK


def cmd_train_student(args, cfg: ExperimentConfig) -> int:
    if cfg.n_unlabeled <= 0:
        raise ConfigError("train-student needs unlabeled data: n_unlabeled must be > 0")
    out = _prepare_out(args.out, args.force)
    reports = {}
    for seed in cfg.seeds:
        data = prepare_data(cfg, seed)
        if len(data.unlabeled) == 0:
            raise ConfigError("no unlabeled samples available for self-training")
        if args.teacher:
            path = _find_teacher(args.teacher, seed, len(cfg.seeds) > 1)
            teacher = load_checkpoint(path, hp=replace(cfg.hp, seed=seed))
            teacher_report = evaluate_model(teacher, data.test, cfg.image_size)
        else:
            teacher, _, teacher_report = run_teacher(cfg, seed, data)
        model, record, report = run_student(cfg, seed, teacher, data)
        run_dir = _seed_dir(out, cfg, seed)
        delta = {"teacher_w_auc": teacher_report.w_auc, "delta_w_auc": report.w_auc - teacher_report.w_auc}
        write_run_dir(run_dir, cfg, seed, model, record, report, delta)
        write_metrics(run_dir, teacher_report, name="teacher_metrics")
        print(
            f"seed {seed}: student W-AUC {report.w_auc:.4f} teacher {teacher_report.w_auc:.4f} "
            f"delta {delta['delta_w_auc']:+.4f}"
        )
        reports[seed] = report
    _write_aggregate(out, reports)
    return EXIT_OK


def cmd_ablation(args, cfg: ExperimentConfig) -> int:
    out = _prepare_out(args.out, args.force)
    result = run_ablation(cfg, out)
    print(result.to_text(), end="")
    if result.failed:
        print("one or more variants FAILED", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    if not args.model:
        raise UsageError("evaluate needs --model (checkpoint file or run directory)")
    out = _prepare_out(args.out, args.force)
    path = Path(args.model)
    path = path / "checkpoint.bin" if path.is_dir() else path
    model = load_checkpoint(path)
    _, test = load_pool(cfg)
    report = evaluate_model(model, test, cfg.image_size)
    write_metrics(out, report)
    print(report.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "synth-data": (cmd_synth_data, "write a synthetic CheXpert-format dataset (train.csv, valid.csv, PNGs)"),
    "train-teacher": (cmd_train_teacher, "train the teacher with augmentation, mixup and confidence tempering"),
    "train-student": (cmd_train_student, "self-train a student from a teacher checkpoint"),
    "ablation": (cmd_ablation, "run the cumulative W-Aug / Mixup / CT / ST ablation"),
    "evaluate": (cmd_evaluate, "score a checkpoint on the configured test set"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxr-selftrain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config (default: built-in desk-scale config)")
        p.add_argument("--seed", type=int, help="run only this seed (synth-data: data seed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument(
            "--full-scale",
            action="store_true",
            help=f"use the CheXpert CSVs under ${ENV_CHEXPERT_ROOT} (skipped when unset)",
        )
        if name == "train-student":
            p.add_argument("--teacher", help="teacher checkpoint file or run directory; trained inline if omitted")
        if name == "evaluate":
            p.add_argument("--model", help="checkpoint file or run directory")
        if name == "synth-data":
            p.add_argument("--n", type=int, help="number of training images (default: dataset.n_pool)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _resolve_config(args)
        if cfg is None:
            print(f"{ENV_CHEXPERT_ROOT} is not set; skipping full-scale run")
            return EXIT_OK
        return COMMANDS[args.command][0](args, cfg)
    except (ConfigError, UsageError, DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, RuntimeError, ValueError, OSError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        out = Path(args.out)
        if out.is_dir():
            with open(out / "error.log", "a") as fh:
                fh.write(f"{args.command}: {type(e).__name__}: {e}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
