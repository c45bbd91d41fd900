"""Experiment plumbing: per-seed data preparation, run directories and the ablation sweep."""

from __future__ import annotations

import json
import logging
import math
import subprocess
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, dump_config
from .data.datasets import (
    LabeledDataset,
    UnlabeledDataset,
    ingest_csv,
    split_by_patient,
    subsample_preserving_marginals,
)
from .data.synthetic import generate_synthetic
from .engine import Strategies, TrainRunRecord, evaluate_model, train_student, train_teacher
from .metrics import MetricsReport, format_ablation_table
from .models import ModelHandle

log = logging.getLogger(__name__)

VARIANTS = {
    "W-Aug.": Strategies(weak_aug=True, mixup=False, ct=False, self_train=False),
    "W-Aug. + Mixup": Strategies(weak_aug=True, mixup=True, ct=False, self_train=False),
    "W-Aug. + Mixup + CT": Strategies(weak_aug=True, mixup=True, ct=True, self_train=False),
    "W-Aug. + Mixup + CT + ST": Strategies(weak_aug=True, mixup=True, ct=True, self_train=True),
}


@dataclass
class DataBundle:
    labeled: LabeledDataset
    unlabeled: UnlabeledDataset
    validation: LabeledDataset
    test: LabeledDataset


@lru_cache(maxsize=4)
def _synthetic_pool(n_pool, n_test, marginals, render_size, contrast, noise, data_seed):
    pool = generate_synthetic(n_pool, marginals, data_seed, render_size, contrast, noise)
    test = generate_synthetic(n_test, marginals, data_seed + 1, render_size, contrast, noise)
    return pool, test


@lru_cache(maxsize=2)
def _csv_pool(train_csv, test_csv, image_root, test_fraction, split_seed):
    pool = ingest_csv(train_csv, image_root=image_root)
    if test_csv:
        test = ingest_csv(test_csv, image_root=image_root)
    else:
        pool, test = split_by_patient(pool, (1 - test_fraction, test_fraction), split_seed)
    return pool, test


def load_pool(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """The training pool and the held-out test set, independent of the run seed."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return _synthetic_pool(
            ds.n_pool, ds.n_test, tuple(ds.marginals), ds.render_size, tuple(ds.contrast), ds.noise, ds.data_seed
        )
    return _csv_pool(ds.train_csv, ds.test_csv, ds.image_root, ds.test_fraction, ds.data_seed)


def prepare_data(cfg: ExperimentConfig, seed: int, n_labeled: int | None = None) -> DataBundle:
    """Patient-disjoint validation split, marginal-preserving labeled draw, disjoint unlabeled draw."""
    n_labeled = cfg.n_labeled if n_labeled is None else n_labeled
    pool, test = load_pool(cfg)
    vf = cfg.dataset.validation_fraction
    if vf > 0:
        train, validation = split_by_patient(pool, (1 - vf, vf), seed)
    else:
        train, validation = pool, pool.subset([])
    if n_labeled > len(train):
        raise ValueError(f"n_labeled={n_labeled} exceeds the {len(train)} training samples available")
    labeled, rest = subsample_preserving_marginals(train, n_labeled, seed, return_complement=True)
    n_unlab = cfg.n_unlabeled if cfg.strategies.self_train or cfg.n_unlabeled else 0
    if n_unlab > len(rest):
        raise ValueError(f"n_unlabeled={n_unlab} exceeds the {len(rest)} samples left after the labeled draw")
    pick = np.sort(np.random.default_rng([seed, 300]).permutation(len(rest))[:n_unlab])
    unlabeled = rest.subset(pick).without_labels()
    return DataBundle(labeled, unlabeled, validation, test)


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        describe = out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        describe = "unknown"
    return f"cxr_selftrain {__version__} ({describe})"


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_train_log(path: Path, record: TrainRunRecord) -> None:
    with open(path, "w") as fh:
        for entry in record.epochs:
            row = {"role": record.role, **{k: _jsonable(v) for k, v in entry.items()}}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_metrics(run_dir: Path, report: MetricsReport, extra: dict | None = None, name: str = "metrics") -> None:
    flat = report.to_flat()
    if extra:
        flat.update(extra)
    (run_dir / f"{name}.json").write_text(json.dumps(flat, indent=2, sort_keys=True) + "\n")
    text = report.to_text()
    if extra:
        text += "".join(f"{k} = {v:.6f}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in extra.items())
    (run_dir / f"{name}.txt").write_text(text)


def write_run_dir(
    run_dir: Path,
    cfg: ExperimentConfig,
    seed: int,
    model: ModelHandle,
    record: TrainRunRecord,
    report: MetricsReport,
    extra_metrics: dict | None = None,
) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = replace(cfg, seeds=[seed], hp=replace(cfg.hp, seed=seed))
    (run_dir / "config.resolved").write_text(dump_config(resolved))
    (run_dir / "run_info.json").write_text(
        json.dumps(
            {"version": version_string(), "seed": seed, "seeds": list(cfg.seeds), "role": record.role,
             "best_epoch": record.best_epoch},
            indent=2,
        )
        + "\n"
    )
    write_train_log(run_dir / "train_log.jsonl", record)
    save_checkpoint(
        model,
        run_dir / "checkpoint.bin",
        hp=resolved.hp,
        optimizer_state=record.optimizer_state,
        epoch=len(record.epochs),
        rng_state=record.rng_state,
        extra={"role": record.role, "image_size": cfg.image_size},
    )
    write_metrics(run_dir, report, extra_metrics)
    return run_dir


def run_teacher(cfg: ExperimentConfig, seed: int, data: DataBundle | None = None, strategies=None, n_labeled=None):
    data = data or prepare_data(cfg, seed, n_labeled)
    hp = replace(cfg.hp, seed=seed)
    model, record = train_teacher(
        data.labeled,
        hp,
        cfg.backbone,
        validation=data.validation,
        strategies=strategies or cfg.strategies,
        image_size=cfg.image_size,
    )
    return model, record, evaluate_model(model, data.test, cfg.image_size)


def run_student(cfg: ExperimentConfig, seed: int, teacher: ModelHandle, data: DataBundle | None = None):
    data = data or prepare_data(cfg, seed)
    hp = replace(cfg.hp, seed=seed)
    model, record = train_student(
        teacher,
        data.labeled,
        data.unlabeled,
        hp,
        cfg.backbone,
        validation=data.validation,
        image_size=cfg.image_size,
        weak_aug=cfg.strategies.weak_aug,
    )
    return model, record, evaluate_model(model, data.test, cfg.image_size)


def aggregate_reports(reports: dict[int, MetricsReport]) -> dict:
    """Mean and (population) standard deviation of every scalar metric across seeds."""
    flats = [r.to_flat() for r in reports.values()]
    keys = [k for k, v in flats[0].items() if isinstance(v, (int, float)) and k != "n_eval"]
    out = {"seeds": sorted(reports)}
    for k in keys:
        vals = np.array([f[k] for f in flats if f.get(k) is not None], dtype=float)
        out[f"{k}.mean"] = float(vals.mean()) if vals.size else None
        out[f"{k}.std"] = float(vals.std()) if vals.size else None
    return out


@dataclass
class AblationResult:
    # reports[n_labeled][seed][variant]; a None entry marks a failed variant
    reports: dict
    n_labeled: list

    def table(self) -> dict:
        rows = {}
        for variant in VARIANTS:
            rows[variant] = {}
            for n in self.n_labeled:
                runs = [self.reports[n][s].get(variant) for s in self.reports[n]]
                if not runs or any(r is None for r in runs):
                    rows[variant][n] = None
                else:
                    rows[variant][n] = (
                        float(np.mean([r.w_auc for r in runs])),
                        float(np.mean([r.w_prc for r in runs])),
                    )
        return rows

    def to_text(self) -> str:
        return format_ablation_table(self.table(), self.n_labeled)

    def to_json(self) -> str:
        rows = {
            v: {str(n): (None if pair is None else {"w_auc": pair[0], "w_prc": pair[1]}) for n, pair in r.items()}
            for v, r in self.table().items()
        }
        per_seed = {
            str(n): {
                str(s): {v: (None if rep is None else rep.to_flat()) for v, rep in by_var.items()}
                for s, by_var in by_seed.items()
            }
            for n, by_seed in self.reports.items()
        }
        return json.dumps({"table": rows, "per_seed": per_seed}, indent=2, sort_keys=True) + "\n"

    @property
    def failed(self) -> bool:
        return any(r is None for by_seed in self.reports.values() for d in by_seed.values() for r in d.values())


def run_ablation(cfg: ExperimentConfig, out_dir: Path | None = None) -> AblationResult:
    """Cumulative variants W-Aug, +Mixup, +CT, +ST for every labeled-set size and seed.

    The +ST student distills from the +CT teacher of the same seed. A variant
    that raises is recorded as ``None`` and the sweep continues.
    """
    reports: dict = {}
    for n in cfg.sweep():
        reports[n] = {}
        for seed in cfg.seeds:
            data = prepare_data(cfg, seed, n)
            by_var: dict = {}
            teacher = None
            for variant, strategies in VARIANTS.items():
                try:
                    if strategies.self_train:
                        if teacher is None:
                            raise RuntimeError("no +CT teacher available for self-training")
                        model, record, report = run_student(cfg, seed, teacher, data)
                    else:
                        model, record, report = run_teacher(cfg, seed, data, strategies)
                        if strategies.ct:
                            teacher = model
                except Exception as e:  # recorded as a failure marker
                    log.error("variant %r (N_l=%d, seed=%d) failed: %s", variant, n, seed, e)
                    by_var[variant] = None
                    continue
                by_var[variant] = report
                log.info("N_l=%d seed=%d %-26s W-AUC %.4f W-PRC %.4f", n, seed, variant, report.w_auc, report.w_prc)
                if out_dir is not None:
                    d = Path(out_dir) / f"n{n}" / f"seed_{seed}" / _slug(variant)
                    d.mkdir(parents=True, exist_ok=True)
                    write_train_log(d / "train_log.jsonl", record)
                    write_metrics(d, report)
            reports[n][seed] = by_var
    result = AblationResult(reports, cfg.sweep())
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "ablation.json").write_text(result.to_json())
        (out_dir / "ablation.txt").write_text(result.to_text())
    return result


def _slug(variant: str) -> str:
    return variant.lower().replace(".", "").replace(" + ", "_").replace("-", "").replace(" ", "_")
