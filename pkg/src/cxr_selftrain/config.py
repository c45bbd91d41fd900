"""Experiment configuration: dataclasses plus a commented YAML representation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data.datasets import CLASSES
from .engine import HyperParams, Strategies
from .losses import ParameterError

# Table 1 train-split positives over 138,655 images, canonical (AT, CA, CO, ED, PE) order
TABLE1_TRAIN_COUNTS = {"AT": 23810, "CA": 17572, "CO": 10040, "ED": 36983, "PE": 58141}
TABLE1_TRAIN_IMAGES = 138655
TABLE1_MARGINALS = [TABLE1_TRAIN_COUNTS[c] / TABLE1_TRAIN_IMAGES for c in CLASSES]

ENV_CHEXPERT_ROOT = "CHEXPERT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DatasetSpec:
    # "synthetic": generated in memory; "csv": CheXpert-format train/test CSVs
    kind: str = "synthetic"
    n_pool: int = 2600
    n_test: int = 1500
    marginals: list = field(default_factory=lambda: list(TABLE1_MARGINALS))
    render_size: int = 32
    contrast: list = field(default_factory=lambda: [0.08, 0.3])
    noise: float = 0.2
    data_seed: int = 11
    train_csv: str | None = None
    test_csv: str | None = None
    image_root: str | None = None
    validation_fraction: float = 0.15
    # used only when no test_csv is given
    test_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_labeled: int = 200
    n_unlabeled: int = 2000
    # labeled-set sizes swept by the ablation; empty means [n_labeled]
    n_labeled_sweep: list = field(default_factory=list)
    hp: HyperParams = field(default_factory=HyperParams)
    strategies: Strategies = field(default_factory=Strategies)
    backbone: str = "tiny_cnn"
    image_size: int = 224
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0])

    def sweep(self) -> list[int]:
        return list(self.n_labeled_sweep) or [self.n_labeled]

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        ds = self.dataset
        if ds.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {ds.kind!r}")
        if len(ds.marginals) != len(CLASSES):
            raise ConfigError(f"dataset.marginals needs {len(CLASSES)} entries, got {len(ds.marginals)}")
        for c, m in zip(CLASSES, ds.marginals):
            if not 0.0 <= float(m) <= 1.0:
                raise ConfigError(f"dataset.marginals[{c}]={m} outside [0, 1]")
        if len(ds.contrast) != 2 or not 0 <= ds.contrast[0] <= ds.contrast[1]:
            raise ConfigError(f"dataset.contrast must be [low, high] with 0 <= low <= high, got {ds.contrast}")
        if not 0.0 <= ds.validation_fraction < 1.0:
            raise ConfigError(f"dataset.validation_fraction={ds.validation_fraction} outside [0, 1)")
        if not 0.0 <= ds.test_fraction < 1.0:
            raise ConfigError(f"dataset.test_fraction={ds.test_fraction} outside [0, 1)")
        if ds.kind == "csv":
            if not ds.train_csv:
                raise ConfigError("dataset.train_csv is required when dataset.kind is 'csv'")
            if check_paths:
                for name in ("train_csv", "test_csv", "image_root"):
                    value = getattr(ds, name)
                    if value and not Path(value).exists():
                        raise ConfigError(f"dataset.{name}: path {value!r} does not exist")
        for n in [self.n_labeled, *self.sweep()]:
            if int(n) < 2:
                raise ConfigError(f"n_labeled must be >= 2, got {n}")
        if self.n_unlabeled < 0:
            raise ConfigError(f"n_unlabeled must be >= 0, got {self.n_unlabeled}")
        if self.strategies.self_train and self.n_unlabeled <= 0:
            raise ConfigError("strategies.self_train requires n_unlabeled > 0")
        if self.strategies.mixup and not self.strategies.weak_aug:
            raise ConfigError("strategies.mixup requires strategies.weak_aug (augmentation precedes mixup)")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        return self


_COMMENTS = {
    "alpha": "mixup: lambda ~ Beta(alpha, alpha)",
    "tau_low": "confidence tempering tau_l",
    "tau_high": "confidence tempering tau_h",
    "gamma": "sharpening strength gamma",
    "beta_ct": "teacher CT weight beta_c",
    "beta_lab": "student labeled BCE weight beta_e^l",
    "beta_unlab": "student distillation weight beta_e^u",
    "beta_ct_unlab": "student unlabeled CT weight beta_c^u",
    "momentum_beta1": "Adam beta_1 ('momentum')",
    "epochs_teacher": "n (teacher epochs)",
    "epochs_student": "m (student epochs)",
    "lr_decay_factor": "learning rate multiplied by this once, at lr_milestone_frac of the epochs",
    "n_labeled": "N_l",
    "n_unlabeled": "N_u",
    "marginals": "per-class positive rate, order " + ", ".join(CLASSES),
}


def _scalar(v) -> str:
    if isinstance(v, float):
        text = repr(v)
        if "e" in text and "." not in text.split("e")[0]:
            mant, exp = text.split("e")
            text = f"{mant}.0e{exp}"
        return text
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_scalar(x) for x in v) + "]"
    return json.dumps(v)


def _emit(d: dict, indent: int = 0) -> list[str]:
    lines = []
    pad = "  " * indent
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"{pad}{k}:")
            lines.extend(_emit(v, indent + 1))
        else:
            line = f"{pad}{k}: {_scalar(v)}"
            if k in _COMMENTS:
                line += f"  # {_COMMENTS[k]}"
            lines.append(line)
    return lines


def dump_config(cfg: ExperimentConfig) -> str:
    header = ["# cxr_selftrain experiment configuration"]
    return "\n".join(header + _emit(asdict(cfg))) + "\n"


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if name in ("dataset", "hp", "strategies"):
            sub = {"dataset": DatasetSpec, "hp": HyperParams, "strategies": Strategies}[name]
            kwargs[name] = _build(sub, value, name)
            continue
        key = f"{where}.{name}" if where else name
        try:
            if isinstance(current, bool):
                if not isinstance(value, bool):
                    raise TypeError
            elif isinstance(current, float) or name == "fixed_lambda":
                value = None if value is None and name == "fixed_lambda" else float(value)
            elif isinstance(current, int):
                if isinstance(value, bool) or float(value) != int(value):
                    raise TypeError
                value = int(value)
            elif isinstance(current, list):
                value = list(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: invalid value {value!r}") from None
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ParameterError as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def full_scale_dataset(root=None) -> DatasetSpec:
    """CheXpert layout under ``$CHEXPERT_ROOT``: train.csv for training, valid.csv as the test set."""
    root = Path(root or os.environ.get(ENV_CHEXPERT_ROOT, ""))
    return DatasetSpec(
        kind="csv",
        train_csv=str(root / "train.csv"),
        test_csv=str(root / "valid.csv"),
        image_root=str(root),
    )


def desk_scale_config(**overrides) -> ExperimentConfig:
    """Small synthetic setup that trains on a CPU in minutes."""
    cfg = ExperimentConfig(
        n_labeled=200,
        n_unlabeled=2000,
        hp=HyperParams(
            alpha=0.3,
            learning_rate=2e-3,
            batch_size=32,
            epochs_teacher=60,
            epochs_student=15,
            beta_ct=0.1,
            beta_ct_unlab=0.1,
        ),
        backbone="tiny_cnn",
        image_size=32,
        seeds=[0, 1, 2, 3, 4],
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
