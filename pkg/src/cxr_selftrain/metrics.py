"""Per-class ROC-AUC / average precision and support-weighted aggregates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data.datasets import CLASSES


class UndefinedMetricError(ValueError):
    """The metric needs both classes (AUC) or at least one positive (AP)."""


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    return y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate: share of positive/negative pairs ranked correctly, ties 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def prc_auc(scores, labels) -> float:
    """Average precision: mean over positives of precision at their rank.

    Scores are sorted in descending order; ties keep the original index order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, n_pos + 1) / ranks
    return float(precisions.mean())


def weighted_aggregate(per_class, supports) -> float:
    """Support-weighted mean; classes whose metric is NaN are dropped and weights renormalized."""
    values = np.asarray(per_class, dtype=np.float64)
    w = np.asarray(supports, dtype=np.float64)
    if values.shape != w.shape:
        raise ValueError(f"per_class {values.shape} and supports {w.shape} differ in shape")
    if np.any(w < 0):
        raise ValueError("supports must be non-negative")
    w = np.where(np.isnan(values), 0.0, w)
    total = w.sum()
    if total <= 0:
        raise ValueError("supports are all zero for the defined classes")
    return float(np.dot(w / total, np.nan_to_num(values)))


def class_weights(per_class, supports) -> np.ndarray:
    values = np.asarray(per_class, dtype=np.float64)
    w = np.where(np.isnan(values), 0.0, np.asarray(supports, dtype=np.float64))
    return w / w.sum()


@dataclass
class MetricsReport:
    per_class_auc: dict[str, float]
    per_class_prc: dict[str, float]
    w_auc: float
    w_prc: float
    class_weights: dict[str, float]
    n_eval: int
    undefined: list[str] = field(default_factory=list)

    def to_flat(self) -> dict:
        out: dict = {}
        for name, d in (("per_class_auc", self.per_class_auc), ("per_class_prc", self.per_class_prc)):
            for c, v in d.items():
                out[f"{name}.{c}"] = None if math.isnan(v) else v
        out["w_auc"] = self.w_auc
        out["w_prc"] = self.w_prc
        for c, v in self.class_weights.items():
            out[f"class_weights.{c}"] = v
        out["n_eval"] = self.n_eval
        out["undefined"] = list(self.undefined)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_flat(cls, d: dict) -> "MetricsReport":
        classes = [k.split(".", 1)[1] for k in d if k.startswith("per_class_auc.")]

        def get(prefix, c):
            v = d[f"{prefix}.{c}"]
            return float("nan") if v is None else float(v)

        return cls(
            per_class_auc={c: get("per_class_auc", c) for c in classes},
            per_class_prc={c: get("per_class_prc", c) for c in classes},
            w_auc=float(d["w_auc"]),
            w_prc=float(d["w_prc"]),
            class_weights={c: float(d[f"class_weights.{c}"]) for c in classes},
            n_eval=int(d["n_eval"]),
            undefined=list(d.get("undefined", [])),
        )

    def to_text(self) -> str:
        classes = list(self.per_class_auc)
        head = f"{'metric':<8}" + "".join(f"{c:>8}" for c in classes) + f"{'weighted':>10}"
        lines = [head, "-" * len(head)]
        for label, d, agg in (("AUC", self.per_class_auc, self.w_auc), ("PRC", self.per_class_prc, self.w_prc)):
            cells = "".join(f"{'n/a':>8}" if math.isnan(v) else f"{v:>8.4f}" for v in d.values())
            lines.append(f"{label:<8}{cells}{agg:>10.4f}")
        cells = "".join(f"{v:>8.4f}" for v in self.class_weights.values())
        lines.append(f"{'weight':<8}{cells}")
        lines.append(f"n_eval = {self.n_eval}")
        if self.undefined:
            lines.append("undefined (excluded, weights renormalized): " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"


def compute_report(scores, labels, classes=CLASSES) -> MetricsReport:
    """Build a :class:`MetricsReport` from an ``N x C`` score matrix and binary labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching N x C")
    aucs, prcs, undefined = [], [], []
    for c in range(scores.shape[1]):
        try:
            aucs.append(roc_auc(scores[:, c], labels[:, c]))
            prcs.append(prc_auc(scores[:, c], labels[:, c]))
        except UndefinedMetricError:
            aucs.append(float("nan"))
            prcs.append(float("nan"))
            undefined.append(classes[c])
    supports = labels.sum(axis=0)
    if len(undefined) == len(classes):
        raise UndefinedMetricError("no class has both positives and negatives")
    w = class_weights(aucs, supports)
    return MetricsReport(
        per_class_auc=dict(zip(classes, aucs)),
        per_class_prc=dict(zip(classes, prcs)),
        w_auc=weighted_aggregate(aucs, supports),
        w_prc=weighted_aggregate(prcs, supports),
        class_weights={c: float(v) for c, v in zip(classes, w)},
        n_eval=int(len(scores)),
        undefined=undefined,
    )


def format_ablation_table(results: dict[str, dict[int, tuple[float, float]]], n_labeled: list[int]) -> str:
    """Text table with one row per variant and (W-AUC, W-PRC) column pairs per labeled-set size.

    ``results[variant][n] = (w_auc, w_prc)``; a missing or ``None`` entry
    prints as ``FAILED``.
    """
    first = 28
    head1 = " " * first + "".join(f"{'N_l = ' + str(n):^20}" for n in n_labeled)
    head2 = f"{'Method':<{first}}" + "".join(f"{'W-AUC':>10}{'W-PRC':>10}" for _ in n_labeled)
    lines = [head1, head2, "-" * len(head2)]
    for variant, row in results.items():
        cells = ""
        for n in n_labeled:
            pair = row.get(n)
            cells += f"{'FAILED':>20}" if pair is None else f"{pair[0]:>10.4f}{pair[1]:>10.4f}"
        lines.append(f"{variant:<{first}}{cells}")
    return "\n".join(lines) + "\n"
