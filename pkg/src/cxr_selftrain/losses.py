"""Loss terms for mixup training, confidence tempering and mixup distillation.

Every function here is pure: tensors in, tensors out, no module state and no
global RNG. Predictions are sigmoid probabilities (not logits) of shape
``(N, C)``; all reductions are means over samples and classes so that the
loss weights do not depend on batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-7
RHO_FLOOR = 1e-6
INDICATOR_SLOPE = 1e8


class ParameterError(ValueError):
    """A scalar hyper-parameter is outside its admissible range."""


class ShapeError(ValueError):
    """Two tensors that must line up do not."""


@dataclass(frozen=True)
class MixupConfig:
    alpha: float
    lambda_draw: float | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"mixup alpha must be > 0, got {self.alpha}")
        if self.lambda_draw is not None and not 0.0 <= self.lambda_draw <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lambda_draw}")


@dataclass(frozen=True)
class CTConfig:
    tau_low: float = 0.35
    tau_high: float = 0.75
    rho_floor: float = RHO_FLOOR

    def __post_init__(self):
        if not 0.0 < self.tau_low <= self.tau_high < 1.0:
            raise ParameterError(
                f"need 0 < tau_low <= tau_high < 1, got ({self.tau_low}, {self.tau_high})"
            )
        if not 0.0 < self.rho_floor < self.tau_low:
            raise ParameterError(f"rho_floor must be in (0, tau_low), got {self.rho_floor}")

    @property
    def minimizer(self) -> float:
        return math.sqrt(self.tau_low * self.tau_high)


@dataclass(frozen=True)
class SharpenConfig:
    gamma: float = 0.5
    indicator_slope: float = INDICATOR_SLOPE

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.indicator_slope < 1e6:
            raise ParameterError(f"indicator_slope must be >= 1e6, got {self.indicator_slope}")


@dataclass(frozen=True)
class LossWeights:
    beta_ct: float = 0.1
    beta_lab: float = 1.0
    beta_unlab: float = 0.8
    beta_ct_unlab: float = 0.1

    def __post_init__(self):
        for name in ("beta_ct", "beta_lab", "beta_unlab", "beta_ct_unlab"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")


def sample_lambda(cfg: MixupConfig | float, rng: np.random.Generator) -> float:
    """Draw one mixing weight from Beta(alpha, alpha) using ``rng``."""
    alpha = cfg.alpha if isinstance(cfg, MixupConfig) else float(cfg)
    if not alpha > 0:
        raise ParameterError(f"mixup alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mixup_interpolate(x_i, x_j, y_i, y_j, lam: float):
    """Convex combination of two (image, label) pairs with weight ``lam`` on the first."""
    _check_lambda(lam)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"images: shape {tuple(x_i.shape)} does not match {tuple(x_j.shape)}")
    if y_i.shape != y_j.shape:
        raise ShapeError(f"labels: shape {tuple(y_i.shape)} does not match {tuple(y_j.shape)}")
    return lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    _check_same_shape(pred, target, "bce_loss")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def mixup_loss(preds_on_mixed, y_i, y_j, lam: float) -> torch.Tensor:
    """BCE against both label sets of a mixed batch, weighted by ``lam``.

    ``preds_on_mixed`` must come from images mixed with the same ``lam`` and
    the same pairing that produced ``y_i``/``y_j``.
    """
    _check_lambda(lam)
    _check_same_shape(y_i, y_j, "mixup_loss targets")
    return lam * bce_loss(preds_on_mixed, y_i) + (1.0 - lam) * bce_loss(preds_on_mixed, y_j)


def confidence_tempering(pred_batch: torch.Tensor, cfg: CTConfig = CTConfig()) -> torch.Tensor:
    """Per-class penalty on the batch-mean predicted probability.

    Returns a length-C vector ``log(tau_low / rho + rho / tau_high)`` where
    ``rho`` is the column mean of ``pred_batch`` floored at ``cfg.rho_floor``.
    Minimised at ``rho = sqrt(tau_low * tau_high)``.
    """
    if pred_batch.ndim != 2 or pred_batch.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (N, C) batch, got {tuple(pred_batch.shape)}")
    rho = pred_batch.mean(dim=0).clamp_min(cfg.rho_floor)
    return torch.log(cfg.tau_low / rho + rho / cfg.tau_high)


def sharpen(pseudo: torch.Tensor, cfg: SharpenConfig = SharpenConfig()) -> torch.Tensor:
    # steep sigmoid stands in for the 1[y >= 0.5] indicator; equals 0.5 exactly at y == 0.5
    indicator = torch.sigmoid(cfg.indicator_slope * (pseudo - 0.5))
    return (1.0 - cfg.gamma) * pseudo + cfg.gamma * indicator


def bernoulli_kl(target, pred, eps: float = EPS, reduction: str = "mean"):
    """KL(target || pred) between Bernoulli distributions, elementwise.

    ``0 * log 0`` is taken as 0, so hard 0/1 targets are allowed. Accepts
    python floats or tensors; ``reduction='none'`` keeps the elementwise values.
    """
    target = torch.as_tensor(target, dtype=torch.float64) if not torch.is_tensor(target) else target
    pred = torch.as_tensor(pred, dtype=torch.float64) if not torch.is_tensor(pred) else pred
    _check_same_shape(target, pred, "bernoulli_kl")
    p = pred.clamp(eps, 1.0 - eps)
    kl = (
        torch.xlogy(target, target)
        - target * torch.log(p)
        + torch.xlogy(1.0 - target, 1.0 - target)
        - (1.0 - target) * torch.log1p(-p)
    ).clamp_min(0.0)
    if reduction == "none":
        return kl
    if reduction == "mean":
        return kl.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def distillation_loss(student_preds_on_mixed, yhat_i, yhat_j, lam: float) -> torch.Tensor:
    """Mixup form of the distillation cost with the teacher's targets on the left of the KL."""
    _check_lambda(lam)
    _check_same_shape(yhat_i, yhat_j, "distillation_loss targets")
    return lam * bernoulli_kl(yhat_i, student_preds_on_mixed) + (1.0 - lam) * bernoulli_kl(
        yhat_j, student_preds_on_mixed
    )


def _total(terms):
    return terms.sum() if torch.is_tensor(terms) else math.fsum(terms)


def teacher_total_loss(mixup_term, ct_terms, weights: LossWeights):
    return mixup_term + weights.beta_ct * _total(ct_terms)


def student_total_loss(bce_lab, dist, ct_terms_unlab, weights: LossWeights):
    return (
        weights.beta_lab * bce_lab
        + weights.beta_unlab * dist
        + weights.beta_ct_unlab * _total(ct_terms_unlab)
    )
