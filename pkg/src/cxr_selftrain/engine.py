"""Teacher training with mixup + confidence tempering, then noisy-student self-training."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .data.augment import sample_rng, weak_augment
from .data.datasets import LabeledDataset, UnlabeledDataset
from .data.preprocess import IMAGE_SIZE
from .metrics import UndefinedMetricError, compute_report
from .models import ModelHandle, build_backbone, to_model_input

log = logging.getLogger(__name__)

# augmentation streams, so labeled/unlabeled views never share a generator
STREAM_TEACHER_LAB = 0
STREAM_STUDENT_LAB = 1
STREAM_STUDENT_UNLAB = 2


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss term {term!r} ({value}) at epoch {epoch}, step {step}")
        self.term = term
        self.epoch = epoch
        self.step = step


@dataclass
class HyperParams:
    # mixup Beta(alpha, alpha) concentration
    alpha: float = 0.3
    # confidence tempering thresholds tau_l, tau_h
    tau_low: float = 0.35
    tau_high: float = 0.75
    # sharpening strength gamma
    gamma: float = 0.5
    # beta_c, beta_e^l, beta_e^u, beta_c^u
    beta_ct: float = 0.1
    beta_lab: float = 1.0
    beta_unlab: float = 0.8
    beta_ct_unlab: float = 0.1
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_milestone_frac: float = 2 / 3
    batch_size: int = 100
    weight_decay: float = 1e-4
    momentum_beta1: float = 0.9
    epochs_teacher: int = 15
    epochs_student: int = 15
    seed: int = 0
    # pin lambda instead of drawing it (debugging / equivalence checks)
    fixed_lambda: float | None = None

    def __post_init__(self):
        self.ct_config()
        self.sharpen_config()
        self.loss_weights()
        if not self.alpha > 0:
            raise losses.ParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise losses.ParameterError(f"fixed_lambda must lie in [0, 1], got {self.fixed_lambda}")
        if self.batch_size < 2:
            raise losses.ParameterError("batch_size must be >= 2 so mixup has pairs")
        if self.epochs_teacher < 1 or self.epochs_student < 1:
            raise losses.ParameterError("epoch counts must be >= 1")
        if not self.learning_rate > 0:
            raise losses.ParameterError("learning_rate must be > 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise losses.ParameterError("lr_decay_factor must lie in (0, 1]")
        if not 0.0 <= self.momentum_beta1 < 1.0:
            raise losses.ParameterError("momentum_beta1 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise losses.ParameterError("weight_decay must be >= 0")

    def ct_config(self) -> losses.CTConfig:
        return losses.CTConfig(self.tau_low, self.tau_high)

    def sharpen_config(self) -> losses.SharpenConfig:
        return losses.SharpenConfig(self.gamma)

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.beta_ct, self.beta_lab, self.beta_unlab, self.beta_ct_unlab)

    def lr_milestone(self, epochs: int) -> int:
        return max(1, int(round(self.lr_milestone_frac * epochs)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Strategies:
    weak_aug: bool = True
    mixup: bool = True
    ct: bool = True
    self_train: bool = True


@dataclass
class TrainRunRecord:
    role: str
    weights: dict
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_w_auc: float | None = None
    optimizer_state: dict | None = field(default=None, repr=False)
    rng_state: dict | None = field(default=None, repr=False)
    wall_clock: float = 0.0

    def epoch_losses(self, key: str = "total") -> list[float]:
        return [e[key] for e in self.epochs]


BackboneFactory = Callable[[], nn.Module]


def _factory(backbone, num_classes: int) -> tuple[BackboneFactory, str]:
    if isinstance(backbone, str):
        return (lambda: build_backbone(backbone, num_classes)), backbone
    return backbone, getattr(backbone, "__name__", "custom")


def init_model(backbone, num_classes: int, seed: int) -> ModelHandle:
    """Build a backbone with weights drawn from a private torch RNG seeded by ``seed``."""
    factory, name = _factory(backbone, num_classes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory()
    return ModelHandle(module, backbone=name, num_classes=num_classes)


def _optimizer(module: nn.Module, hp: HyperParams, epochs: int):
    opt = torch.optim.Adam(
        module.parameters(),
        lr=hp.learning_rate,
        betas=(hp.momentum_beta1, 0.999),
        weight_decay=hp.weight_decay,
    )
    sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=[hp.lr_milestone(epochs)], gamma=hp.lr_decay_factor
    )
    return opt, sched


def augment_views(images: np.ndarray, indices, seed: int, epoch: int, stream: int) -> np.ndarray:
    """Weakly augmented copies of ``images[indices]``; each sample has its own generator."""
    out = np.empty((len(indices),) + images.shape[1:], dtype=np.float32)
    for k, i in enumerate(indices):
        out[k] = weak_augment(images[i], sample_rng(seed, i, epoch, stream))
    return out


class _CyclingBatches:
    """Endless shuffled mini-batches over ``n`` items; incomplete tails are dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.bs > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.bs]
        self._pos += self.bs
        return idx


def _check_finite(terms: dict, epoch: int, step: int) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, epoch, step, v)


def _validate(model: ModelHandle, validation, image_size: int):
    if validation is None or len(validation) == 0:
        return None, None
    try:
        rep = compute_report(model.predict(validation.images(image_size)), validation.labels)
    except UndefinedMetricError:
        return None, None
    return rep.w_auc, rep.w_prc


def _draw_lambda(hp: HyperParams, use_mixup: bool, rng: np.random.Generator) -> float:
    if not use_mixup:
        return 1.0
    if hp.fixed_lambda is not None:
        return float(hp.fixed_lambda)
    return losses.sample_lambda(hp.alpha, rng)


def mixup_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random partner index for each of ``n`` samples with no sample paired to itself.

    A shuffled order is read as one cycle and every sample is paired with its
    successor, so for ``n = 2`` the single pair (0, 1) is always used.
    """
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def _summarize_epoch(steps: list[dict], keys) -> dict:
    return {k: float(np.mean([s[k] for s in steps])) if steps else float("nan") for k in keys}


def train_teacher(
    labeled: LabeledDataset,
    hp: HyperParams,
    backbone="tiny_cnn",
    *,
    validation: LabeledDataset | None = None,
    strategies: Strategies = Strategies(),
    image_size: int = IMAGE_SIZE,
) -> tuple[ModelHandle, TrainRunRecord]:
    """Train the teacher on labeled data only.

    Each step: weak augmentation, one Beta(alpha, alpha) draw, mixup of the
    batch with a random permutation of itself, then mixup BCE plus
    ``beta_ct`` times the summed confidence-tempering terms. The returned
    model holds the weights of the epoch with the best validation W-AUC (the
    last epoch when no validation set is given).
    """
    if len(labeled) == 0:
        raise ValueError("labeled dataset is empty")
    num_classes = len(labeled.classes)
    images = labeled.images(image_size)
    labels = torch.as_tensor(labeled.labels, dtype=torch.float64)
    bs = min(hp.batch_size, len(labeled))
    if bs < 2:
        raise ValueError("need at least two labeled samples for mixup pairs")

    weights = hp.loss_weights()
    if not strategies.ct:
        weights = losses.LossWeights(0.0, weights.beta_lab, weights.beta_unlab, weights.beta_ct_unlab)
    ct_cfg = hp.ct_config()

    model = init_model(backbone, num_classes, hp.seed)
    opt, sched = _optimizer(model.module, hp, hp.epochs_teacher)
    rng = np.random.default_rng([hp.seed, 100])
    record = TrainRunRecord(role="teacher", weights=asdict(weights))
    best_state, best_auc = None, -math.inf
    t0 = time.perf_counter()

    for epoch in range(hp.epochs_teacher):
        model.module.train()
        lr = opt.param_groups[0]["lr"]
        te = time.perf_counter()
        order = rng.permutation(len(labeled))
        epoch_steps = []
        for step in range(len(labeled) // bs):
            idx = order[step * bs : (step + 1) * bs]
            if strategies.weak_aug:
                x = augment_views(images, idx, hp.seed, epoch, STREAM_TEACHER_LAB)
            else:
                x = images[idx]
            x = torch.from_numpy(np.ascontiguousarray(x))
            y = labels[idx]
            lam = _draw_lambda(hp, strategies.mixup, rng)
            perm = torch.from_numpy(mixup_partners(bs, rng)) if strategies.mixup else torch.arange(bs)
            x_mix, _ = losses.mixup_interpolate(x, x[perm], y, y[perm], lam)

            probs = torch.sigmoid(model.module(to_model_input(x_mix))).double()
            mix = losses.mixup_loss(probs, y, y[perm], lam)
            ct = losses.confidence_tempering(probs, ct_cfg)
            total = losses.teacher_total_loss(mix, ct, weights)
            _check_finite({"mixup": mix, "ct": ct.sum(), "total": total}, epoch, step)

            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            entry = {
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "lam": lam,
                "mixup": mix.item(),
                "ct": ct.sum().item(),
                "total": total.item(),
            }
            epoch_steps.append(entry)
        sched.step()
        record.steps.extend(epoch_steps)

        val_auc, val_prc = _validate(model, validation, image_size)
        summary = _summarize_epoch(epoch_steps, ("mixup", "ct", "total"))
        record.epochs.append(
            {"epoch": epoch, "lr": lr, **summary, "val_w_auc": val_auc, "val_w_prc": val_prc,
             "seconds": time.perf_counter() - te}
        )
        score = val_auc if val_auc is not None else -math.inf
        if best_state is None or score > best_auc or val_auc is None:
            best_state, best_auc = copy.deepcopy(model.module.state_dict()), score
            record.best_epoch, record.best_val_w_auc = epoch, val_auc
        log.info("teacher epoch %d: loss %.4f val W-AUC %s", epoch, summary["total"], val_auc)

    record.optimizer_state = opt.state_dict()
    record.rng_state = rng.bit_generator.state
    record.wall_clock = time.perf_counter() - t0
    model.module.load_state_dict(best_state)
    model.module.eval()
    return model, record


def generate_pseudo_labels(teacher: ModelHandle, unlab_batch) -> np.ndarray:
    """Raw teacher probabilities for (already augmented) unlabeled images; no gradients."""
    return teacher.predict(unlab_batch)


def student_batch_plan(n_lab: int, n_unlab: int, batch_size: int) -> tuple[int, int, int]:
    """Split each student step's batch between the two sets in proportion to their sizes.

    One epoch is then a single pass over both sets, so a small labeled set is
    not cycled many times per epoch. Returns (labeled per step, unlabeled per
    step, steps per epoch).
    """
    if n_unlab < 2:
        raise ValueError("need at least two unlabeled samples for mixup pairs")
    if n_lab < 1:
        raise ValueError("labeled dataset is empty")
    steps = max(1, (n_lab + n_unlab) // batch_size)
    bs_l = max(1, n_lab // steps)
    bs_u = max(2, n_unlab // steps)
    return bs_l, bs_u, steps


def train_student(
    teacher: ModelHandle,
    labeled: LabeledDataset,
    unlabeled: UnlabeledDataset,
    hp: HyperParams,
    backbone="tiny_cnn",
    *,
    validation: LabeledDataset | None = None,
    image_size: int = IMAGE_SIZE,
    weak_aug: bool = True,
) -> tuple[ModelHandle, TrainRunRecord]:
    """Self-training of a freshly initialized student against the frozen teacher.

    Every epoch the unlabeled set is re-augmented and re-labeled by the
    teacher, the pseudo-labels are sharpened, and each step combines labeled
    BCE, mixup distillation on unlabeled pairs and confidence tempering of
    the student's unlabeled predictions.
    """
    if len(unlabeled) == 0:
        raise ValueError("unlabeled dataset is empty")
    if len(labeled) == 0:
        raise ValueError("labeled dataset is empty")
    num_classes = len(labeled.classes)
    lab_images = labeled.images(image_size)
    unlab_images = unlabeled.images(image_size)
    labels = torch.as_tensor(labeled.labels, dtype=torch.float64)
    bs_l, bs_u, n_steps = student_batch_plan(len(labeled), len(unlabeled), hp.batch_size)

    weights = hp.loss_weights()
    ct_cfg = hp.ct_config()
    sharp_cfg = hp.sharpen_config()

    teacher_params = list(teacher.module.parameters())
    grad_flags = [p.requires_grad for p in teacher_params]
    teacher.module.eval()
    for p in teacher_params:
        p.requires_grad_(False)

    student = init_model(backbone, num_classes, hp.seed + 1)
    opt, sched = _optimizer(student.module, hp, hp.epochs_student)
    rng = np.random.default_rng([hp.seed, 200])
    lab_batches = _CyclingBatches(len(labeled), bs_l, rng)
    unlab_batches = _CyclingBatches(len(unlabeled), bs_u, rng)

    record = TrainRunRecord(role="student", weights=asdict(weights))
    best_state, best_auc = None, -math.inf
    t0 = time.perf_counter()
    all_unlab = np.arange(len(unlabeled))
    try:
        for epoch in range(hp.epochs_student):
            te = time.perf_counter()
            lr = opt.param_groups[0]["lr"]
            if weak_aug:
                unlab_view = augment_views(unlab_images, all_unlab, hp.seed, epoch, STREAM_STUDENT_UNLAB)
            else:
                unlab_view = unlab_images
            pseudo = torch.from_numpy(generate_pseudo_labels(teacher, unlab_view))
            targets = losses.sharpen(pseudo, sharp_cfg)

            student.module.train()
            epoch_steps = []
            for step in range(n_steps):
                li = lab_batches.next()
                ui = unlab_batches.next()
                if weak_aug:
                    x_l = augment_views(lab_images, li, hp.seed, epoch, STREAM_STUDENT_LAB)
                else:
                    x_l = lab_images[li]
                x_l = torch.from_numpy(np.ascontiguousarray(x_l))
                x_u = torch.from_numpy(np.ascontiguousarray(unlab_view[ui]))
                t_u = targets[ui]
                lam = _draw_lambda(hp, True, rng)
                perm = torch.from_numpy(mixup_partners(len(ui), rng))
                x_mix, _ = losses.mixup_interpolate(x_u, x_u[perm], t_u, t_u[perm], lam)

                probs = torch.sigmoid(student.module(to_model_input(torch.cat([x_l, x_mix])))).double()
                p_l, p_u = probs[: len(li)], probs[len(li) :]
                bce = losses.bce_loss(p_l, labels[li])
                dist = losses.distillation_loss(p_u, t_u, t_u[perm], lam)
                ct = losses.confidence_tempering(p_u, ct_cfg)
                total = losses.student_total_loss(bce, dist, ct, weights)
                _check_finite({"bce": bce, "dist": dist, "ct": ct.sum(), "total": total}, epoch, step)

                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                epoch_steps.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "lr": lr,
                        "lam": lam,
                        "bce": bce.item(),
                        "dist": dist.item(),
                        "ct": ct.sum().item(),
                        "total": total.item(),
                    }
                )
            sched.step()
            record.steps.extend(epoch_steps)

            val_auc, val_prc = _validate(student, validation, image_size)
            summary = _summarize_epoch(epoch_steps, ("bce", "dist", "ct", "total"))
            record.epochs.append(
                {"epoch": epoch, "lr": lr, **summary, "val_w_auc": val_auc, "val_w_prc": val_prc,
                 "pseudo_mean": float(pseudo.mean()), "seconds": time.perf_counter() - te}
            )
            score = val_auc if val_auc is not None else -math.inf
            if best_state is None or score > best_auc or val_auc is None:
                best_state, best_auc = copy.deepcopy(student.module.state_dict()), score
                record.best_epoch, record.best_val_w_auc = epoch, val_auc
            log.info("student epoch %d: loss %.4f val W-AUC %s", epoch, summary["total"], val_auc)
    finally:
        for p, flag in zip(teacher_params, grad_flags):
            p.requires_grad_(flag)

    record.optimizer_state = opt.state_dict()
    record.rng_state = rng.bit_generator.state
    record.wall_clock = time.perf_counter() - t0
    student.module.load_state_dict(best_state)
    student.module.eval()
    return student, record


def evaluate_model(model: ModelHandle, ds: LabeledDataset, image_size: int = IMAGE_SIZE):
    """Score every sample without augmentation and build a metrics report."""
    if len(ds) == 0:
        raise ValueError("evaluation dataset is empty")
    return compute_report(model.predict(ds.images(image_size)), ds.labels, ds.classes)
