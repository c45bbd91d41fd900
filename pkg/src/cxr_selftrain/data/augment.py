"""Weak affine augmentation (small rotation, shift and scale)."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .preprocess import PAD_VALUE, normalize

ROTATION_RANGE = (-15.0, 15.0)
TRANSLATE_RANGE = (-0.05, 0.05)
SCALE_RANGE = (0.95, 1.05)

# value of a black pixel after normalization; used to fill exposed borders
FILL_VALUE = float(normalize(np.array(PAD_VALUE)))


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        checks = (
            ("rotation_deg", self.rotation_deg, ROTATION_RANGE),
            ("translate_x", self.translate_x, TRANSLATE_RANGE),
            ("translate_y", self.translate_y, TRANSLATE_RANGE),
            ("scale", self.scale, SCALE_RANGE),
        )
        for name, value, (lo, hi) in checks:
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            rotation_deg=float(rng.uniform(*ROTATION_RANGE)),
            translate_x=float(rng.uniform(*TRANSLATE_RANGE)),
            translate_y=float(rng.uniform(*TRANSLATE_RANGE)),
            scale=float(rng.uniform(*SCALE_RANGE)),
        )

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.translate_x == 0.0
            and self.translate_y == 0.0
            and self.scale == 1.0
        )


def apply_affine(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate/scale about the image center, then shift by a fraction of the size.

    Works on ``(H, W)`` and ``(H, W, C)`` float arrays.
    """
    if params.is_identity:
        return img.copy()
    h, w = img.shape[:2]
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), params.rotation_deg, params.scale)
    m[0, 2] += params.translate_x * w
    m[1, 2] += params.translate_y * h
    out = cv2.warpAffine(
        np.ascontiguousarray(img, dtype=np.float32),
        m,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=FILL_VALUE,
    )
    if img.ndim == 3 and out.ndim == 2:
        out = out[:, :, None]
    return out


def weak_augment(img: np.ndarray, rng: np.random.Generator, params: AugmentParams | None = None):
    """Apply one random weak affine transform; ``params`` pins the transform."""
    if params is None:
        params = AugmentParams.sample(rng)
    return apply_affine(img, params)


def sample_rng(base_seed: int, index: int, epoch: int, stream: int = 0) -> np.random.Generator:
    """Per-sample generator keyed on (seed, stream, index, epoch), independent of visit order."""
    return np.random.default_rng([int(base_seed), int(stream), int(index), int(epoch)])
