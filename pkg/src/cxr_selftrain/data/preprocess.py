"""Deterministic image preprocessing: letterbox resize, equalization, normalization."""

from __future__ import annotations

import cv2
import numpy as np

IMAGE_SIZE = 224
PIXEL_MEAN = 128.0
PIXEL_STD = 64.0
PAD_VALUE = 0


def letterbox(raw: np.ndarray, size: int = IMAGE_SIZE) -> tuple[np.ndarray, tuple[int, int]]:
    """Resize so the longer side equals ``size`` and pad the rest with black.

    Returns the padded ``uint8`` image and the ``(height, width)`` of the
    resized content, which is centered in the square canvas.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {raw.shape}")
    h, w = raw.shape
    scale = size / max(h, w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    img = raw.astype(np.uint8, copy=False)
    if (new_h, new_w) != (h, w):
        img = cv2.resize(img, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((size, size), PAD_VALUE, dtype=np.uint8)
    top = (size - new_h) // 2
    left = (size - new_w) // 2
    canvas[top : top + new_h, left : left + new_w] = img
    return canvas, (new_h, new_w)


def equalize_histogram(img: np.ndarray) -> np.ndarray:
    """Global 256-bin histogram equalization of an 8-bit image.

    Constant images are returned unchanged.
    """
    img = np.asarray(img, dtype=np.uint8)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    total = cdf[-1]
    if total == cdf_min:
        return img.copy()
    lut = np.round((cdf - cdf_min) * 255.0 / (total - cdf_min))
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[img]


def normalize(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) - PIXEL_MEAN) / PIXEL_STD


def preprocess_gray(raw: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Single-channel version of :func:`preprocess`, shape ``(size, size)``."""
    padded, _ = letterbox(raw, size)
    return normalize(equalize_histogram(padded))


def preprocess(raw: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Turn a raw 8-bit grayscale image into a ``(size, size, 3)`` float32 array.

    Order: letterbox, histogram equalization, ``(x - 128) / 64``, then the
    single channel is replicated three times.
    """
    gray = preprocess_gray(raw, size)
    return np.repeat(gray[:, :, None], 3, axis=2)
