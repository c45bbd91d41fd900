"""Procedural multi-label image generator used as a small stand-in for chest X-rays.

Each class owns one glyph drawn at its own location. A sample contains the
glyph of class ``c`` with probability ``class_marginals[c]``, independently
of the other classes, on a textured noisy background. Glyph contrast and
placement are jittered so the task is learnable but not trivial.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .datasets import CHEXPERT_COLUMNS, CLASSES, LabeledDataset, SampleRecord

RENDER_SIZE = 64
CONTRAST = (0.25, 0.6)
NOISE = 0.12

# glyph anchor (x, y) as a fraction of the image size
_ANCHORS = {
    "AT": (0.30, 0.30),
    "CA": (0.55, 0.55),
    "CO": (0.72, 0.28),
    "ED": (0.30, 0.72),
    "PE": (0.72, 0.75),
}


@dataclass(frozen=True)
class GlyphPlan:
    cls: str
    dx: float
    dy: float
    radius: float
    contrast: float


@dataclass(frozen=True)
class SamplePlan:
    labels: np.ndarray
    glyphs: tuple[GlyphPlan, ...]
    background_seed: int
    patient_id: str


def _validate_marginals(marginals) -> np.ndarray:
    m = np.asarray(marginals, dtype=float)
    if m.shape != (len(CLASSES),):
        raise ValueError(f"class_marginals must have {len(CLASSES)} entries, got {m.shape}")
    bad = np.flatnonzero((m < 0) | (m > 1) | ~np.isfinite(m))
    if bad.size:
        raise ValueError(f"class_marginals[{CLASSES[bad[0]]}]={m[bad[0]]} outside [0, 1]")
    return m


def plan_samples(n_samples: int, class_marginals, seed: int, contrast=CONTRAST) -> list[SamplePlan]:
    """Draw labels, glyph jitter and patient ids for ``n_samples`` images."""
    marg = _validate_marginals(class_marginals)
    rng = np.random.default_rng(seed)
    plans = []
    patient, left = 0, 0
    for _ in range(n_samples):
        if left == 0:
            patient += 1
            left = int(rng.integers(1, 4))
        left -= 1
        labels = (rng.random(len(CLASSES)) < marg).astype(np.float32)
        glyphs = []
        for c, name in enumerate(CLASSES):
            jitter = rng.uniform(-0.06, 0.06, size=2)
            radius = rng.uniform(0.07, 0.11)
            strength = rng.uniform(*contrast)
            if labels[c]:
                glyphs.append(GlyphPlan(name, float(jitter[0]), float(jitter[1]), float(radius), float(strength)))
        plans.append(
            SamplePlan(
                labels=labels,
                glyphs=tuple(glyphs),
                background_seed=int(rng.integers(2**31)),
                patient_id=f"patient{patient:05d}",
            )
        )
    return plans


def _draw_glyph(canvas: np.ndarray, g: GlyphPlan) -> None:
    size = canvas.shape[0]
    ax, ay = _ANCHORS[g.cls]
    cx, cy = (ax + g.dx) * size, (ay + g.dy) * size
    r = g.radius * size
    mask = np.zeros_like(canvas)
    center = (int(round(cx)), int(round(cy)))
    if g.cls == "AT":  # horizontal bar
        cv2.rectangle(mask, (int(cx - r), int(cy - r / 3)), (int(cx + r), int(cy + r / 3)), 1.0, -1)
    elif g.cls == "CA":  # disc
        cv2.circle(mask, center, int(round(r)), 1.0, -1)
    elif g.cls == "CO":  # ring
        cv2.circle(mask, center, int(round(r)), 1.0, max(1, int(round(r / 3))))
    elif g.cls == "ED":  # cross
        t = max(1, int(round(r / 3)))
        cv2.line(mask, (int(cx - r), int(cy - r)), (int(cx + r), int(cy + r)), 1.0, t)
        cv2.line(mask, (int(cx - r), int(cy + r)), (int(cx + r), int(cy - r)), 1.0, t)
    else:  # PE: triangle
        pts = np.array([[cx, cy - r], [cx - r, cy + r], [cx + r, cy + r]], dtype=np.int32)
        cv2.fillPoly(mask, [pts], 1.0)
    canvas += g.contrast * mask


def render(plan: SamplePlan, size: int = RENDER_SIZE, noise: float = NOISE) -> np.ndarray:
    """Render one planned sample to an 8-bit grayscale image."""
    rng = np.random.default_rng(plan.background_seed)
    # smooth low-frequency "anatomy" plus per-pixel noise
    coarse = rng.normal(0.0, 1.0, size=(8, 8)).astype(np.float32)
    texture = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    canvas = 0.35 + 0.06 * texture
    for g in plan.glyphs:
        _draw_glyph(canvas, g)
    canvas = canvas + rng.normal(0.0, noise, size=canvas.shape).astype(np.float32)
    return np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(
    n_samples: int,
    class_marginals,
    seed: int,
    size: int = RENDER_SIZE,
    contrast=CONTRAST,
    noise: float = NOISE,
) -> LabeledDataset:
    """In-memory synthetic dataset; labels record which glyphs were drawn."""
    plans = plan_samples(n_samples, class_marginals, seed, contrast)
    records = [
        SampleRecord(
            patient_id=p.patient_id,
            label_row=p.labels,
            image_path=f"{p.patient_id}/study1/view{i}_frontal.png",
            image=render(p, size, noise),
        )
        for i, p in enumerate(plans)
    ]
    return LabeledDataset(records)


def write_dataset(ds: LabeledDataset, out_dir, csv_name: str = "labels.csv") -> Path:
    """Persist as PNG files plus a CheXpert-format labels CSV readable by ``ingest_csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["Path", "Sex", "Age", "Frontal/Lateral", "AP/PA"] + [CHEXPERT_COLUMNS[c] for c in CLASSES]
    csv_path = out_dir / csv_name
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in ds:
            dest = out_dir / rec.image_path
            dest.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(rec.load_image(ds.root)).save(dest, format="PNG")
            w.writerow([rec.image_path, "Unknown", "", "Frontal", "PA"] + [f"{v:.1f}" for v in rec.label_row])
    return csv_path
