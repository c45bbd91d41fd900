"""Dataset containers, CheXpert-style CSV ingestion and split/subsample helpers."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .preprocess import IMAGE_SIZE, preprocess_gray

CLASSES = ("AT", "CA", "CO", "ED", "PE")
CHEXPERT_COLUMNS = {
    "AT": "Atelectasis",
    "CA": "Cardiomegaly",
    "CO": "Consolidation",
    "ED": "Edema",
    "PE": "Pleural Effusion",
}
PATH_COLUMN = "Path"
META_COLUMNS = ("Path", "Sex", "Age", "Frontal/Lateral", "AP/PA")

_PATIENT_RE = re.compile(r"(patient\d+)")


class DatasetFormatError(ValueError):
    """The input file is readable but does not have the expected layout."""


@dataclass(frozen=True, eq=False)
class SampleRecord:
    patient_id: str
    label_row: np.ndarray | None = None
    image_path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.image_path is None and self.image is None:
            raise ValueError("a record needs either image_path or an in-memory image")

    def load_image(self, root: Path | None = None) -> np.ndarray:
        if self.image is not None:
            return self.image
        return load_grayscale(resolve_image_path(self.image_path, root))


def load_grayscale(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def resolve_image_path(rel: str, root: Path | None) -> Path:
    """CheXpert paths start with the dataset folder name; accept either layout."""
    p = Path(rel)
    if root is None or p.is_absolute():
        return p
    root = Path(root)
    direct = root / p
    if direct.exists() or len(p.parts) < 2:
        return direct
    stripped = root / Path(*p.parts[1:])
    return stripped if stripped.exists() else direct


class _BaseDataset:
    def __init__(self, records, root: Path | str | None = None, classes=CLASSES):
        self.records: list[SampleRecord] = list(records)
        self.root = Path(root) if root is not None else None
        self.classes = tuple(classes)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        out = type(self)([self.records[i] for i in indices], root=self.root, classes=self.classes)
        out._cache = {size: arr[indices] for size, arr in self._cache.items()}
        return out

    def images(self, size: int = IMAGE_SIZE) -> np.ndarray:
        """Preprocessed single-channel images, ``(N, size, size)`` float32, cached per size."""
        if size not in self._cache:
            out = np.empty((len(self.records), size, size), dtype=np.float32)
            for i, rec in enumerate(self.records):
                out[i] = preprocess_gray(rec.load_image(self.root), size)
            self._cache[size] = out
        return self._cache[size]


class LabeledDataset(_BaseDataset):
    """Images with a fully observed ``N x C`` binary label matrix."""

    def __init__(self, records, root=None, classes=CLASSES):
        super().__init__(records, root, classes)
        for rec in self.records:
            if rec.label_row is None or len(rec.label_row) != len(self.classes):
                raise ValueError(f"record for {rec.patient_id} lacks a {len(self.classes)}-label row")

    @property
    def labels(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(self.classes)), dtype=np.float32)
        return np.stack([r.label_row for r in self.records]).astype(np.float32)

    def marginals(self) -> np.ndarray:
        return self.labels.mean(axis=0)

    def positive_counts(self) -> np.ndarray:
        return self.labels.sum(axis=0).astype(np.int64)

    def without_labels(self) -> "UnlabeledDataset":
        return UnlabeledDataset(
            [replace(r, label_row=None) for r in self.records], root=self.root, classes=self.classes
        )


class UnlabeledDataset(_BaseDataset):
    """Images only; label rows are dropped."""


def patient_from_path(path: str) -> str:
    m = _PATIENT_RE.search(path)
    if m is None:
        raise DatasetFormatError(f"no patientNNNNN segment in path {path!r}")
    return m.group(1)


def ingest_csv(path, class_columns=None, image_root=None) -> LabeledDataset:
    """Read a CheXpert-format CSV, keeping rows with a definite 0/1 for every class.

    Rows where any of the class columns is uncertain (-1) or blank are
    dropped. ``class_columns`` maps the canonical short names to CSV headers;
    label rows are always in canonical ``CLASSES`` order.
    """
    path = Path(path)
    class_columns = dict(class_columns or CHEXPERT_COLUMNS)
    try:
        df = pd.read_csv(path, dtype={PATH_COLUMN: str})
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise OSError(f"cannot read {path}: {e}") from e

    needed = [PATH_COLUMN] + [class_columns[c] for c in CLASSES]
    for col in needed:
        if col not in df.columns:
            raise DatasetFormatError(f"{path}: missing column {col!r}")

    values = df[[class_columns[c] for c in CLASSES]].apply(pd.to_numeric, errors="coerce")
    keep = values.isin([0.0, 1.0]).all(axis=1).to_numpy()
    meta_cols = [c for c in META_COLUMNS if c in df.columns and c != PATH_COLUMN]

    records = []
    for row_idx in np.flatnonzero(keep):
        rel = df[PATH_COLUMN].iat[row_idx]
        records.append(
            SampleRecord(
                patient_id=patient_from_path(rel),
                label_row=values.iloc[row_idx].to_numpy(dtype=np.float32),
                image_path=rel,
                meta={c: df[c].iat[row_idx] for c in meta_cols},
            )
        )
    root = Path(image_root) if image_root is not None else path.parent
    return LabeledDataset(records, root=root)


def split_by_patient(ds, fractions=(0.8, 0.2), seed: int = 0):
    """Partition ``ds`` so that each patient lands in exactly one part.

    Patients are shuffled with ``seed`` and assigned greedily until each part
    holds its share of images. Returns one dataset per fraction.
    """
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions.tolist()}")

    by_patient: dict[str, list[int]] = {}
    for i, pid in enumerate(ds.patient_ids):
        by_patient.setdefault(pid, []).append(i)
    patients = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(patients))

    targets = np.cumsum(fractions) * len(ds)
    parts: list[list[int]] = [[] for _ in fractions]
    part, assigned = 0, 0
    for k in order:
        while part < len(fractions) - 1 and assigned >= targets[part]:
            part += 1
        idx = by_patient[patients[k]]
        parts[part].extend(idx)
        assigned += len(idx)
    return tuple(ds.subset(sorted(p)) for p in parts)


def _largest_remainder(weights: np.ndarray, n: int, caps: np.ndarray) -> np.ndarray:
    exact = weights / weights.sum() * n
    alloc = np.minimum(np.floor(exact).astype(np.int64), caps)
    rem = exact - alloc
    while alloc.sum() < n:
        open_ = alloc < caps
        j = int(np.argmax(np.where(open_, rem, -np.inf)))
        alloc[j] += 1
        rem[j] = -np.inf if alloc[j] >= caps[j] else rem[j] - 1.0
    return alloc


def subsample_indices(labels: np.ndarray, n: int, seed: int = 0, tol: float = 0.02) -> np.ndarray:
    """Stratified draw of ``n`` row indices keeping per-class positive rates close to the source.

    Strata are the distinct label combinations; counts are allocated by
    largest remainder and a greedy swap pass then pulls any class whose rate
    drifts by more than ``tol / 2`` back toward the source rate, choosing
    at each step the swap between two combinations that most reduces the
    worst per-class deviation.
    """
    labels = np.asarray(labels)
    total = len(labels)
    if n > total:
        raise ValueError(f"cannot draw {n} samples from a dataset of {total}")
    if n == total:
        return np.arange(total)
    rng = np.random.default_rng(seed)
    keys, inverse = np.unique(labels.astype(np.int64), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sizes = np.bincount(inverse, minlength=len(keys))
    alloc = _largest_remainder(sizes.astype(float), n, sizes)

    chosen = np.zeros(total, dtype=bool)
    for k in range(len(keys)):
        members = np.flatnonzero(inverse == k)
        chosen[rng.permutation(members)[: alloc[k]]] = True

    # swaps only matter through the label combinations involved, so search those pairs
    target = labels.mean(axis=0)
    n_sel = np.bincount(inverse[chosen], minlength=len(keys))
    n_uns = sizes - n_sel
    for _ in range(4 * n):
        dev = n_sel @ keys / n - target
        if np.abs(dev).max() <= tol / 2:
            break
        step = (keys[None, :, :] - keys[:, None, :]) / n  # [out, in, class]
        new_dev = np.abs(dev + step)
        score = new_dev.max(axis=2) + 1e-3 * new_dev.sum(axis=2)
        score[n_sel == 0, :] = np.inf
        score[:, n_uns == 0] = np.inf
        k_out, k_in = np.unravel_index(int(np.argmin(score)), score.shape)
        if score[k_out, k_in] >= np.abs(dev).max() + 1e-3 * np.abs(dev).sum() - 1e-12:
            break
        out = rng.choice(np.flatnonzero(chosen & (inverse == k_out)))
        into = rng.choice(np.flatnonzero(~chosen & (inverse == k_in)))
        chosen[out], chosen[into] = False, True
        n_sel[k_out] -= 1
        n_sel[k_in] += 1
        n_uns[k_out] += 1
        n_uns[k_in] -= 1
    return np.flatnonzero(chosen)


def subsample_preserving_marginals(ds: LabeledDataset, n: int, seed: int = 0, return_complement=False):
    idx = subsample_indices(ds.labels, n, seed)
    sub = ds.subset(idx)
    if not return_complement:
        return sub
    rest = np.setdiff1d(np.arange(len(ds)), idx)
    return sub, ds.subset(rest)
