from .augment import AugmentParams, apply_affine, sample_rng, weak_augment
from .datasets import (
    CHEXPERT_COLUMNS,
    CLASSES,
    DatasetFormatError,
    LabeledDataset,
    SampleRecord,
    UnlabeledDataset,
    ingest_csv,
    split_by_patient,
    subsample_indices,
    subsample_preserving_marginals,
)
from .preprocess import IMAGE_SIZE, equalize_histogram, letterbox, normalize, preprocess, preprocess_gray
from .synthetic import generate_synthetic, plan_samples, render, write_dataset

__all__ = [
    "AugmentParams",
    "CHEXPERT_COLUMNS",
    "CLASSES",
    "DatasetFormatError",
    "IMAGE_SIZE",
    "LabeledDataset",
    "SampleRecord",
    "UnlabeledDataset",
    "apply_affine",
    "equalize_histogram",
    "generate_synthetic",
    "ingest_csv",
    "letterbox",
    "normalize",
    "plan_samples",
    "preprocess",
    "preprocess_gray",
    "render",
    "sample_rng",
    "split_by_patient",
    "subsample_indices",
    "subsample_preserving_marginals",
    "weak_augment",
    "write_dataset",
]
