import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxr_selftrain.data import (
    CLASSES,
    AugmentParams,
    DatasetFormatError,
    LabeledDataset,
    SampleRecord,
    equalize_histogram,
    generate_synthetic,
    ingest_csv,
    letterbox,
    normalize,
    preprocess,
    split_by_patient,
    subsample_preserving_marginals,
    weak_augment,
    write_dataset,
)
from cxr_selftrain.data.augment import ROTATION_RANGE, sample_rng
from cxr_selftrain.data.synthetic import plan_samples

# retained rows of chexpert/train.csv, counted by hand (rows 3, 6 and 8 carry a -1)
FIXTURE_KEPT = 7
FIXTURE_POSITIVES = {"AT": 3, "CA": 3, "CO": 1, "ED": 3, "PE": 4}
FIXTURE_PATIENTS = {"patient00001", "patient00002", "patient00003", "patient00004", "patient00005"}


@pytest.fixture
def chexpert_dir(fixtures_dir):
    return fixtures_dir / "chexpert"


def test_ingest_drops_uncertain_rows(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "train.csv")
    assert len(ds) == FIXTURE_KEPT
    assert dict(zip(CLASSES, ds.positive_counts().astype(int).tolist())) == FIXTURE_POSITIVES
    assert set(ds.patient_ids) == FIXTURE_PATIENTS


def test_ingest_matches_bruteforce_recount(chexpert_dir):
    import csv

    cols = ["Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion"]
    kept = []
    with open(chexpert_dir / "train.csv") as fh:
        for row in csv.DictReader(fh):
            vals = [row[c] for c in cols]
            if all(v in ("0.0", "1.0") for v in vals):
                kept.append([int(float(v)) for v in vals])
    ds = ingest_csv(chexpert_dir / "train.csv")
    np.testing.assert_array_equal(ds.labels, np.array(kept, dtype=np.float32))


def test_ingest_label_mapping(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "train.csv")
    np.testing.assert_array_equal(ds[0].label_row, [1, 0, 0, 1, 0])
    assert ds[0].meta["Sex"] == "Female"


def test_ingest_resolves_chexpert_paths(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "train.csv")
    img = ds[0].load_image(ds.root)
    assert img.shape == (30, 40) and img.dtype == np.uint8
    assert ds.images(16).shape == (FIXTURE_KEPT, 16, 16)


def test_ingest_blank_class_value_dropped(tmp_path):
    csv = tmp_path / "t.csv"
    csv.write_text(
        "Path,Atelectasis,Cardiomegaly,Consolidation,Edema,Pleural Effusion\n"
        "x/patient00001/s/v.png,1.0,0.0,,0.0,0.0\n"
        "x/patient00002/s/v.png,1.0,0.0,0.0,0.0,0.0\n"
    )
    ds = ingest_csv(csv)
    assert ds.patient_ids == ["patient00002"]


def test_ingest_missing_column_named(tmp_path):
    csv = tmp_path / "t.csv"
    csv.write_text("Path,Atelectasis,Cardiomegaly,Edema,Pleural Effusion\nx/patient00001/v.png,1,0,0,0\n")
    with pytest.raises(DatasetFormatError, match="Consolidation"):
        ingest_csv(csv)


def test_ingest_missing_file(tmp_path):
    with pytest.raises(OSError):
        ingest_csv(tmp_path / "nope.csv")


def test_split_fixture_disjoint(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "patients12.csv")
    assert len(ds) == 12 and len(set(ds.patient_ids)) == 6
    a, b = split_by_patient(ds, (0.5, 0.5), seed=7)
    assert not set(a.patient_ids) & set(b.patient_ids)
    assert len(a) + len(b) == 12


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), frac=st.floats(0.05, 0.95))
def test_split_disjoint_every_seed(seed, frac):
    from pathlib import Path

    ds = ingest_csv(Path(__file__).parent / "fixtures" / "chexpert" / "patients12.csv")
    a, b = split_by_patient(ds, (frac, 1 - frac), seed)
    assert not set(a.patient_ids) & set(b.patient_ids)
    assert sorted(a.patient_ids + b.patient_ids) == sorted(ds.patient_ids)


def test_split_deterministic(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "patients12.csv")
    first = [s.patient_ids for s in split_by_patient(ds, (0.5, 0.5), 3)]
    second = [s.patient_ids for s in split_by_patient(ds, (0.5, 0.5), 3)]
    assert first == second


def test_split_single_patient():
    recs = [SampleRecord("patient00001", np.zeros(5, np.float32), image=np.zeros((4, 4), np.uint8)) for _ in range(3)]
    a, b = split_by_patient(LabeledDataset(recs), (0.5, 0.5), 0)
    assert sorted([len(a), len(b)]) == [0, 3]


def test_split_empty_raises():
    with pytest.raises(ValueError):
        split_by_patient(LabeledDataset([]), (0.5, 0.5), 0)


def test_letterbox_aspect():
    raw = np.full((300, 400), 200, np.uint8)
    out, (h, w) = letterbox(raw, 224)
    assert (h, w) == (168, 224)
    assert out.shape == (224, 224)
    rows = np.flatnonzero(out.max(axis=1) > 0)
    assert rows.size == 168
    assert out[0].max() == 0 and out[-1].max() == 0


def test_preprocess_shape_and_channels():
    raw = np.random.default_rng(0).integers(0, 256, (300, 400), dtype=np.uint8)
    out = preprocess(raw)
    assert out.shape == (224, 224, 3) and out.dtype == np.float32
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])
    # shape is preserved when the output is fed back through the resize step
    again = preprocess(np.clip(out[..., 0] * 64 + 128, 0, 255).astype(np.uint8))
    assert again.shape == (224, 224, 3)


def test_constant_image_normalizes_to_zero():
    img = np.full((50, 50), 128, np.uint8)
    assert np.array_equal(equalize_histogram(img), img)
    assert np.all(normalize(equalize_histogram(img)) == 0.0)


def test_normalize_value():
    assert normalize(np.array([192], np.uint8))[0] == 1.0


def test_equalization_spreads_histogram():
    img = np.random.default_rng(1).integers(100, 120, (64, 64), dtype=np.uint8)
    eq = equalize_histogram(img)
    assert eq.min() == 0 and eq.max() == 255
    # monotone mapping: sorting order of pixels is preserved
    order = np.argsort(img.ravel(), kind="stable")
    assert np.all(np.diff(eq.ravel()[order].astype(int)) >= 0)


def test_preprocess_rejects_empty():
    with pytest.raises(ValueError):
        preprocess(np.zeros((0, 10), np.uint8))


def test_augment_identity():
    img = np.random.default_rng(0).normal(size=(32, 32)).astype(np.float32)
    out = weak_augment(img, np.random.default_rng(0), AugmentParams(0.0, 0.0, 0.0, 1.0))
    assert np.array_equal(out, img)


def test_augment_deterministic_and_shape():
    img = np.random.default_rng(0).normal(size=(32, 32, 3)).astype(np.float32)
    a = weak_augment(img, sample_rng(3, 7, 1))
    b = weak_augment(img, sample_rng(3, 7, 1))
    assert np.array_equal(a, b) and a.shape == img.shape
    assert not np.array_equal(a, weak_augment(img, sample_rng(3, 7, 2)))


def test_augment_rotation_range():
    rng = np.random.default_rng(0)
    rot = np.array([AugmentParams.sample(rng).rotation_deg for _ in range(10_000)])
    assert -15 <= rot.min() <= -14 and 14 <= rot.max() <= 15
    assert ROTATION_RANGE == (-15.0, 15.0)


def test_augment_params_validated():
    with pytest.raises(ValueError):
        AugmentParams(20.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        AugmentParams(0.0, 0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        AugmentParams(0.0, 0.0, 0.0, 1.2)


def test_synthetic_marginals():
    m = (0.4, 0.3, 0.05, 0.25, 0.45)
    ds = generate_synthetic(2000, m, seed=0)
    assert np.all(np.abs(ds.marginals() - np.array(m)) <= 0.03)


def test_synthetic_all_zero_marginals():
    ds = generate_synthetic(50, (0, 0, 0, 0, 0), seed=1)
    assert ds.labels.sum() == 0


def test_synthetic_deterministic():
    a = generate_synthetic(40, (0.3,) * 5, seed=4)
    b = generate_synthetic(40, (0.3,) * 5, seed=4)
    assert np.array_equal(a.labels, b.labels)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_synthetic_labels_equal_glyph_plan():
    plans = plan_samples(60, (0.5, 0.3, 0.2, 0.4, 0.6), seed=9)
    ds = generate_synthetic(60, (0.5, 0.3, 0.2, 0.4, 0.6), seed=9)
    for plan, rec in zip(plans, ds):
        drawn = {g.cls for g in plan.glyphs}
        present = [1.0 if c in drawn else 0.0 for c in CLASSES]
        np.testing.assert_array_equal(rec.label_row, present)


def test_synthetic_rejects_bad_marginals():
    with pytest.raises(ValueError):
        generate_synthetic(10, (0.5, 1.5, 0, 0, 0), seed=0)


def test_synthetic_round_trip_through_csv(tmp_path):
    ds = generate_synthetic(20, (0.5,) * 5, seed=2, size=24)
    csv = write_dataset(ds, tmp_path)
    back = ingest_csv(csv)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.patient_ids == ds.patient_ids
    assert np.array_equal(back[3].load_image(back.root), ds[3].image)


def test_subsample_preserves_marginals(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "marginals40.csv")
    np.testing.assert_allclose(ds.marginals(), [0.5, 0.25, 0.1, 0.2, 0.4])
    sub, rest = subsample_preserving_marginals(ds, 20, seed=0, return_complement=True)
    assert len(sub) == 20
    assert np.all(np.abs(sub.marginals() - ds.marginals()) <= 0.02)
    assert not {id(r) for r in sub} & {id(r) for r in rest}
    assert len(sub) + len(rest) == len(ds)


@pytest.mark.parametrize("seed", range(5))
def test_subsample_synthetic_tolerance(seed):
    ds = generate_synthetic(1000, (0.17, 0.13, 0.07, 0.27, 0.42), seed=seed, size=8)
    sub = subsample_preserving_marginals(ds, 200, seed)
    assert np.all(np.abs(sub.marginals() - ds.marginals()) <= 0.02)


def test_subsample_full_is_identity(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "marginals40.csv")
    sub = subsample_preserving_marginals(ds, len(ds), seed=3)
    assert [id(r) for r in sub] == [id(r) for r in ds]


def test_subsample_too_large(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "marginals40.csv")
    with pytest.raises(ValueError):
        subsample_preserving_marginals(ds, 41, seed=0)


def test_subsample_deterministic(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "marginals40.csv")
    a = subsample_preserving_marginals(ds, 10, seed=5)
    b = subsample_preserving_marginals(ds, 10, seed=5)
    assert [r.image_path for r in a] == [r.image_path for r in b]


def test_unlabeled_has_no_labels(chexpert_dir):
    ds = ingest_csv(chexpert_dir / "train.csv").without_labels()
    assert all(r.label_row is None for r in ds)
    assert not hasattr(ds, "labels")
