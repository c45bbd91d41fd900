import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxr_selftrain.config import (
    TABLE1_TRAIN_COUNTS,
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    desk_scale_config,
    dump_config,
    load_config,
    parse_config,
)
from cxr_selftrain.engine import HyperParams, Strategies


def test_round_trip_default_and_desk():
    for cfg in (ExperimentConfig(), desk_scale_config()):
        assert parse_config(dump_config(cfg)) == cfg


@settings(max_examples=60, deadline=None)
@given(
    alpha=st.floats(0.01, 5.0),
    lr=st.floats(1e-7, 1.0),
    gamma=st.floats(0.0, 1.0),
    seeds=st.lists(st.integers(0, 10**6), min_size=1, max_size=5),
    fixed=st.one_of(st.none(), st.floats(0.0, 1.0)),
    mixup=st.booleans(),
)
def test_round_trip_property(alpha, lr, gamma, seeds, fixed, mixup):
    cfg = ExperimentConfig(
        hp=HyperParams(alpha=alpha, learning_rate=lr, gamma=gamma, fixed_lambda=fixed),
        strategies=Strategies(mixup=mixup),
        seeds=seeds,
        n_labeled_sweep=[50, 100],
    )
    assert parse_config(dump_config(cfg)) == cfg


def test_dump_carries_symbol_comments():
    text = dump_config(ExperimentConfig())
    assert "# mixup: lambda ~ Beta(alpha, alpha)" in text
    assert "beta_e^u" in text and "tau_l" in text


def test_marginal_out_of_range_names_field():
    cfg = ExperimentConfig(dataset=DatasetSpec(marginals=[0.1, 0.2, 1.5, 0.3, 0.4]))
    with pytest.raises(ConfigError, match=r"dataset\.marginals\[CO\]"):
        cfg.validate()


def test_self_train_requires_unlabeled():
    with pytest.raises(ConfigError, match="n_unlabeled"):
        ExperimentConfig(n_unlabeled=0).validate()
    ExperimentConfig(n_unlabeled=0, strategies=Strategies(self_train=False)).validate()


def test_mixup_requires_weak_aug():
    with pytest.raises(ConfigError, match="weak_aug"):
        ExperimentConfig(strategies=Strategies(weak_aug=False)).validate()


def test_csv_paths_checked(tmp_path):
    cfg = ExperimentConfig(dataset=DatasetSpec(kind="csv", train_csv=str(tmp_path / "missing.csv")))
    with pytest.raises(ConfigError, match="train_csv"):
        cfg.validate()
    cfg.validate(check_paths=False)


def test_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown key hp.alpah"):
        parse_config("hp:\n  alpah: 0.3\n")
    with pytest.raises(ConfigError, match="hp.batch_size"):
        parse_config("hp:\n  batch_size: 2.5\n")
    with pytest.raises(ConfigError, match="strategies.mixup"):
        parse_config("strategies:\n  mixup: 3\n")
    with pytest.raises(ConfigError, match="hp"):
        parse_config("hp:\n  gamma: 2.0\n")
    with pytest.raises(ConfigError):
        parse_config("hp: [1, 2\n")


def test_partial_config_uses_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("n_labeled: 50\nhp:\n  alpha: 0.6\n")
    cfg = load_config(path)
    assert cfg.n_labeled == 50 and cfg.hp.alpha == 0.6
    assert cfg.hp.gamma == HyperParams().gamma
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_default_marginals_follow_train_counts():
    cfg = ExperimentConfig()
    total = 138655
    assert cfg.dataset.marginals == [TABLE1_TRAIN_COUNTS[c] / total for c in ("AT", "CA", "CO", "ED", "PE")]
    assert min(range(5), key=lambda i: cfg.dataset.marginals[i]) == 2  # CO has the lowest support


def test_sweep_defaults_to_n_labeled():
    assert ExperimentConfig(n_labeled=77).sweep() == [77]
    assert ExperimentConfig(n_labeled_sweep=[10, 20]).sweep() == [10, 20]
