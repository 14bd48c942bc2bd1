import pytest

from prunix.config import ConfigError, PipelineConfig, config_from_dict, load_config


def test_defaults():
    c = PipelineConfig()
    assert (c.prune.lambda_p, c.prune.mu, c.prune.sigma, c.prune.gamma) == (0.5, 0.7, 0.02, 0.5)
    assert c.quant.bits == 4 and c.clamp_levels is None
    assert c.regularizer.kind == "group_sawtooth"


def test_yaml_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nprune:\n  mu: 0.4\n  global: true\nquant:\n  bits: 6\n")
    c = load_config(path, {"prune.sigma": "0.05", "train.epochs_initial": "2"})
    assert c.seed == 3 and c.quant.bits == 6
    assert c.prune.mu == 0.4 and c.prune.use_global is True and c.prune.sigma == 0.05
    assert c.train.epochs_initial == 2


def test_empty_file(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    assert load_config(tmp_path / "c.yaml") == PipelineConfig()


def test_clamp_sources():
    assert config_from_dict({"quant": {"bits": 8, "aging_aware": True}}).clamp_levels == 251
    assert config_from_dict({"quant": {"clamp_levels": 10},
                             "regularizer": {"clamp_levels": 12}}).clamp_levels == 12


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"prune": {"bogus": 1}},
    {"prune": 3},
    {"prune": {"mu": 1.5}},
    {"prune": {"mu": "abc"}},
    {"quant": {"bits": 9}},
    {"quant": {"bits": 4, "clamp_levels": 16}},
    {"train": {"learning_rate": 0}},
    {"train": {"lr_decay": 0}},
    {"train": {"epochs_initial": -1}},
    {"train": {"finetune_learning_rate": -0.1}},
    {"data": {"fractions": [0.5, 0.2, 0.2]}},
    {"faults": {"stuck_off": 1.5}},
    {"faults": {"drift": -1}},
    {"faults": {"repetitions": 0}},
    {"faults": {"grids": {"colour": [1]}}},
    {"regularizer": {"kind": "l7"}},
])
def test_invalid(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_missing_and_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="no such config"):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
