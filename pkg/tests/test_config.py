import dataclasses
import json
import math

import pytest

from gdmpolicy.config import (ConfigError, ExperimentConfig, GnnConfig, NetworkConfig, Splits, TrainConfig,
                              dbm_to_watts, load_config, load_preset)


def test_units():
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert dbm_to_watts(-174.0) == pytest.approx(10 ** (-20.4))
    net = NetworkConfig()
    assert net.noise_power == pytest.approx(20e6 * 10 ** (-20.4))


def test_roundtrip_and_digest(tmp_path):
    cfg = ExperimentConfig(seed=4, f_min_mode="fp_percentile")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert dataclasses.replace(cfg, seed=5).digest() != cfg.digest()


@pytest.mark.parametrize("bad", [
    {"network": {"n_pairs": 1}},
    {"network": {"nope": 1}},
    {"train": {"lr_min": 1.0, "lr_init": 0.1}},
    {"gnn": {"nonlinearity": "tanh"}},
    {"eval": {"checkpoints": [300]}},
    {"f_min_mode": "other"},
    {"mystery": 1},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_malformed_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_config(path)


def test_splits_ratio():
    assert Splits.from_ratio(16) == Splits(10, 2, 4)
    assert Splits.from_ratio(128) == Splits(80, 16, 32)


@pytest.mark.parametrize("name", ["desk", "paper"])
def test_presets_load(name):
    cfg = load_preset(name)
    assert cfg.network.p_max == 0.01
    assert cfg.expert.buffer_capacity == 500


def test_full_scale_preset_values():
    cfg = load_preset("paper")
    assert cfg.network.n_pairs == 100 and cfg.network.density == 12.0 and cfg.network.f_min == 0.6
    assert cfg.gnn.n_layers == 6 and cfg.gnn.features == 128
    assert cfg.train.max_epochs == 10_000 and cfg.splits == Splits(80, 16, 32)
    assert cfg.schedule.n_steps == 500 and cfg.schedule.kind == "cosine"


def test_desk_preset_values():
    cfg = load_preset("desk")
    assert cfg.network.n_pairs == 16 and cfg.splits == Splits(10, 2, 4)
    assert cfg.f_min_mode == "fp_percentile"
    # same deployment area as 100 pairs at 12 per km^2
    assert cfg.network.area_side == pytest.approx(math.sqrt(100 / 12) * 1000, rel=1e-12)
