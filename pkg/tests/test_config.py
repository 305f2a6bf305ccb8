import json
from pathlib import Path

import pytest

from covmoe.config import ExperimentConfig, from_dict, load_config
from covmoe.datahub import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", ["desk.json", "toy.json"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert from_dict(json.loads(cfg.to_json())) == cfg


def test_defaults_and_hash():
    a, b = ExperimentConfig(), from_dict({})
    assert a == b and a.hash() == b.hash()
    assert a.with_overrides(seed=1).hash() != a.hash()
    assert a.with_overrides(model={"moe": {"k": 1}}).model.moe.k == 1


@pytest.mark.parametrize("bad", [
    {"sede": 1},
    {"model": {"moe": {"experts": 4}}},
    {"seed": "0"},
    {"seed": True},
    {"train": {"lr": "fast"}},
    {"data": {"split": 0.5}},
    {"model": {"moe": {"k": 9}}},
    {"data": {"source": "csv"}},
    {"fed": {"K": 1}},
    [],
])
def test_bad_configs(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{seed: 0")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_int_promotes_to_float():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0
