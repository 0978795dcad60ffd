import json

import pytest

from event_vpr.config import RunConfig, load_config, write_resolved
from event_vpr.errors import ConfigError


def test_defaults_validate_and_roundtrip():
    cfg = RunConfig().validate()
    assert cfg.mining.pos_radius == 10 and cfg.mining.neg_radius == 25 and cfg.mining.n_neg == 10
    assert cfg.eval.phi == 20 and cfg.eval.recall_ns == (1, 5, 10, 20)
    assert 500 <= cfg.mining.cache_interval <= 1000
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize(
    "doc",
    [
        {"trainig": {}},
        {"training": {"epoch": 3}},
        {"training": {"epochs": "3"}},
        {"training": {"lr": True}},
        {"mining": {"cache_interval": 499}},
        {"mining": {"cache_interval": 1001}},
        {"mining": {"pos_radius": 30}},
        {"vlad": {"alpha": 0}},
        {"representation": {"kind": "frames"}},
        {"eval": {"recall_ns": [0, 5]}},
        {"backbone": {"input_channels": 3}},
        {"data": {"test_fraction": 1.0}},
        {"training": []},
    ],
)
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_overrides_and_int_to_float():
    cfg = RunConfig().with_overrides(training={"epochs": 0, "lr": 1}, eval={"phi": 60})
    assert cfg.training.epochs == 0 and cfg.training.lr == 1.0 and isinstance(cfg.training.lr, float)
    assert cfg.eval.phi == 60.0
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(nope={"a": 1})


def test_load_yaml_resolves_manifest(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "run.yaml"
    path.write_text("data:\n  manifest: ../world/manifest.csv\ntraining:\n  seed: 7\n")
    cfg = load_config(path)
    assert cfg.training.seed == 7
    assert cfg.data.manifest == str((tmp_path / "world" / "manifest.csv").resolve())
    out = write_resolved(cfg, tmp_path)
    assert RunConfig.from_dict(json.loads(out.read_text())) == cfg


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("training: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)
