import json

import pytest

from dbdmp.config import ABLATIONS, ConfigError, ExperimentConfig, paper_config, toy_config


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.loss.tau, cfg.loss.gamma, cfg.loss.alpha, cfg.loss.lam, cfg.loss.t_max) == (0.3, 0.8, 0.4, 2.0, 99)
    assert cfg.pretrain.momentum == 0.99 and cfg.pretrain.epochs == 1000
    assert cfg.segment.momentum == 0.9 and cfg.segment.epochs == 300
    assert cfg.segment.iterations_per_epoch == 250 and cfg.segment.batch_size == 2
    assert cfg.segment.patch_size == (224, 128, 64)
    assert cfg.segment.initial_lr == 0.01 and cfg.segment.weight_decay == 3e-5
    assert paper_config().data.target_spacing == (3.0, 0.8, 0.8)


def test_toy_profile():
    cfg = toy_config()
    assert cfg.segment.patch_size == (32, 32, 16)
    assert cfg.network.levels == 2 and cfg.network.base_features == 8
    assert cfg.segment.epochs == 20 and cfg.segment.iterations_per_epoch == 20


def test_ablation_presets():
    assert set(ABLATIONS) == {"baseline", "a", "b", "c", "d", "e", "f", "g"}
    g = toy_config().with_ablation("g")
    assert set(g.loss.sup_terms) == {"pce", "sce", "tversky"}
    assert g.loss.pseudo_term == "klce" and g.preset["pretrained"]
    base = g.with_ablation("baseline")
    assert base.loss.sup_terms == ("ce",) and not base.preset["dual"]
    with pytest.raises(ConfigError):
        g.with_ablation("z")


def test_roundtrip_and_hash(tmp_path):
    cfg = toy_config().with_ablation("d")
    path = cfg.save(tmp_path / "exp.json")
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert cfg.with_overrides(["loss.tau=0.2"]).hash() != cfg.hash()


def test_overrides():
    cfg = toy_config().with_overrides(["loss.tau=0.2", "segment.patch_size=[16,16,16]", "experiment_id=x"])
    assert cfg.loss.tau == 0.2 and cfg.segment.patch_size == (16, 16, 16) and cfg.experiment_id == "x"
    for bad in ["loss.tau", "loss.nope=1", "nosection.tau=1", "loss.tau=\"a\"", "segment.epochs=0"]:
        with pytest.raises(ConfigError):
            toy_config().with_overrides([bad])


def test_strict_loading(tmp_path):
    d = toy_config().to_dict()
    d["loss"]["bogus"] = 1
    (tmp_path / "a.json").write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.load(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(tmp_path / "b.json")
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="divisible"):
        toy_config().with_overrides(["network.levels=6"])
    with pytest.raises(ConfigError):
        toy_config().with_overrides(["pretrain.patch_size=[8,8,8]"])
