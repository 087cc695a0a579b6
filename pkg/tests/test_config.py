import json

import pytest

from roughctl.config import (DataConfig, ModelConfig, RunConfig, SweepConfig, TrainConfig, config_hash, from_dict,
                             layered, to_dict)


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.lambda_c == 0.01
    assert (cfg.train.alpha_conflict, cfg.train.alpha_bg) == (0.2, 0.8)
    assert cfg.sweep.alpha_grid == (1.0, 0.8, 0.6, 0.4, 0.2, 0.0)
    assert (cfg.sweep.tau_cls, cfg.sweep.tau_bg) == (0.9, 0.08)
    assert cfg.model.predictor_init_bias == 2.0


def test_round_trip_and_hash():
    cfg = RunConfig()
    back = from_dict(RunConfig, to_dict(cfg))
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)
    assert config_hash(RunConfig(train=TrainConfig(epochs=3))) != config_hash(cfg)


def test_unknown_key_is_rejected():
    with pytest.raises(KeyError):
        from_dict(ModelConfig, {"depth_of_field": 3})


def test_three_layer_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"epochs": 50, "lambda_c": 0.5}, "sweep": {"tau_bg": 0.1}}))
    cfg = layered(RunConfig, f, {"train.epochs": 7})
    assert cfg.train.epochs == 7            # override beats file
    assert cfg.train.lambda_c == 0.5        # file beats default
    assert cfg.sweep.tau_bg == 0.1
    assert cfg.train.batch_size == TrainConfig().batch_size  # untouched default


def test_lists_become_tuples():
    cfg = layered(RunConfig, None, {"sweep.alpha_grid": [1.0, 0.5]})
    assert cfg.sweep.alpha_grid == (1.0, 0.5)


def test_validation_runs_after_layering():
    with pytest.raises(ValueError):
        layered(RunConfig, None, {"data.n_samples": 10, "data.n_build": 5})
    with pytest.raises(ValueError):
        SweepConfig(alpha_grid=(0.2, 0.4))
    assert DataConfig().n_samples <= DataConfig().n_build
