import json

import pytest

from roughctl.checkpoint import save_model
from roughctl.cli import main
from roughctl.oracle import Oracle, ShapeClassifier


@pytest.fixture
def files(tiny_model, tmp_path):
    save_model(tmp_path / "base.pt", tiny_model)
    Oracle(ShapeClassifier(), accuracy=1.0).save(tmp_path / "oracle.pt")
    return tmp_path


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage: roughctl" in capsys.readouterr().err


def test_seed_is_required(capsys):
    assert main(["render-shapes"]) == 2
    assert "--seed" in capsys.readouterr().err


def test_render_shapes_writes_stamp(tmp_path):
    assert main(["render-shapes", "--seed", "0", "--n", "3", "--size", "16", "--out", str(tmp_path / "s")]) == 0
    stamp = json.loads((tmp_path / "s" / "stamp.json").read_text())
    assert stamp["seed"] == 0 and "shapes.json" in stamp["outputs"]


def test_build_dataset_with_zero_target(files):
    out = files / "ds"
    code = main(["build-dataset", "--seed", "1", "--n", "0", "--base", str(files / "base.pt"),
                 "--oracle", str(files / "oracle.pt"), "--out", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["samples"] == [] and manifest["stats"]["attempts"] == 0
    stamp = json.loads((out / "stamp.json").read_text())
    assert set(stamp["checkpoints"]) == {"base", "oracle"}


def test_generate_is_deterministic(files):
    outs = []
    for name in ("a", "b"):
        out = files / name
        assert main(["generate", "--seed", "4", "--base", str(files / "base.pt"), "--class", "ring",
                     "--source-class", "circle", "--count", "2", "--steps", "3", "--scale", "0.5",
                     "--out", str(out)]) == 0
        outs.append(out)
    for f in ("condition.png", "sample_000.png", "sample_001.png"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_generate_with_predictor_requires_checkpoint(files, capsys):
    code = main(["generate", "--seed", "0", "--base", str(files / "base.pt"), "--class", "ring",
                 "--scale", "predictor", "--out", str(files / "g")])
    assert code == 2
    assert "predictor checkpoint" in capsys.readouterr().err


def test_missing_base_is_a_usage_error(tmp_path, capsys):
    assert main(["generate", "--seed", "0", "--base", str(tmp_path / "none.pt"), "--class", "ring"]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_override_is_a_usage_error(files, capsys):
    code = main(["build-dataset", "--seed", "0", "--n", "0", "--base", str(files / "base.pt"),
                 "--oracle", str(files / "oracle.pt"), "--set", "sweep.nope=1"])
    assert code == 2
    assert "bad configuration" in capsys.readouterr().err


def test_pretrain_then_train_predictor_end_to_end(files, monkeypatch):
    monkeypatch.setenv("ROUGHCTL_OUTPUT_ROOT", str(files))
    tiny = ["--set", "model.image_size=16", "--set", "model.widths=[8,16,16]", "--set", "model.emb_dim=16",
            "--set", "model.timesteps=20", "--set", "pretrain.backbone_steps=2",
            "--set", "pretrain.control_steps=2", "--set", "pretrain.batch_size=2"]
    assert main(["pretrain", "--seed", "0", "--n-renders", "9", "--out", "tiny.pt", *tiny]) == 0
    assert (files / "tiny.pt").exists()
    stamp = json.loads((files / "tiny.stamp.json").read_text())
    assert stamp["config"]["pretrain"]["n_renders"] == 9
    assert main(["build-dataset", "--seed", "0", "--n", "0", "--base", str(files / "tiny.pt"),
                 "--oracle", str(files / "oracle.pt"), "--out", "ds"]) == 0
    # the dataset is empty, so training refuses it
    assert main(["train-predictor", "--seed", "0", "--base", str(files / "tiny.pt"),
                 "--dataset", str(files / "ds")]) == 2


def test_unknown_evaluation_method(files, capsys):
    code = main(["evaluate", "--seed", "0", "--base", str(files / "base.pt"), "--oracle",
                 str(files / "oracle.pt"), "--methods", "alpha1,magic", "--items", "2",
                 "--eval-dir", str(files / "e")])
    assert code == 2
    assert "unknown method" in capsys.readouterr().err
