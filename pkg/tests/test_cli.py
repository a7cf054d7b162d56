import json

import numpy as np
import pytest

from radiodx import cli, evaluation, imaging, network
from radiodx.network import HeadSpec

from conftest import brightness_set, write_manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train = brightness_set(root / "train", 12, seed=1, size=32)
    val = brightness_set(root / "val", 6, seed=2, size=32)
    write_manifest(root / "train.csv", train)
    write_manifest(root / "val.csv", val)
    return root


def tiny_config(root, **train):
    cfg = {"backbone": "tiny", "input_size": 32, "seed": 4, "init_seed": 2,
           "head": {"hidden": [16, 8]}, "augmentation": None,
           "train": {"epochs": 2, "batch_size": 4, "learning_rate": 1e-3, **train},
           "paths": {"train_manifest": "train.csv", "val_manifest": "val.csv"}}
    return cfg


def write_config(root, name, cfg):
    path = root / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_usage_error_exit_2(capsys):
    assert cli.main(["split", "--manifest", "m.csv"]) == 2
    assert "--seed" in capsys.readouterr().err
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    assert cli.main(["split", "--manifest", str(tmp_path / "nope.csv"), "--seed", "1", "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_config_key_rejected(workspace, tmp_path, capsys):
    cfg = tiny_config(workspace)
    cfg["train"]["momentum"] = 0.9
    path = write_config(workspace, "bad.json", cfg)
    assert cli.main(["train", "--config", path, "--out", str(tmp_path)]) == 1
    assert "train.momentum" in capsys.readouterr().err


def test_split_full_corpus_manifest(tmp_path):
    rows = ["path,label"] + [f"n{i}.jpeg,NORMAL" for i in range(1583)] + [f"p{i}.jpeg,PNEUMONIA" for i in range(4273)]
    (tmp_path / "all.csv").write_text("\n".join(rows) + "\n")
    out = tmp_path / "split"
    assert cli.main(["split", "--manifest", str(tmp_path / "all.csv"), "--seed", "7", "--out", str(out)]) == 0
    summary = json.loads((out / "split.json").read_text())
    totals = [summary["counts"][k]["total"] for k in ("test", "train", "val")]
    assert totals == [300, 4444, 1112] and summary["seed"] == 7
    assert (out / "test.csv").read_text().count("\n") == 301
    assert json.loads((out / "run.json").read_text())["seed"] == 7
    first = (out / "train.csv").read_bytes()
    assert cli.main(["split", "--manifest", str(tmp_path / "all.csv"), "--seed", "7", "--out", str(out)]) == 0
    assert (out / "train.csv").read_bytes() == first


def test_evaluate_golden_predictions(tmp_path):
    rows = ["path,label"] + [f"n{i}.pgm,NORMAL" for i in range(150)] + [f"p{i}.pgm,PNEUMONIA" for i in range(150)]
    (tmp_path / "test.csv").write_text("\n".join(rows) + "\n")
    probs = [0.1] * 147 + [0.9] * 3 + [0.2] * 4 + [0.8] * 146
    preds = ["path,probability"] + [f"{r.split(',')[0]},{p}" for r, p in zip(rows[1:], probs)]
    (tmp_path / "pred.csv").write_text("\n".join(preds) + "\n")
    out = tmp_path / "eval"
    assert cli.main(["evaluate", "--predictions", str(tmp_path / "pred.csv"),
                     "--manifest", str(tmp_path / "test.csv"), "--out", str(out)]) == 0
    assert (out / "confusion.csv").read_text() == "147,3\n4,146\n"
    m = evaluation.parse_metrics_csv((out / "metrics.csv").read_text())
    assert [round(m[k] * 100, 1) for k in ("sens", "esp", "vpp", "vpn", "acc")] == [97.3, 98.0, 98.0, 97.4, 97.7]
    assert round(m["f1"], 3) == 0.977
    assert (out / "run.json").exists()


def test_train_zero_epochs(workspace, tmp_path):
    cfg = tiny_config(workspace, epochs=0)
    path = write_config(workspace, "epochs0.json", cfg)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", path, "--out", str(out)]) == 0
    init = network.build_model("tiny", HeadSpec((16, 8)), init_seed=2, input_size=32)
    assert (out / "best.rxw").read_bytes() == network.save_weights(init)
    assert (out / "history.csv").read_text() == "epoch,train_loss,train_acc,val_acc\n"
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["train"]["epochs"] == 0 and run["config"]["train"]["optimizer"] == "adam"
    assert run["config"]["augmentation"] is None and run["seed"] == 4


@pytest.fixture(scope="module")
def trained(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    path = write_config(workspace, "tiny.json", tiny_config(workspace))
    assert cli.main(["train", "--config", path, "--out", str(out)]) == 0
    return out


def test_train_outputs(trained):
    lines = (trained / "history.csv").read_text().splitlines()
    assert len(lines) == 3
    assert (trained / "history.svg").read_text().startswith("<svg")
    model = network.model_from_weights((trained / "best.rxw").read_bytes())
    assert model.input_shape == (3, 32, 32)


def test_predict(trained, workspace, capsys):
    img = sorted((workspace / "val").glob("*.pgm"))[0]
    assert cli.main(["predict", "--weights", str(trained / "best.rxw"), "--image", str(img)]) == 0
    label, prob = capsys.readouterr().out.split()
    assert (label == "PNEUMONIA") == (float(prob) >= 0.5)
    assert 0 <= float(prob) <= 1


def test_explain(trained, workspace, tmp_path):
    img = sorted((workspace / "val").glob("*.pgm"))[1]
    out = tmp_path / "cam"
    assert cli.main(["explain", "--weights", str(trained / "best.rxw"), "--image", str(img), "--out", str(out),
                     "--layer", "backbone.conv1"]) == 0
    overlay = imaging.decode_pnm((out / "overlay.ppm").read_bytes())
    heat = imaging.decode_pnm((out / "heatmap.pgm").read_bytes())
    assert overlay.channels == 3 and (overlay.width, overlay.height) == (32, 32)
    assert heat.channels == 1
    assert json.loads((out / "run.json").read_text())["layer"] == "backbone.conv1"


def test_explain_rejects_dense_layer(trained, workspace, tmp_path):
    img = sorted((workspace / "val").glob("*.pgm"))[0]
    assert cli.main(["explain", "--weights", str(trained / "best.rxw"), "--image", str(img),
                     "--out", str(tmp_path), "--layer", "head.dense1"]) == 1


def test_evaluate_with_weights(trained, workspace, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "--weights", str(trained / "best.rxw"), "--manifest",
                     str(workspace / "val.csv"), "--out", str(out)]) == 0
    rows = (out / "confusion.csv").read_text().split()
    assert sum(int(v) for r in rows for v in r.split(",")) == 6
    assert (out / "predictions.csv").read_text().startswith("path,probability\n")


def test_analyze(workspace, tmp_path):
    out = tmp_path / "an"
    assert cli.main(["analyze", "--manifest", str(workspace / "train.csv"), "--out", str(out), "--size", "16"]) == 0
    normal = imaging.decode_pnm((out / "mean_normal.pgm").read_bytes())
    pneu = imaging.decode_pnm((out / "mean_pneumonia.pgm").read_bytes())
    diff = imaging.decode_pnm((out / "diff.ppm").read_bytes())
    assert normal.samples.mean() < pneu.samples.mean()
    assert diff.channels == 3
    # pneumonia is brighter everywhere, so the difference leans red
    assert np.all(diff.samples[..., 0] == 255) and diff.samples[..., 2].mean() < 255
