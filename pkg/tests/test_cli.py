"""End-to-end CLI runs on a small synthetic dataset."""

import json
import os

import numpy as np
import pytest

from ditherbnn import dataio, pgm
from ditherbnn.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    split = dataio.synth_dataset(40, classes=4, seed=3, size=32)
    dataio.save_converted(split, path)
    return str(path)


def test_design_writes_scores_and_kernel(data_dir, tmp_path):
    out = tmp_path / "design"
    rc = main(["design", "--data", data_dir, "--subset", "3", "--seed", "0",
               "--out", str(out)])
    assert rc == 0
    lines = (out / "tv_scores.csv").read_text().splitlines()
    assert lines[0].startswith("rank,score")
    assert len(lines) == 1 + 6**4
    doc = json.loads((out / "kernel.json").read_text())
    assert doc["k"] == 3 and len(doc["entries"]) == 2
    assert "level_thresholds" in doc
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "design"
    assert any(p.endswith("kernel.json") for p in manifest["artifacts"])


def test_design_is_byte_deterministic(data_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["design", "--data", data_dir, "--subset", "2",
                     "--seed", "5", "--out", str(out)]) == 0
        outs.append((out / "tv_scores.csv").read_bytes())
    assert outs[0] == outs[1]


def test_scale_modes(data_dir, tmp_path):
    design_out = tmp_path / "design"
    assert main(["design", "--data", data_dir, "--subset", "2", "--out",
                 str(design_out)]) == 0
    scale_out = tmp_path / "scale"
    rc = main(["scale", "--kernel", str(design_out / "kernel.json"),
               "--mode", "3d-s", "--channels", "6", "--out", str(scale_out)])
    assert rc == 0
    doc = json.loads((scale_out / "scaled.json").read_text())
    assert doc["mode"] == "3d-s" and doc["channels"] == 6
    assert len(doc["scaled_entries"]) == 6
    assert doc["scaled_entries"][0] != doc["scaled_entries"][1]


def test_train_eval_dump_cycle(data_dir, tmp_path):
    design_out = tmp_path / "design"
    assert main(["design", "--data", data_dir, "--subset", "2", "--out",
                 str(design_out)]) == 0
    cfg = {
        "channels": [6, 8],
        "activation": "design3d-c",
        "bn_setting": "0/1",
        "thresholds": str(design_out / "kernel.json"),
        "num_classes": 4,
        "epochs": 2,
        "batch_size": 20,
        "seed": 1,
        "data": {"type": "converted", "dir": data_dir},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    train_out = tmp_path / "train"
    assert main(["train", "--config", str(cfg_path), "--out", str(train_out)]) == 0
    for name in ("report.csv", "last.npz", "best.npz", "summary.json",
                 "manifest.json"):
        assert (train_out / name).exists()
    report = (train_out / "report.csv").read_text().splitlines()
    assert report[0] == "epoch,train_acc,test_acc,loss"
    assert len(report) == 3

    eval_out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(train_out / "best.npz"),
                 "--data", data_dir, "--out", str(eval_out)]) == 0
    result = json.loads((eval_out / "eval.json").read_text())
    assert 0.0 <= result["accuracy"] <= 1.0
    summary = json.loads((train_out / "summary.json").read_text())
    assert result["accuracy"] == pytest.approx(summary["best_acc"])

    probe = tmp_path / "probe.ppm"
    rng = np.random.default_rng(0)
    pgm.write_ppm(probe, (rng.random((3, 32, 32)) * 255).astype(np.uint8))
    maps_out = tmp_path / "maps"
    assert main(["dump-activations", "--checkpoint", str(train_out / "best.npz"),
                 "--image", str(probe), "--layer", "0",
                 "--out", str(maps_out)]) == 0
    names = sorted(os.listdir(maps_out))
    assert "layer0_ch000_conv.pgm" in names
    sign_map = pgm.read_pgm(maps_out / "layer0_ch000_sign.pgm")
    assert set(np.unique(sign_map)) <= {0, 255}


def test_bad_config_returns_error(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"activation": "quantize"}))
    assert main(["train", "--config", str(cfg_path)]) == 2


def test_missing_data_dir_is_handled(tmp_path):
    rc = main(["design", "--data", str(tmp_path / "nope"), "--out",
               str(tmp_path / "out")])
    assert rc == 1
