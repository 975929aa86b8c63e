import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from click.testing import CliRunner
from PIL import Image

from bpim.cli import PALETTE, draw_overlay, main
from bpim.data import load_dataset, parse_label_line, read_labels
from bpim.model import ModelConfig, build, save_checkpoint

SMOKE = {
    "seed": 0,
    "model": {"width_multiple": 0.0625, "input_size": 64, "heads": 2, "ff_dim": 32},
    "train": {"epochs": 1, "warmup_epochs": 0, "batch_size": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    res = runner.invoke(main, ["synth", "--seed", "1", "--n", "8", "--size", "64", "--out", str(root / "data")])
    assert res.exit_code == 0, res.output
    cfg = dict(SMOKE, data={"root": str(root / "data")})
    (root / "smoke.yaml").write_text(yaml.safe_dump(cfg))
    return root


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_help_exits_zero():
    assert run("--help").exit_code == 0
    for cmd in ("synth", "train", "eval", "detect", "inspect", "ablate"):
        assert run(cmd, "--help").exit_code == 0


def test_synth_counts_and_determinism(tmp_path):
    assert run("synth", "--seed", 7, "--n", 16, "--size", 256, "--out", tmp_path / "a").exit_code == 0
    assert run("synth", "--seed", 7, "--n", 16, "--size", 256, "--out", tmp_path / "b").exit_code == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert len(list((a / "images").glob("*.png"))) == 16 and len(list((a / "labels").glob("*.txt"))) == 16
    for p in sorted(a.rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (b / p.relative_to(a)).read_bytes(), p
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["command"] == "synth" and len(manifest["outputs"]) == 33


def test_synth_invalid_size(tmp_path):
    res = run("synth", "--size", 100, "--out", tmp_path)
    assert res.exit_code == 2 and "multiple of 32" in res.output


def test_train_and_eval(workspace, tmp_path):
    res = run("train", "--config", workspace / "smoke.yaml", "--out", tmp_path / "run")
    assert res.exit_code == 0, res.output
    out = tmp_path / "run"
    for name in ("last.ckpt", "metrics.jsonl", "eval.json", "config.yaml", "manifest.json"):
        assert (out / name).exists()
    ev = json.loads((out / "eval.json").read_text())
    assert ev["params_m"] > 0 and ev["gflops"] > 0
    res = run("eval", "--checkpoint", out / "last.ckpt", "--data", workspace / "data", "--out", tmp_path / "ev")
    assert res.exit_code == 0 and res.output.startswith("map50 ")
    assert "map5095" in json.loads((tmp_path / "ev" / "eval.json").read_text())


def test_train_exit_codes(workspace, tmp_path):
    assert run("train", "--config", workspace / "smoke.yaml", "--data", tmp_path / "nope", "--out", tmp_path / "r").exit_code == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {wdth: 1}\n")
    assert run("train", "--config", bad, "--out", tmp_path / "r").exit_code == 2
    assert run("train", "--config", workspace / "smoke.yaml", "--device", "tpu", "--out", tmp_path / "r").exit_code == 2


def test_train_divergence_exit(workspace, tmp_path):
    cfg = dict(SMOKE, data={"root": str(workspace / "data")})
    cfg["train"] = dict(cfg["train"], lr0=1e30, grad_clip=0.0, epochs=3)
    path = tmp_path / "hot.yaml"
    path.write_text(yaml.safe_dump(cfg))
    res = run("train", "--config", path, "--out", tmp_path / "r")
    assert res.exit_code == 4, res.output
    assert (tmp_path / "r" / "diverged.ckpt").exists()


def test_eval_identity_fixture(tmp_path, monkeypatch):
    """A model whose predictions equal the labels scores map50 = 1."""
    import bpim.cli as cli

    runner = CliRunner()
    runner.invoke(main, ["synth", "--seed", "2", "--n", "3", "--size", "64", "--out", str(tmp_path / "d")])
    items = load_dataset(tmp_path / "d")
    truth = [torch.tensor([[b.cx, b.cy, b.w, b.h, 1.0, c] for c, b in it.boxes]) for it in items]

    def oracle(model, dataset, conf, iou):
        from bpim.metrics import evaluate_detections

        return evaluate_detections(truth, [torch.from_numpy(it.labels) for it in dataset], 2)

    monkeypatch.setattr(cli, "evaluate", oracle)
    ckpt = save_checkpoint(build(ModelConfig(width_multiple=0.0625, input_size=64, heads=2, ff_dim=32)), tmp_path / "m.ckpt")
    res = run("eval", "--checkpoint", ckpt, "--data", tmp_path / "d", "--out", tmp_path / "ev")
    assert "map50 1.000000" in res.output
    assert json.loads((tmp_path / "ev" / "eval.json").read_text())["map50"] == 1.0


def test_detect_outputs_and_round_trip(workspace, tmp_path):
    ckpt = save_checkpoint(build(ModelConfig(width_multiple=0.0625, input_size=64, heads=2, ff_dim=32), seed=0), tmp_path / "m.ckpt")
    res = run("detect", "--checkpoint", ckpt, "--images", workspace / "data" / "images", "--conf", 0.001, "--out", tmp_path / "det")
    assert res.exit_code == 0, res.output
    txts = sorted((tmp_path / "det" / "detections").glob("*.txt"))
    assert len(txts) == 8
    for t in txts:
        for line in t.read_text().splitlines():
            cls, box, (conf,) = parse_label_line(line, num_classes=2, extra=1)
            assert 0 <= conf <= 1
        assert len(read_labels(t, 2, extra=1)) == len(t.read_text().splitlines())
    assert len(list((tmp_path / "det" / "overlays").glob("*.png"))) == 8


def test_detect_zero_detections_is_clean_copy(workspace, tmp_path):
    ckpt = save_checkpoint(build(ModelConfig(width_multiple=0.0625, input_size=64, heads=2, ff_dim=32), seed=0), tmp_path / "m.ckpt")
    res = run("detect", "--checkpoint", ckpt, "--images", workspace / "data" / "images", "--conf", 0.999, "--out", tmp_path / "det")
    assert res.exit_code == 0
    src = np.asarray(Image.open(workspace / "data" / "images" / "synth_0.png").convert("RGB"))
    over = np.asarray(Image.open(tmp_path / "det" / "overlays" / "synth_0.png").convert("RGB"))
    assert np.array_equal(src, over)
    assert (tmp_path / "det" / "detections" / "synth_0.txt").read_text() == ""


def test_detect_all_unreadable(tmp_path):
    ckpt = save_checkpoint(build(ModelConfig(width_multiple=0.0625, input_size=64, heads=2, ff_dim=32)), tmp_path / "m.ckpt")
    (tmp_path / "imgs").mkdir()
    (tmp_path / "imgs" / "a.png").write_text("not an image")
    assert run("detect", "--checkpoint", ckpt, "--images", tmp_path / "imgs", "--out", tmp_path / "o").exit_code == 1


def test_overlay_pixel_probe():
    img = np.zeros((3, 64, 96), np.float32)
    det = np.array([[0.5, 0.25, 0.25, 0.25, 0.9, 1]])  # x 36..60, y 8..24
    arr = np.asarray(draw_overlay(img, det))
    colour = np.array(PALETTE[1])
    hits = np.argwhere((arr == colour).all(-1))
    ys, xs = hits[:, 0], hits[:, 1]
    expect = ((0.5 - 0.125) * 96, (0.25 - 0.125) * 64, (0.5 + 0.125) * 96, (0.25 + 0.125) * 64)
    measured = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    assert max(abs(m - e) for m, e in zip(measured, expect)) <= 1
    # interior untouched
    assert (arr[12:20, 40:56] == 0).all()


def test_inspect(workspace):
    res = run("inspect", "--config", workspace / "smoke.yaml")
    report = json.loads(res.output)
    assert res.exit_code == 0 and report["params"] > 0 and report["flags"]["big"] is True
    assert sum(report["modules"].values()) == report["params"]


def test_ablate_two_rows(workspace, tmp_path):
    res = run("ablate", "--config", workspace / "smoke.yaml", "--row", "", "--row", "big,awf,pig,csf_tff", "--out", tmp_path / "a")
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert lines[0].split(",")[:6] == ["Datasets", "YOLOv5n-P2", "BIG", "AWF", "PIG", "CSF"]
    assert len(lines) == 3
    assert run("ablate", "--config", workspace / "smoke.yaml", "--row", "bogus", "--out", tmp_path / "b").exit_code == 2
