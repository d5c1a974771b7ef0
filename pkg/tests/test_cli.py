import csv
import json
import time

import numpy as np
import pytest

from instaformer.cli import main, montage, moving_average
from instaformer.data import read_dataset, read_ppm

TINY = {
    "steps": 4, "ckpt_every": 2, "batch": 2,
    "backbone": {"image_size": 32, "base_channels": 4, "content_channels": 8, "style_dim": 4},
    "aggregator": {"patch_stride": 2, "token_dim": 16, "blocks": 1, "heads": 2, "mlp_dim": 32},
    "nce": {"patches_per_layer": 6, "projection_dim": 8, "hidden_dim": 8, "instance_grid": 2},
}


def _write_config(path, extra=None):
    cfg = dict(TINY, **(extra or {}))
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny trained run shared by the read-only subcommand tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n", "4", "--size", "32"]) == 0
    cfg = _write_config(root / "tiny.json")
    assert main(["train", "--config", str(cfg), "--data-a", str(root / "data" / "A"),
                 "--data-b", str(root / "data" / "B"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_deterministic(tmp_path, capsys):
    for name in ("x", "y"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n", "3", "--seed", "5"]) == 0
    for d in ("A", "B"):
        a, b = read_dataset(tmp_path / "x" / d), read_dataset(tmp_path / "y" / d)
        assert len(a) == 3
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.image, t.image)
            assert s.boxes == t.boxes
    assert "3 images" in capsys.readouterr().out


@pytest.mark.parametrize("argv,msg", [
    (["gen-data", "--out", "o", "--domains", "A,C"], "unknown domain"),
    (["gen-data", "--out", "o", "--n", "0"], "--n must be"),
    (["gen-data", "--out", "o", "--size", "30"], "image_size"),
])
def test_gen_data_usage_errors(tmp_path, capsys, argv, msg):
    argv = [str(tmp_path / a) if a == "o" else a for a in argv]
    assert main(argv) == 2
    assert msg in capsys.readouterr().err


def test_train_artifacts(run):
    out = run / "run"
    record = json.loads((out / "run.json").read_text())
    assert record["steps"] == 4 and record["paths"]["data_a"].endswith("A")
    with open(out / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert sorted(p.name for p in out.glob("*.ifck")) == ["ckpt_000002.ifck", "ckpt_000004.ifck",
                                                          "final.ifck"]


def test_train_usage_errors(tmp_path, run, capsys):
    cfg = _write_config(tmp_path / "c.json")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "need --data-a" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"lr": 1, "bogus": 2}')
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert "bogus" in capsys.readouterr().err
    # 32px data against the 64px default architecture
    assert main(["train", "--config", str(_write_config(tmp_path / "d.json", {"backbone": {}})),
                 "--data-a", str(run / "data" / "A"), "--data-b", str(run / "data" / "B"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "config expects 64px" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure_exit_code(tmp_path, run, capsys):
    cfg = _write_config(tmp_path / "c.json", {"lr": 1e308, "steps": 3})
    code = main(["train", "--config", str(cfg), "--data-a", str(run / "data" / "A"),
                 "--data-b", str(run / "data" / "B"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_translate_deterministic_and_box_toggle(tmp_path, run):
    ckpt, data = str(run / "run" / "final.ifck"), str(run / "data" / "A")
    outs = {}
    for tag, extra in (("a", []), ("b", []), ("boxes", ["--boxes", "on"]),
                       ("s1", ["--style-seed", "1"])):
        assert main(["translate", "--ckpt", ckpt, "--input", data,
                     "--out", str(tmp_path / tag)] + extra) == 0
        outs[tag] = np.stack([read_ppm(p) for p in sorted((tmp_path / tag / "images").glob("*.ppm"))])
    assert outs["a"].shape == (4, 3, 32, 32)
    np.testing.assert_array_equal(outs["a"], outs["b"])
    assert np.abs(outs["a"] - outs["boxes"]).max() > 0
    assert np.abs(outs["a"] - outs["s1"]).max() > 0


def test_translate_style_from_reference(tmp_path, run):
    ref = sorted((run / "data" / "B" / "images").glob("*.ppm"))[0]
    assert main(["translate", "--ckpt", str(run / "run" / "final.ifck"),
                 "--input", str(run / "data" / "A"), "--out", str(tmp_path / "t"),
                 "--style-from", str(ref)]) == 0
    assert len(list((tmp_path / "t" / "images").glob("*.ppm"))) == 4


def test_translate_missing_checkpoint(tmp_path, run, capsys):
    assert main(["translate", "--ckpt", str(tmp_path / "nope.ifck"), "--input",
                 str(run / "data" / "A"), "--out", str(tmp_path / "t")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_checkpoint_without_matching_config(tmp_path, run, capsys):
    lonely = tmp_path / "final.ifck"
    lonely.write_bytes((run / "run" / "final.ifck").read_bytes())
    # no run.json next to it, so the default architecture is assumed and rejected
    assert main(["eval", "--ckpt", str(lonely), "--data-a", str(run / "data" / "A"),
                 "--out", str(tmp_path / "e")]) == 2
    assert "incompatible checkpoint" in capsys.readouterr().err
    cfg = _write_config(tmp_path / "c.json")
    assert main(["eval", "--ckpt", str(lonely), "--config", str(cfg),
                 "--data-a", str(run / "data" / "A"), "--out", str(tmp_path / "e")]) == 0


def test_eval_on_untrained_checkpoint(tmp_path, run):
    ckpt = str(run / "run" / "ckpt_000002.ifck")
    assert main(["eval", "--ckpt", ckpt, "--data-a", str(run / "data" / "A"),
                 "--data-b", str(run / "data" / "B"), "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "metrics.json").read_text())
    agg = report["aggregate"]
    assert -1 <= agg["ssim"] <= 1
    assert agg["input_palette_B"] > 0
    assert len(report["images"]) == 4
    ref = report["reference_B"]
    assert ref["palette_B"] < ref["palette_A"]


def test_report_writes_curve_and_montage(tmp_path, run):
    assert main(["report", "--run", str(run / "run"), "--out", str(tmp_path / "r"),
                 "--rows", "2"]) == 0
    with open(tmp_path / "r" / "loss_curve.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "total_ma10", "recon_img_ma10", "nce_global_ma10"]
    assert len(rows) == 5
    grid = read_ppm(tmp_path / "r" / "montage.ppm")
    assert grid.shape == (3, 2 * 32 + 2, 3 * 32 + 4)


def test_report_without_metrics(tmp_path, capsys):
    assert main(["report", "--run", str(tmp_path), "--out", str(tmp_path / "r")]) == 2
    assert "no metrics.csv" in capsys.readouterr().err


def test_montage_layout():
    imgs = [np.full((3, 4, 5), v) for v in (-1.0, 0.0, 0.5)]
    grid = montage([imgs, imgs])
    assert grid.shape == (3, 2 * 4 + 2, 3 * 5 + 4)
    assert np.all(grid[:, :, 5:7] == 1.0)
    assert np.all(grid[:, 6:, 7:12] == 0.0)


def test_moving_average():
    v = np.arange(1.0, 13.0)
    ma = moving_average(v, window=10)
    assert ma[0] == 1.0 and ma[1] == 1.5
    assert ma[11] == pytest.approx(np.mean(v[2:]))


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_smoke_run_under_a_minute(tmp_path):
    """Ten steps of the default desk configuration."""
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--n", "4"]) == 0
    cfg = tmp_path / "smoke.json"
    cfg.write_text(json.dumps({"steps": 10, "ckpt_every": 10}))
    start = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--data-a", str(tmp_path / "data" / "A"),
                 "--data-b", str(tmp_path / "data" / "B"), "--out", str(tmp_path / "run")]) == 0
    assert time.perf_counter() - start < 60
