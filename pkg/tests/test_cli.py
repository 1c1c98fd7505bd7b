import json

import numpy as np
import pytest

from lumvit.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from lumvit.data import load_cube, upsample_to_27, write_labels
from lumvit.train import load_checkpoint, predict_logits

CONFIG = {
    "seed": 0, "batch_size": 16, "d_tar": 0.3,
    "data": {"synthetic": {"classes": 2, "bands": 6, "size": 24, "seed": 1, "noise_sigma": 0.0}},
    "model": {"embed_dim": 12, "depth": 1, "heads": 2, "mlp_ratio": 2, "drop_path": 0.0},
    "stage_overrides": {"1": {"epochs": 20}, "2": {"epochs": 1}, "3": {"epochs": 1}},
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--classes", "2", "--bands", "6", "--size", "24", "--synth-noise", "0",
                 "--seed", "1", "--out", str(root / "data")]) == EXIT_OK
    cfg = dict(CONFIG, data={"cube": str(root / "data" / "cube.hsc"), "labels": str(root / "data" / "labels.hsl")})
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run")]) == EXIT_OK
    return root


def test_gen_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-synth", "--classes", "3", "--bands", "8", "--size", "16", "--seed", "7",
                     "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("cube.hsc", "labels.hsl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "cube.hsc").read_bytes().startswith(b"HSC1 16 16 8 f32 hwc\n")


def test_train_writes_artifacts(trained):
    run = trained / "run"
    for name in ("config.json", "metrics_stage1.csv", "metrics_stage2.csv", "metrics_stage3.csv",
                 "stage1.ckpt", "stage3.ckpt", "model.ckpt"):
        assert (run / name).exists(), name
    assert (run / "model.ckpt").read_bytes().startswith(b"LUMCKPT1\n")


def test_eval_reports_before_and_after(trained, capsys):
    out = trained / "report.json"
    assert main(["eval", "--checkpoint", str(trained / "run" / "model.ckpt"), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "before mask: OA" in text and "after mask:  OA" in text
    rep = json.loads(out.read_text())
    assert rep["d_ops"] == pytest.approx(32 / 108)
    assert np.trace(np.array(rep["confusion"])) / rep["samples"] == pytest.approx(rep["after_mask_oa"])


def test_eval_perfect_fixture_prints_one(trained, tmp_path, capsys):
    """Relabel every pixel with the model's own after-mask prediction."""
    loaded = load_checkpoint(trained / "run" / "model.ckpt")
    model = loaded.model.astype(np.float64)
    cube = load_cube(trained / "data" / "cube.hsc").data.astype(np.float64)
    H, W, _ = cube.shape
    padded = np.pad(loaded.norm.apply(cube, np.float32), ((4, 4), (4, 4), (0, 0)), mode="reflect")
    rows, cols = np.mgrid[0:H, 0:W]
    r = rows.reshape(-1)[:, None] + np.arange(9)
    c = cols.reshape(-1)[:, None] + np.arange(9)
    windows = padded[r[:, :, None], c[:, None, :]]
    logits = predict_logits(model, upsample_to_27(windows).astype(np.float64), fixed=model.export_mask(), dmd=True)
    labels = logits.argmax(axis=1).reshape(H, W) + 1
    assert set(np.unique(labels)) == {1, 2}
    write_labels(tmp_path / "perfect.hsl", labels)
    code = main(["eval", "--checkpoint", str(trained / "run" / "model.ckpt"),
                 "--cube", str(trained / "data" / "cube.hsc"), "--labels", str(tmp_path / "perfect.hsl")])
    assert code == EXIT_OK
    assert "after mask:  OA 1.000" in capsys.readouterr().out


def test_export_and_fixed_mask_eval_agree(trained, tmp_path):
    ckpt = str(trained / "run" / "model.ckpt")
    sched = tmp_path / "mask.dmd"
    assert main(["export-mask", "--checkpoint", ckpt, "--out", str(sched)]) == EXIT_OK
    assert sched.read_bytes().startswith(b"DMDSCHED1 9 12 6 9\n")
    a, b = tmp_path / "a.npy", tmp_path / "b.npy"
    ja, jb = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["eval", "--checkpoint", ckpt, "--logits", str(a), "--out", str(ja)]) == EXIT_OK
    assert main(["eval", "--checkpoint", ckpt, "--fixed-mask", str(sched), "--logits", str(b),
                 "--out", str(jb)]) == EXIT_OK
    assert np.load(a).tobytes() == np.load(b).tobytes()
    assert json.loads(ja.read_text())["after_mask_oa"] == json.loads(jb.read_text())["after_mask_oa"]


def test_noise_needs_seed(trained):
    assert main(["eval", "--checkpoint", str(trained / "run" / "model.ckpt"), "--noise-sigma", "0.1"]) == EXIT_USAGE


def test_noisy_eval_seeded(trained, tmp_path):
    ckpt = str(trained / "run" / "model.ckpt")
    outs = []
    for k in range(2):
        p = tmp_path / f"n{k}.npy"
        assert main(["eval", "--checkpoint", ckpt, "--noise-sigma", "0.05", "--seed", "3",
                     "--logits", str(p)]) == EXIT_OK
        outs.append(np.load(p))
    np.testing.assert_array_equal(outs[0], outs[1])


def test_visualize_mean_tracks_rate(trained, tmp_path):
    assert main(["visualize", "--checkpoint", str(trained / "run" / "stage1.ckpt"), "--out",
                 str(tmp_path), "--pixels", "4"]) == EXIT_OK
    lines = (tmp_path / "heatmap.csv").read_text().splitlines()
    assert lines[:2] == ["# LUMHEAT1", "row,col,mean_retain"]
    vals = np.array([float(ln.split(",")[2]) for ln in lines[2:]])
    assert len(vals) == 9 and np.all((vals >= 0) & (vals <= 1))
    metrics = (trained / "run" / "metrics_stage1.csv").read_text().splitlines()
    achieved = float(metrics[-1].split(",")[3])
    assert abs(vals.mean() - achieved) <= 0.01
    pgm = (tmp_path / "heatmap.pgm").read_bytes()
    assert pgm.startswith(b"P5\n12 12\n255\n") and len(pgm) == len(b"P5\n12 12\n255\n") + 144
    hist = (tmp_path / "kernel_hist.csv").read_text().splitlines()
    assert hist[0] == "# LUMKHIST1" and len(hist) == 2 + 12


def test_cs_bench_csv(tmp_path):
    out = tmp_path / "cs.csv"
    assert main(["cs-bench", "--rates", "0.1,0.3", "--trials", "3", "--seed", "0", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[:2] == ["# LUMCSBENCH1", "rate,psnr_mean,psnr_std,recovery_rate"]
    assert len(lines) == 4


def test_export_rejects_cs_style_errors_with_exit_one(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    assert main(["export-mask", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path / "x")]) \
        == EXIT_VALIDATION


def test_validation_error_exit_one(tmp_path):
    assert main(["train", "--seed", "0", "--d-tar", "1.5", "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_seed_mandatory(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_numeric_abort_exit_two(capsys):
    assert main(["gradcheck", "--no-graph", "--tol", "0"]) == EXIT_NUMERIC


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--bogus"], ["cs-bench"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE
