import subprocess
import sys

import numpy as np
import pytest

from demfuse import align, synth
from demfuse.cli import main
from demfuse.metrics import AccuracyReport
from demfuse.mlp import load_model
from demfuse.raster import load_grid, save_grid, with_header

FAST = ["--max-epochs", "400"]


def run(capsys, *args):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and " " not in line)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Training scene, held-out scene and one model per DEM, made through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--size", "65", "--seed", "5", "--out", str(d / "train")]) == 0
    assert main(["synth", "--size", "65", "--seed", "105", "--out", str(d / "test")]) == 0
    for side in ("a", "b"):
        code = main(["train", str(d / "train" / f"dem_{side}.asc"), str(d / "train" / "truth.asc"),
                     "--out", str(d / f"model_{side}.txt"), "--history", str(d / f"hist_{side}.csv"), *FAST])
        assert code == 0
    return d


def test_synth_files_and_determinism(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--size", 33, "--seed", 7, "--preset", "insar-like,optical-like",
                       "--out", tmp_path / "s1")
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "s1").iterdir())
    assert names == ["dem_a.asc", "dem_b.asc", "hem_a.asc", "hem_b.asc", "manifest.txt", "truth.asc"]
    manifest = kv((tmp_path / "s1" / "manifest.txt").read_text())
    assert manifest["seed"] == "7" and manifest["preset_a"] == "insar-like"
    run(capsys, "synth", "--size", 33, "--seed", 7, "--out", tmp_path / "s2")
    for n in names:
        assert (tmp_path / "s1" / n).read_bytes() == (tmp_path / "s2" / n).read_bytes()


@pytest.mark.parametrize("args", [
    ["synth", "--size", "200", "--out", "x"],
    ["synth", "--size", "33", "--preset", "insar-like", "--out", "x"],
    ["synth", "--size", "33", "--preset", "insar-like,lidar", "--out", "x"],
    ["synth"],
    ["frobnicate"],
])
def test_usage_errors(args, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *args)
    assert code == 2
    assert err


def test_train_outputs(workdir, capsys):
    model = load_model(workdir / "model_a.txt")
    assert model.layer_sizes == [10, 20, 1]
    hist = (workdir / "hist_a.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_sse,val_sse" and len(hist) > 2
    code, out, _ = run(capsys, "train", workdir / "train" / "dem_a.asc", workdir / "train" / "truth.asc",
                       "--out", workdir / "again.txt", *FAST)
    assert code == 0
    stats = kv(out)
    assert float(stats["test_correlation"]) > 0.9
    assert {"train_sse", "val_sse", "test_sse"} <= stats.keys()
    # same inputs and seed give the same model file
    assert (workdir / "again.txt").read_text() == (workdir / "model_a.txt").read_text()


def test_train_options(workdir, capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("hidden = 5\nfeatures = slope,tri,roughness\nmax_samples = 1500\n")
    code, out, _ = run(capsys, "train", workdir / "train" / "dem_a.asc", workdir / "train" / "truth.asc",
                       "--config", cfg, "--hidden", "8,4", "--max-epochs", "60",
                       "--also", workdir / "test" / "dem_a.asc", workdir / "test" / "truth.asc",
                       "--out", tmp_path / "m.txt")
    assert code == 0
    m = load_model(tmp_path / "m.txt")
    assert m.layer_sizes == [3, 8, 4, 1]
    assert m.feature_names == ["slope", "tri", "roughness"]


def test_train_missing_reference(workdir, capsys, tmp_path):
    code, _, err = run(capsys, "train", workdir / "train" / "dem_a.asc", tmp_path / "missing.asc",
                       "--out", tmp_path / "m.txt")
    assert code == 2 and "not found" in err


def test_train_with_aux(workdir, capsys, tmp_path):
    d = workdir / "train"
    code, _, _ = run(capsys, "train", d / "dem_a.asc", d / "truth.asc", "--aux", d / "hem_a.asc",
                     "--features", "slope,roughness", "--max-epochs", "60", "--out", tmp_path / "m.txt")
    assert code == 0
    assert load_model(tmp_path / "m.txt").feature_names == ["slope", "roughness", "aux"]
    code, _, _ = run(capsys, "predict", tmp_path / "m.txt", d / "dem_a.asc", "--out", tmp_path / "p.asc")
    assert code == 2
    code, _, _ = run(capsys, "predict", tmp_path / "m.txt", d / "dem_a.asc", "--aux", d / "hem_a.asc",
                     "--out", tmp_path / "p.asc")
    assert code == 0


def test_train_bad_config_key(workdir, capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rat = 0.1\n")
    code, _, err = run(capsys, "train", workdir / "train" / "dem_a.asc", workdir / "train" / "truth.asc",
                       "--config", cfg, "--out", tmp_path / "m.txt")
    assert code == 2 and "learning_rat" in err


def test_features_and_residuals(workdir, capsys, tmp_path):
    d = workdir / "train"
    code, _, _ = run(capsys, "features", d / "dem_a.asc", "--features", "slope,tpi", "--out", tmp_path / "f.csv")
    assert code == 0
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "row,col,slope,tpi" and len(lines) == 1 + 63 * 63
    code, _, _ = run(capsys, "residuals", d / "dem_a.asc", d / "truth.asc", "--out", tmp_path / "t.csv",
                     "--bins", tmp_path / "b.csv", "--min-count", "5")
    assert code == 0
    assert (tmp_path / "t.csv").read_text().splitlines()[0].endswith(",edginess,target")
    assert (tmp_path / "b.csv").read_text().startswith("feature,bin,left,right,count,mean_abs_residual")
    code, _, _ = run(capsys, "features", d / "dem_a.asc", "--features", "aux", "--out", tmp_path / "f.csv")
    assert code == 2


def test_predict(workdir, capsys, tmp_path):
    code, _, _ = run(capsys, "predict", workdir / "model_a.txt", workdir / "test" / "dem_a.asc",
                     "--out", tmp_path / "err.asc")
    assert code == 0
    err = load_grid(tmp_path / "err.asc")
    assert err.valid[1:-1, 1:-1].all() and not err.valid[0].any()
    assert np.all(err.values[err.valid] >= 0)


def test_fuse_modes(workdir, capsys, tmp_path):
    t = workdir / "test"
    code, out, _ = run(capsys, "fuse", t / "dem_a.asc", t / "dem_b.asc", "--mode", "ann",
                       "--models", workdir / "model_a.txt", workdir / "model_b.txt",
                       "--truth", t / "truth.asc", "--report", tmp_path / "r.txt", "--out", tmp_path / "f.asc")
    assert code == 0
    rep = kv(out)
    assert float(rep["rmse"]) < min(float(rep["input_a_rmse"]), float(rep["input_b_rmse"]))
    assert float(rep["pct_improved"]) > 50
    assert AccuracyReport.from_text((tmp_path / "r.txt").read_text()).rmse == pytest.approx(float(rep["rmse"]))

    code, out, _ = run(capsys, "fuse", t / "dem_a.asc", t / "dem_b.asc", "--mode", "hem",
                       "--hems", t / "hem_a.asc", t / "hem_b.asc", "--truth", t / "truth.asc",
                       "--out", tmp_path / "h.asc")
    assert code == 0
    rep = kv(out)
    assert float(rep["rmse"]) < min(float(rep["input_a_rmse"]), float(rep["input_b_rmse"]))

    code, _, _ = run(capsys, "fuse", t / "dem_a.asc", t / "dem_a.asc", "--mode", "average", "--out", tmp_path / "a.asc")
    assert code == 0
    np.testing.assert_allclose(load_grid(tmp_path / "a.asc").values, load_grid(t / "dem_a.asc").values, rtol=1e-14)


def test_fuse_mask_substitution(workdir, capsys, tmp_path):
    t = workdir / "test"
    dem_b = load_grid(t / "dem_b.asc")
    mask = np.zeros(dem_b.shape)
    mask[:10, :10] = 1
    save_grid(dem_b.with_values(mask), tmp_path / "lake.asc")
    code, _, _ = run(capsys, "fuse", t / "dem_a.asc", t / "dem_b.asc", "--mode", "average",
                     "--mask", tmp_path / "lake.asc", "--out", tmp_path / "f.asc")
    assert code == 0
    fused = load_grid(tmp_path / "f.asc").values
    np.testing.assert_allclose(fused[:10, :10], dem_b.values[:10, :10], rtol=1e-14)


@pytest.mark.parametrize("extra", [
    ["--mode", "ann"],
    ["--mode", "hem"],
    ["--mode", "average", "--hems", "x.asc", "y.asc"],
])
def test_fuse_mode_mismatch(workdir, capsys, tmp_path, extra):
    t = workdir / "test"
    code, _, _ = run(capsys, "fuse", t / "dem_a.asc", t / "dem_b.asc", *extra, "--out", tmp_path / "f.asc")
    assert code == 2


def test_eval(workdir, capsys, tmp_path):
    t = workdir / "test"
    code, out, _ = run(capsys, "eval", t / "truth.asc", t / "truth.asc")
    assert code == 0 and float(kv(out)["rmse"]) == 0.0 and "pct_improved" not in out
    run(capsys, "fuse", t / "dem_a.asc", t / "dem_b.asc", "--models", workdir / "model_a.txt",
        workdir / "model_b.txt", "--out", tmp_path / "f.asc")
    code, out, _ = run(capsys, "eval", tmp_path / "f.asc", t / "truth.asc", "--baseline", t / "dem_b.asc",
                       "--out", tmp_path / "r.txt")
    assert code == 0
    assert float(kv(out)["pct_improved"]) > 50
    assert (tmp_path / "r.txt").read_text() == out
    shifted = with_header(load_grid(t / "truth.asc"), xll=50.0)
    save_grid(shifted, tmp_path / "shifted.asc")
    code, _, _ = run(capsys, "eval", t / "dem_a.asc", tmp_path / "shifted.asc")
    assert code == 2


@pytest.fixture(scope="module")
def align_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("align")
    fixed = synth.generate_terrain(129, 0.7, seed=3, z_range=(0, 200))
    xs, ys = fixed.header.cell_centers()
    t = align.RigidTransform.from_yaw(0.3, center=(xs.mean(), ys.mean(), 0), shift=(10.0, -5.0, 1.5))
    save_grid(fixed, d / "fixed.asc")
    save_grid(align.apply_transform(fixed, t.inverse(), fixed.header), d / "moving.asc")
    save_grid(with_header(fixed, xll=1e6), d / "far.asc")
    return d


def test_align_command(align_pair, capsys):
    d = align_pair
    code, out, _ = run(capsys, "align", d / "moving.asc", d / "fixed.asc", "--transform", d / "t.txt",
                       "--out", d / "aligned.asc")
    assert code == 0
    stats = kv(out)
    assert float(stats["post_rmse"]) < float(stats["pre_rmse"])
    t = align.RigidTransform.load(d / "t.txt")
    assert t.yaw_degrees == pytest.approx(0.3, abs=0.1)
    assert load_grid(d / "aligned.asc").header == load_grid(d / "fixed.asc").header


def test_align_identical_and_disjoint(align_pair, capsys):
    d = align_pair
    code, _, _ = run(capsys, "align", d / "fixed.asc", d / "fixed.asc", "--transform", d / "i.txt",
                     "--out", d / "i.asc")
    assert code == 0
    t = align.RigidTransform.load(d / "i.txt")
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9) and np.allclose(t.translation, 0, atol=1e-6)
    code, _, err = run(capsys, "align", d / "far.asc", d / "fixed.asc", "--transform", d / "x.txt",
                       "--out", d / "x.asc")
    assert code == 1 and "overlap" in err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "demfuse.cli", "synth", "--size", "100", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "2**k + 1" in proc.stderr
