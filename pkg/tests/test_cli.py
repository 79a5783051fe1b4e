import json
import logging

import numpy as np
import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from pano_ba.cli import app
from pano_ba.errors import PACKAGE_LOGGERS
from pano_ba.mapio import load_map_raw, save_map_raw
from pano_ba.utils import file_digest

CALIB = "width = 32\nheight = 24\nfx = 30.0\nfy = 30.0\ncx = 16.0\ncy = 12.0\n"
SIM_ARGS = [
    "simulate", "--scene", "sinusoid", "--calibration", "calib.txt", "--motion", "sinusoid",
    "--duration", "1.0", "--amplitude-deg", "30", "--map-size", "128x64", "--dt-sample", "1e-3",
    "--pose-freq", "20", "--pose-noise-deg", "0.5", "--out-dir", "sim",
]


@pytest.fixture
def runner():
    yield CliRunner(mix_stderr=False)
    # the root callback binds handlers to the runner's captured streams
    logging.captureWarnings(False)
    for name in PACKAGE_LOGGERS:
        lg = logging.getLogger(name)
        for h in list(lg.handlers):
            lg.removeHandler(h)
            h.close()
        lg.propagate = True


@pytest.fixture
def sim_dir(tmp_path, monkeypatch, runner):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "calib.txt").write_text(CALIB)
    result = runner.invoke(app, SIM_ARGS)
    assert result.exit_code == 0, result.stderr
    return tmp_path / "sim"


def _error(result):
    line = [ln for ln in result.stderr.splitlines() if ln.strip()][-1]
    return json.loads(line)


def test_simulate_writes_dataset_and_manifest(sim_dir):
    for name in ("events.txt", "gt_trajectory.txt", "init_trajectory.txt", "calibration.txt",
                 "gt_map.raw", "gt_map.pgm", "manifest.yaml"):
        assert (sim_dir / name).exists(), name
    manifest = yaml.safe_load((sim_dir / "manifest.yaml").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["params"]["map_size"] == [128, 64]
    assert manifest["files"]["events.txt"] == file_digest(sim_dir / "events.txt")
    assert manifest["params"]["events"] > 0
    assert load_map_raw(sim_dir / "gt_map.raw").shape == (64, 128)


def test_solve_end_to_end(sim_dir, runner):
    result = runner.invoke(app, [
        "solve", "--events", "sim/events.txt", "--calibration", "sim/calibration.txt",
        "--init-traj", "sim/init_trajectory.txt", "--gt-traj", "sim/gt_trajectory.txt",
        "--map-size", "128x64", "--max-iterations", "3", "--deterministic", "--out-dir", "out",
    ])
    assert result.exit_code == 0, result.stderr
    assert "PhE" in result.stdout
    out = sim_dir.parent / "out"
    for name in ("trajectory.txt", "map.raw", "map.pgm", "map_mask.pgm", "dense.raw", "iterations.csv",
                 "iterations_bootstrap.csv", "histogram_init.csv", "histogram_final.csv", "metrics.csv",
                 "summary.txt", "manifest.yaml"):
        assert (out / name).exists(), name
    metrics = dict(pd.read_csv(out / "metrics.csv").values)
    assert float(metrics["phe_final"]) <= float(metrics["phe_init"])
    assert "are_final_deg" in metrics
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    assert manifest["params"]["solver"]["max_workers"] == 1
    assert manifest["params"]["solver"]["max_iterations"] == 3
    assert np.all(np.isfinite(load_map_raw(out / "dense.raw")))


def test_map_only_reports_correlation(sim_dir, runner):
    result = runner.invoke(app, [
        "map-only", "--events", "sim/events.txt", "--calibration", "sim/calibration.txt",
        "--init-traj", "sim/gt_trajectory.txt", "--gt-map", "sim/gt_map.raw", "--map-size", "128x64",
        "--pose-freq", "100", "--out-dir", "mo",
    ])
    assert result.exit_code == 0, result.stderr
    metrics = dict(pd.read_csv(sim_dir.parent / "mo" / "metrics.csv").values)
    assert float(metrics["valid_pixel_correlation"]) > 0.5


def test_eval_of_ground_truth_is_zero(sim_dir, runner):
    result = runner.invoke(app, ["eval", "--est", "sim/gt_trajectory.txt", "--gt", "sim/gt_trajectory.txt",
                                 "--out-dir", "ev"])
    assert result.exit_code == 0, result.stderr
    assert "ARE 0.0000 deg" in result.stdout


def test_densify_fills_nan_pixels(tmp_path, monkeypatch, runner):
    monkeypatch.chdir(tmp_path)
    yy, xx = np.mgrid[0:16, 0:32]
    values = 0.01 * xx + 0.02 * yy
    values[5:9, 10:20] = np.nan
    save_map_raw(values, tmp_path / "semi.raw")
    result = runner.invoke(app, ["densify", "--map", "semi.raw", "--out-dir", "dn"])
    assert result.exit_code == 0, result.stderr
    dense = load_map_raw(tmp_path / "dn" / "dense.raw")
    assert dense.shape == (16, 32) and np.all(np.isfinite(dense))


def test_missing_inputs_exit_with_config_code(tmp_path, monkeypatch, runner):
    monkeypatch.chdir(tmp_path)
    result = runner.invoke(app, ["solve", "--map-size", "128x64"])
    assert result.exit_code == 2
    err = _error(result)
    assert err["error"] == "ConfigError" and "--events" in err["message"]


def test_explicit_missing_config_file(tmp_path, monkeypatch, runner):
    monkeypatch.chdir(tmp_path)
    result = runner.invoke(app, ["solve", "--config", "nope.yaml"])
    assert result.exit_code == 2
    assert _error(result)["exit_code"] == 2


def test_unknown_loss_is_rejected(tmp_path, monkeypatch, runner):
    monkeypatch.chdir(tmp_path)
    result = runner.invoke(app, ["solve", "--loss", "l1"])
    assert result.exit_code == 2


def test_unsorted_events_exit_with_data_code(sim_dir, runner):
    lines = (sim_dir / "events.txt").read_text().splitlines()
    (sim_dir / "events.txt").write_text("\n".join(reversed(lines)) + "\n")
    result = runner.invoke(app, [
        "solve", "--events", "sim/events.txt", "--calibration", "sim/calibration.txt",
        "--init-traj", "sim/init_trajectory.txt", "--map-size", "128x64", "--out-dir", "out",
    ])
    assert result.exit_code == 3
    assert _error(result)["error"] == "EventIngestError"


def test_malformed_events_exit_with_data_code(sim_dir, runner):
    (sim_dir / "events.txt").write_text("0.1 1 2 1\n0.2 oops 2 1\n")
    result = runner.invoke(app, [
        "solve", "--events", "sim/events.txt", "--calibration", "sim/calibration.txt",
        "--init-traj", "sim/init_trajectory.txt", "--map-size", "128x64",
    ])
    assert result.exit_code == 3
    assert _error(result)["error"] == "EventParseError"


def test_sweep_contrast_writes_table(sim_dir, runner):
    cfg = {"sweep_contrast": {"max_iterations": 2, "deterministic": True}}
    (sim_dir.parent / "sweep.yaml").write_text(yaml.safe_dump(cfg))
    result = runner.invoke(app, [
        "sweep-contrast", "--contrasts", "0.1,0.2", "--events", "sim/events.txt",
        "--calibration", "sim/calibration.txt", "--init-traj", "sim/init_trajectory.txt",
        "--map-size", "128x64", "--out-dir", "sw", "--config", "sweep.yaml",
    ])
    assert result.exit_code == 0, result.stderr
    table = pd.read_csv(sim_dir.parent / "sw" / "sweep.csv")
    assert table["contrast"].tolist() == [0.1, 0.2]
    assert (sim_dir.parent / "sw" / "C_0.1" / "trajectory.txt").exists()
    assert "C=0.2" in result.stdout


def test_sweep_pose_freq_resamples_per_frequency(sim_dir, runner):
    cfg = {"sweep_pose_freq": {"max_iterations": 2, "deterministic": True}}
    (sim_dir.parent / "sweep.yaml").write_text(yaml.safe_dump(cfg))
    result = runner.invoke(app, [
        "sweep-pose-freq", "--freqs", "10,20", "--events", "sim/events.txt",
        "--calibration", "sim/calibration.txt", "--init-traj", "sim/init_trajectory.txt",
        "--gt-traj", "sim/gt_trajectory.txt", "--map-size", "128x64", "--out-dir", "sw", "--config", "sweep.yaml",
    ])
    assert result.exit_code == 0, result.stderr
    table = pd.read_csv(sim_dir.parent / "sw" / "sweep.csv")
    assert table["pose_freq"].tolist() == [10.0, 20.0]
    assert {"phe_reduction", "are_init_deg", "are_final_deg"} <= set(table.columns)
    coarse = (sim_dir.parent / "sw" / "f_10" / "trajectory.txt").read_text().splitlines()
    fine = (sim_dir.parent / "sw" / "f_20" / "trajectory.txt").read_text().splitlines()
    assert len(fine) > len(coarse) > 1
    assert "f=10 Hz" in result.stdout and "ARE" in result.stdout
    manifest = yaml.safe_load((sim_dir.parent / "sw" / "manifest.yaml").read_text())
    assert manifest["command"] == "sweep-pose-freq"


def test_sweep_pose_freq_rejects_bad_frequencies(sim_dir, runner):
    result = runner.invoke(app, ["sweep-pose-freq", "--freqs", "10,-5", "--events", "sim/events.txt"])
    assert result.exit_code == 2
    assert _error(result)["error"] == "ConfigError"


def test_simulate_with_nearest_readout(tmp_path, monkeypatch, runner):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "calib.txt").write_text(CALIB)
    result = runner.invoke(app, SIM_ARGS + ["--sampling", "nearest"])
    assert result.exit_code == 0, result.stderr
    manifest = yaml.safe_load((tmp_path / "sim" / "manifest.yaml").read_text())
    assert manifest["params"]["sampling"] == "nearest"
