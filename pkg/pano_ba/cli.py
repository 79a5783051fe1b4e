# cli.py
from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd
import typer

from . import __version__
from .camera import CameraModel, PanoramaGeometry, load_calibration, save_calibration
from .errors import ConfigError, PanoBAError, setup_logging
from .evaluation import (
    align_at,
    are_rmse,
    gauge_align,
    histogram,
    pair_links,
    small_residual_fraction,
    valid_pixel_correlation,
    write_histogram,
    write_metrics,
)
from .events import EventStream, clip_to_span, flip_polarities, load_events, pair_events, save_events
from .lm import joint_refine, map_only_run, write_iteration_log
from .mapio import (
    load_log_intensity_image,
    load_map_raw,
    load_mask_pgm,
    save_map_pgm16,
    save_map_raw,
    save_mask_pgm,
)
from .pano_map import PanoramaMap, build_valid_mask, densify, zeros_like_mask
from .photometric import (
    LOSSES,
    SOLVERS,
    OptState,
    SolverConfig,
    residuals,
    solver_config_from_file,
    solver_config_from_mapping,
)
from .simulate import SAMPLERS, EGMParams, simulate_events
from .so3 import RotationTrajectory, load_trajectory, save_trajectory
from .utils import atomic_write, ensure_dir, parse_float_list, parse_map_size, parse_window, read_yaml, write_manifest

app = typer.Typer(add_completion=False, help="Rotational event-camera photometric bundle adjustment")
log = logging.getLogger("pano_ba.cli")

# ---------------- Settings kept in Typer context ----------------
@dataclass
class Settings:
    verbose: bool = False
    log_file: Optional[str] = None


DEFAULT_CONFIG = "config/config.yaml"
DEFAULT_MAP_SIZE = (1024, 512)
DEFAULT_POSE_FREQ = 20.0


# ---------------- Helpers ----------------
def _load_cfg(config_path: Optional[str]) -> dict:
    """
    Load YAML config if present, otherwise return {}.
    Never crash on missing/empty config.
    """
    path = Path(config_path or DEFAULT_CONFIG)
    if not path.exists():
        if config_path:
            raise ConfigError(f"config file not found: {path}")
        return {}
    return read_yaml(path) or {}


def _section(cfg: dict, name: str) -> dict:
    """Top-level scalar keys, overridden by the command's own section."""
    shared = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    shared.update(cfg.get(name) or {})
    return shared


def _pick(flag: Any, sec: dict, key: str, default: Any = None) -> Any:
    # CLI flag -> YAML -> built-in default
    if flag is not None:
        return flag
    return sec.get(key, default)


def _fail(e: PanoBAError) -> None:
    typer.echo(json.dumps({"error": type(e).__name__, "exit_code": e.exit_code, "message": str(e)}), err=True)
    raise typer.Exit(code=e.exit_code)


def _guarded(func):
    """Map package errors to their exit code and a JSON line on stderr."""
    @functools.wraps(func)
    def wrapper(*a, **kw):
        try:
            return func(*a, **kw)
        except PanoBAError as e:
            log.debug("command failed", exc_info=True)
            _fail(e)
    return wrapper


@dataclass
class RunConfig:
    events: Optional[Path] = None
    calibration: Optional[Path] = None
    init_traj: Optional[Path] = None
    init_map: Optional[Path] = None
    init_mask: Optional[Path] = None
    gt_traj: Optional[Path] = None
    gt_map: Optional[Path] = None
    out_dir: Path = Path("./outputs")
    map_size: Tuple[int, int] = DEFAULT_MAP_SIZE
    window: Optional[Tuple[float, float]] = None
    pose_freq: float = DEFAULT_POSE_FREQ
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        self.geom = PanoramaGeometry(*self.map_size)
        if not self.pose_freq > 0:
            raise ConfigError(f"pose_freq must be > 0, got {self.pose_freq}")
        if self.window is not None and not self.window[1] > self.window[0]:
            raise ConfigError(f"window end must be after start, got {self.window}")

    def params(self) -> Dict[str, Any]:
        out = {k: getattr(self, k) for k in ("events", "calibration", "init_traj", "init_map", "init_mask",
                                             "gt_traj", "gt_map", "out_dir", "map_size", "window", "pose_freq")}
        out["solver"] = self.solver.as_dict()
        return out


def _path(v) -> Optional[Path]:
    return None if v in (None, "") else Path(v)


def _resolve_run(
    sec: dict,
    *,
    events=None, calibration=None, init_traj=None, init_map=None, init_mask=None,
    gt_traj=None, gt_map=None, out_dir=None, map_size=None, window=None, pose_freq=None,
    solver_config=None, deterministic=None, **solver_flags,
) -> RunConfig:
    solver_keys = {f for f in SolverConfig().as_dict()}
    base = {k: v for k, v in sec.items() if k in solver_keys}
    sc_path = _pick(solver_config, sec, "solver_config")
    if sc_path:
        scfg = solver_config_from_file(sc_path, **base)
        base = scfg.as_dict()
    if deterministic:
        solver_flags["deterministic"] = True
    scfg = solver_config_from_mapping(base, **solver_flags)
    if scfg.deterministic:
        scfg.max_workers = 1
    ms = parse_map_size(map_size) if map_size else None
    if ms is None:
        ms = parse_map_size(sec["map_size"]) if sec.get("map_size") else DEFAULT_MAP_SIZE
    win = parse_window(window) if window else parse_window(sec.get("window"))
    return RunConfig(
        events=_path(_pick(events, sec, "events")),
        calibration=_path(_pick(calibration, sec, "calibration")),
        init_traj=_path(_pick(init_traj, sec, "init_traj")),
        init_map=_path(_pick(init_map, sec, "init_map")),
        init_mask=_path(_pick(init_mask, sec, "init_mask")),
        gt_traj=_path(_pick(gt_traj, sec, "gt_traj")),
        gt_map=_path(_pick(gt_map, sec, "gt_map")),
        out_dir=Path(_pick(out_dir, sec, "out_dir", "./outputs")),
        map_size=ms,
        window=win,
        pose_freq=float(_pick(pose_freq, sec, "pose_freq", DEFAULT_POSE_FREQ)),
        solver=scfg,
    )


def _require(rc: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(rc, n) is None]
    if missing:
        raise ConfigError(f"missing required input(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


@dataclass
class Problem:
    cam: CameraModel
    traj: RotationTrajectory
    stream: EventStream
    pairs: Any
    n_out_of_span: int


def _load_problem(rc: RunConfig) -> Problem:
    _require(rc, "events", "calibration", "init_traj")
    cam = load_calibration(rc.calibration)
    traj = load_trajectory(rc.init_traj)
    if not traj.is_uniform(rc.pose_freq):
        log.info("Resampling initial trajectory (%d poses) to %.3g Hz", len(traj), rc.pose_freq)
        traj = traj.resample(rc.pose_freq)
    stream = load_events(rc.events)
    stream, n_drop = clip_to_span(stream, *traj.span)
    result = pair_events(stream, rc.window)
    log.info("Events: %d in window, %d pairs, %d active pixels, %d zero-interval dropped",
             result.n_in_window, len(result.pairs), result.n_active_pixels, result.n_zero_dt)
    return Problem(cam, traj, stream, result.pairs, n_drop)


def _initial_state(rc: RunConfig, prob: Problem) -> Tuple[OptState, bool]:
    """Returns the state and whether the map still has to be bootstrapped."""
    if rc.init_map is not None:
        values = np.nan_to_num(load_map_raw(rc.init_map))
        if values.shape != rc.geom.shape:
            raise ConfigError(f"initial map is {values.shape[1]}x{values.shape[0]}, expected {rc.map_size}")
        mask = load_mask_pgm(rc.init_mask) if rc.init_mask else build_valid_mask(prob.pairs, prob.cam, rc.geom, prob.traj)
        pmap = PanoramaMap(rc.geom, values, mask)
        return OptState(prob.traj, pmap, prob.cam, rc.solver.fix_first_pose), False
    mask = build_valid_mask(prob.pairs, prob.cam, rc.geom, prob.traj)
    return OptState(prob.traj, zeros_like_mask(rc.geom, mask), prob.cam, rc.solver.fix_first_pose), True


def _write_map(pmap: PanoramaMap, out: Path, stem: str) -> List[Path]:
    files = [save_map_raw(np.where(pmap.mask, pmap.values, np.nan), out / f"{stem}.raw"),
             save_map_pgm16(pmap.values, out / f"{stem}.pgm", mask=pmap.mask),
             save_mask_pgm(pmap.mask, out / f"{stem}_mask.pgm")]
    files.append(out / f"{stem}.pgm.tonemap.txt")
    return files


def _gt_map_values(rc: RunConfig) -> Optional[np.ndarray]:
    if rc.gt_map is None:
        return None
    if rc.gt_map.suffix == ".raw":
        return load_map_raw(rc.gt_map)
    return load_log_intensity_image(rc.gt_map)


def run_solve(rc: RunConfig, progress: bool = False) -> Tuple[Dict[str, Any], List[Path]]:
    """Full refinement; returns the metrics report and written files."""
    out = rc.out_dir
    ensure_dir(out)
    prob = _load_problem(rc)
    state, bootstrap = _initial_state(rc, prob)
    C = rc.solver.contrast

    result, boot = joint_refine(state, prob.pairs, rc.solver, bootstrap_map=bootstrap, progress=progress)
    start = boot.state if boot is not None else state
    eps0 = residuals(start, prob.pairs, C).eps
    final = result.state
    eps1 = residuals(final, prob.pairs, C).eps

    files = [save_trajectory(final.trajectory, out / "trajectory.txt")]
    files += _write_map(final.pmap, out, "map")
    dense = densify(final.pmap)
    files += [save_map_raw(dense, out / "dense.raw"), save_map_pgm16(dense, out / "dense.pgm"),
              out / "dense.pgm.tonemap.txt"]
    files.append(write_iteration_log(result, out / "iterations.csv"))
    if boot is not None:
        files.append(write_iteration_log(boot, out / "iterations_bootstrap.csv"))
    for tag, eps in (("init", eps0), ("final", eps1)):
        files.append(write_histogram(*histogram(eps, C), out / f"histogram_{tag}.csv"))

    report: Dict[str, Any] = {
        "phe_init": float(np.sum(eps0 ** 2)),
        "phe_final": float(np.sum(eps1 ** 2)),
        "robust_loss_final": result.final.robust,
        "small_residual_fraction_init": small_residual_fraction(eps0, C),
        "small_residual_fraction_final": small_residual_fraction(eps1, C),
        "pairs": len(prob.pairs),
        "skipped_pairs_final": result.final.n_skipped,
        "events_out_of_span": prob.n_out_of_span,
        "valid_pixels": final.pmap.n_params,
        "iterations": max(r.iter for r in result.records),
        "termination": result.reason,
    }
    if rc.gt_traj is not None:
        gt = load_trajectory(rc.gt_traj)
        t0 = max(prob.traj.span[0], gt.span[0])
        report["are_init_deg"] = are_rmse(align_at(prob.traj, gt, t0))
        report["are_final_deg"] = are_rmse(align_at(final.trajectory, gt, t0))
    files += list(write_metrics(report, out))
    log.info("Solve done (%s): PhE %.6g -> %.6g", result.reason, report["phe_init"], report["phe_final"])
    return report, files


# ---------------- Root options (global) ----------------
@app.callback()
def _root(
    ctx: typer.Context,
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Verbose logging"),
    log_file: Optional[str] = typer.Option(None, "--log-file", help="Also write logs to this file"),
):
    """
    Set up global Settings and logging once.
    """
    level = logging.DEBUG if verbose else logging.INFO
    setup_logging(level=level, logfile=log_file)
    ctx.obj = Settings(verbose=verbose, log_file=log_file)


_LOSS = click.Choice(list(LOSSES), case_sensitive=False)
_SOLVER = click.Choice(list(SOLVERS), case_sensitive=False)


# ---------------- SIMULATE ----------------
@app.command("simulate")
@_guarded
def cmd_simulate(
    scene: Optional[str] = typer.Option(None, help="Procedural scene or preset name (noise, checkerboard, edges, sinusoid)"),
    gt_image: Optional[str] = typer.Option(None, "--gt-image", help="8/16-bit image (PGM, PNG, ...) used as ground-truth map"),
    calibration: Optional[str] = typer.Option(None, help="Camera calibration (key = value)"),
    motion: Optional[str] = typer.Option(
        None, help="Ground-truth motion",
        click_type=click.Choice(["sinusoid", "constant", "static"], case_sensitive=False),
    ),
    duration: Optional[float] = typer.Option(None, help="Sequence length [s]"),
    amplitude_deg: Optional[float] = typer.Option(None, help="Sinusoid amplitude / constant rate [deg, deg/s]"),
    motion_freq: Optional[float] = typer.Option(None, help="Sinusoid frequency [Hz]"),
    contrast: Optional[float] = typer.Option(None, "--contrast", help="Contrast threshold C"),
    dt_sample: Optional[float] = typer.Option(None, help="Simulator time step [s]"),
    sampling: Optional[str] = typer.Option(
        None, help="Panorama readout in the simulator",
        click_type=click.Choice(list(SAMPLERS), case_sensitive=False),
    ),
    pose_freq: Optional[float] = typer.Option(None, "--pose-freq", help="Control-pose frequency of the initial trajectory [Hz]"),
    pose_noise_deg: Optional[float] = typer.Option(None, help="RMS perturbation of the initial trajectory [deg]"),
    flip_fraction: Optional[float] = typer.Option(None, help="Fraction of polarities to invert"),
    map_size: Optional[str] = typer.Option(None, "--map-size", help="Panorama size WxH"),
    seed: Optional[int] = typer.Option(None, help="Random seed"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    progress: bool = typer.Option(False, "--progress/--no-progress", help="Show progress bar"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    from pano_scenes.motions import constant_rate, perturb_trajectory, sinusoidal_yaw, static
    from pano_scenes.scenes import SCENES, load_scene_presets, make_scene

    cfg = _load_cfg(config)
    sec = _section(cfg, "simulate")
    out = Path(_pick(out_dir, sec, "out_dir", "./outputs/sim"))
    ensure_dir(out)
    W, H = parse_map_size(_pick(map_size, sec, "map_size", None)) or DEFAULT_MAP_SIZE
    geom = PanoramaGeometry(W, H)
    seed_v = int(_pick(seed, sec, "seed", 0))

    calib = _pick(calibration, sec, "calibration")
    cam = load_calibration(calib) if calib else CameraModel(240, 180, 200.0, 200.0, 120.0, 90.0)

    image = _pick(gt_image, sec, "gt_image")
    scene_v = _pick(scene, sec, "scene", "noise")
    if image:
        gt_map = load_log_intensity_image(image)
        if gt_map.shape != geom.shape:
            raise ConfigError(f"ground-truth image is {gt_map.shape[1]}x{gt_map.shape[0]}, expected {W}x{H}")
    else:
        presets_path = Path(sec.get("scene_presets", "config/scenes.yaml"))
        presets = load_scene_presets(presets_path) if presets_path.exists() else {}
        if scene_v in presets:
            kind, kw = presets[scene_v]["scene"], dict(presets[scene_v]["params"])
        elif scene_v in SCENES:
            kind, kw = scene_v, {}
        else:
            raise ConfigError(f"unknown scene {scene_v!r}; choose from {SCENES} or a preset in {presets_path}")
        if kind == "noise":
            kw["seed"] = kw.get("seed", seed_v)
        gt_map = make_scene(kind, geom.shape, **kw)

    motion_v = str(_pick(motion, sec, "motion", "sinusoid")).lower()
    dur = float(_pick(duration, sec, "duration", 5.0))
    amp = float(_pick(amplitude_deg, sec, "amplitude_deg", 30.0))
    if motion_v == "static":
        gt_traj = static(dur)
    elif motion_v == "constant":
        gt_traj = constant_rate(dur, rate_deg_s=amp)
    else:
        gt_traj = sinusoidal_yaw(dur, amplitude_deg=amp, freq_hz=float(_pick(motion_freq, sec, "motion_freq", 0.5)))

    C = float(_pick(contrast, sec, "contrast", 0.2))
    params = EGMParams(C, sec.get("contrast_pos"), sec.get("contrast_neg"))
    dt = float(_pick(dt_sample, sec, "dt_sample", 5e-4))
    sampling_v = str(_pick(sampling, sec, "sampling", "bilinear")).lower()
    stream = simulate_events(gt_map, cam, geom, gt_traj, params, dt, sampling=sampling_v, progress=progress)
    flip = float(_pick(flip_fraction, sec, "flip_fraction", 0.0))
    if flip > 0:
        stream = flip_polarities(stream, flip, seed=seed_v)

    f = float(_pick(pose_freq, sec, "pose_freq", DEFAULT_POSE_FREQ))
    noise = float(_pick(pose_noise_deg, sec, "pose_noise_deg", 0.0))
    init = perturb_trajectory(gt_traj.resample(f), noise, seed=seed_v) if noise > 0 else gt_traj.resample(f)

    files = [
        save_events(stream, out / "events.txt"),
        save_trajectory(gt_traj, out / "gt_trajectory.txt"),
        save_trajectory(init, out / "init_trajectory.txt"),
        save_calibration(cam, out / "calibration.txt"),
        save_map_raw(gt_map, out / "gt_map.raw"),
        save_map_pgm16(gt_map, out / "gt_map.pgm"),
        out / "gt_map.pgm.tonemap.txt",
    ]
    run = {"scene": None if image else scene_v, "gt_image": image, "motion": motion_v, "duration": dur,
           "amplitude_deg": amp, "contrast": C, "dt_sample": dt, "sampling": sampling_v, "pose_freq": f,
           "pose_noise_deg": noise, "flip_fraction": flip, "map_size": (W, H), "seed": seed_v,
           "events": len(stream)}
    write_manifest(out, "simulate", run, files, __version__)
    typer.echo(f"Simulated {len(stream)} events -> {out}")


# ---------------- SOLVE ----------------
@app.command("solve")
@_guarded
def cmd_solve(
    events: Optional[str] = typer.Option(None, help="Event file (t x y p, optionally .gz)"),
    calibration: Optional[str] = typer.Option(None, help="Camera calibration (key = value)"),
    init_traj: Optional[str] = typer.Option(None, "--init-traj", help="Initial trajectory (t qx qy qz qw)"),
    init_map: Optional[str] = typer.Option(None, "--init-map", help="Initial map (.raw); bootstrapped when omitted"),
    init_mask: Optional[str] = typer.Option(None, "--init-mask", help="Valid mask (.pgm) for --init-map"),
    gt_traj: Optional[str] = typer.Option(None, "--gt-traj", help="Ground truth for ARE metrics"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    loss: Optional[str] = typer.Option(None, "--loss", click_type=_LOSS, help="Robust loss"),
    contrast: Optional[float] = typer.Option(None, "--contrast", help="Assumed contrast threshold C"),
    pose_freq: Optional[float] = typer.Option(None, "--pose-freq", help="Control-pose frequency [Hz]"),
    map_size: Optional[str] = typer.Option(None, "--map-size", help="Panorama size WxH"),
    solver: Optional[str] = typer.Option(None, "--solver", click_type=_SOLVER, help="Linear solver"),
    window: Optional[str] = typer.Option(None, "--window", help="Time window T0:T1 [s]"),
    max_iterations: Optional[int] = typer.Option(None, "--max-iterations", help="LM iteration cap"),
    solver_config: Optional[str] = typer.Option(None, "--solver-config", help="Solver settings file"),
    deterministic: bool = typer.Option(False, "--deterministic/--no-deterministic", help="Sequential accumulation"),
    progress: bool = typer.Option(False, "--progress/--no-progress", help="Show progress bars"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    sec = _section(_load_cfg(config), "solve")
    rc = _resolve_run(
        sec, events=events, calibration=calibration, init_traj=init_traj, init_map=init_map,
        init_mask=init_mask, gt_traj=gt_traj, out_dir=out_dir, map_size=map_size, window=window,
        pose_freq=pose_freq, solver_config=solver_config, deterministic=deterministic,
        loss=loss.lower() if loss else None, contrast=contrast, solver=solver.lower() if solver else None,
        max_iterations=max_iterations,
    )
    report, files = run_solve(rc, progress=progress)
    write_manifest(rc.out_dir, "solve", rc.params(), files, __version__)
    typer.echo(f"PhE {report['phe_init']:.6g} -> {report['phe_final']:.6g} ({report['termination']}) -> {rc.out_dir}")


# ---------------- MAP-ONLY ----------------
@app.command("map-only")
@_guarded
def cmd_map_only(
    events: Optional[str] = typer.Option(None, help="Event file"),
    calibration: Optional[str] = typer.Option(None, help="Camera calibration"),
    init_traj: Optional[str] = typer.Option(None, "--init-traj", help="Frozen trajectory"),
    init_map: Optional[str] = typer.Option(None, "--init-map", help="Starting map (.raw); zeros when omitted"),
    gt_map: Optional[str] = typer.Option(None, "--gt-map", help="Ground-truth map (.raw or .pgm) for correlation"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    loss: Optional[str] = typer.Option(None, "--loss", click_type=_LOSS, help="Robust loss"),
    contrast: Optional[float] = typer.Option(None, "--contrast", help="Assumed contrast threshold C"),
    pose_freq: Optional[float] = typer.Option(None, "--pose-freq", help="Control-pose frequency [Hz]"),
    map_size: Optional[str] = typer.Option(None, "--map-size", help="Panorama size WxH"),
    solver: Optional[str] = typer.Option(None, "--solver", click_type=_SOLVER, help="Linear solver"),
    window: Optional[str] = typer.Option(None, "--window", help="Time window T0:T1 [s]"),
    deterministic: bool = typer.Option(False, "--deterministic/--no-deterministic", help="Sequential accumulation"),
    progress: bool = typer.Option(False, "--progress/--no-progress", help="Show progress bars"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    sec = _section(_load_cfg(config), "map_only")
    rc = _resolve_run(
        sec, events=events, calibration=calibration, init_traj=init_traj, init_map=init_map, gt_map=gt_map,
        out_dir=out_dir, map_size=map_size, window=window, pose_freq=pose_freq, deterministic=deterministic,
        loss=loss.lower() if loss else None, contrast=contrast, solver=solver.lower() if solver else None,
    )
    ensure_dir(rc.out_dir)
    prob = _load_problem(rc)
    state, _ = _initial_state(rc, prob)
    result = map_only_run(state, prob.pairs, rc.solver, progress=progress)
    pmap = result.state.pmap
    files = _write_map(pmap, rc.out_dir, "map")
    files.append(write_iteration_log(result, rc.out_dir / "iterations.csv"))
    report: Dict[str, Any] = {
        "phe_init": result.initial.phe,
        "phe_final": result.final.phe,
        "valid_pixels": pmap.n_params,
        "termination": result.reason,
    }
    gt = _gt_map_values(rc)
    if gt is not None:
        aligned = gauge_align(pmap.values, gt, pmap.mask, pair_links(result.state, prob.pairs))
        report["valid_pixel_correlation"] = valid_pixel_correlation(aligned, gt, pmap.mask)
        report["valid_pixel_rms"] = float(np.sqrt(np.mean((aligned - gt)[pmap.mask] ** 2)))
    files += list(write_metrics(report, rc.out_dir))
    write_manifest(rc.out_dir, "map-only", rc.params(), files, __version__)
    typer.echo(f"Map-only PhE {report['phe_init']:.6g} -> {report['phe_final']:.6g} -> {rc.out_dir}")


# ---------------- DENSIFY ----------------
@app.command("densify")
@_guarded
def cmd_densify(
    map_path: Optional[str] = typer.Option(None, "--map", help="Semi-dense map (.raw)"),
    mask_path: Optional[str] = typer.Option(None, "--mask", help="Valid mask (.pgm); finite pixels when omitted"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    sec = _section(_load_cfg(config), "densify")
    src = _pick(map_path, sec, "map")
    if not src:
        raise typer.BadParameter("Provide --map or set densify.map in config.yaml")
    out = Path(_pick(out_dir, sec, "out_dir", "./outputs"))
    values = load_map_raw(src)
    H, W = values.shape
    mpath = _pick(mask_path, sec, "mask")
    mask = load_mask_pgm(mpath) if mpath else np.isfinite(values)
    dense = densify(PanoramaMap(PanoramaGeometry(W, H), np.nan_to_num(values), mask))
    files = [save_map_raw(dense, out / "dense.raw"), save_map_pgm16(dense, out / "dense.pgm"),
             out / "dense.pgm.tonemap.txt"]
    write_manifest(out, "densify", {"map": src, "mask": mpath, "out_dir": out}, files, __version__)
    typer.echo(f"Densified {W}x{H} map -> {out}")


# ---------------- EVAL ----------------
@app.command("eval")
@_guarded
def cmd_eval(
    est: Optional[str] = typer.Option(None, "--est", help="Estimated trajectory"),
    gt: Optional[str] = typer.Option(None, "--gt", help="Ground-truth trajectory"),
    t0: Optional[float] = typer.Option(None, "--t0", help="Anchor time (default: first common time)"),
    rate: Optional[float] = typer.Option(None, "--rate", help="Evaluate on a fixed-rate grid [Hz] instead of control times"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    sec = _section(_load_cfg(config), "eval")
    est_p, gt_p = _pick(est, sec, "est"), _pick(gt, sec, "gt")
    if not est_p or not gt_p:
        raise typer.BadParameter("Provide --est and --gt or set eval.est and eval.gt in config.yaml")
    out = Path(_pick(out_dir, sec, "out_dir", "./outputs"))
    est_t, gt_t = load_trajectory(est_p), load_trajectory(gt_p)
    a = max(est_t.span[0], gt_t.span[0])
    b = min(est_t.span[1], gt_t.span[1])
    anchor = float(_pick(t0, sec, "t0", a))
    pair = align_at(est_t, gt_t, anchor)
    rate_v = _pick(rate, sec, "rate")
    stamps = None
    if rate_v:
        stamps = np.arange(a, b + 1e-12, 1.0 / float(rate_v))
    report = {"are_deg": are_rmse(pair, stamps), "t0": anchor}
    files = list(write_metrics(report, out))
    write_manifest(out, "eval", {"est": est_p, "gt": gt_p, "t0": anchor, "rate": rate_v}, files, __version__)
    typer.echo(f"ARE {report['are_deg']:.4f} deg")


# ---------------- SWEEPS ----------------
def _sweep(command: str, column: str, values: List[float], base_out: Path, make_rc, progress: bool) -> List[Dict[str, Any]]:
    """One full solve per swept value, each in its own subdirectory, plus a combined sweep.csv."""
    rows = []
    files: List[Path] = []
    for v in values:
        rc = make_rc(v)
        report, run_files = run_solve(rc, progress=progress)
        write_manifest(rc.out_dir, "solve", rc.params(), run_files, __version__)
        phe_red = 1.0 - report["phe_final"] / report["phe_init"] if report["phe_init"] > 0 else 0.0
        rows.append({column: v, **report, "phe_reduction": phe_red})
        files += run_files
    table = base_out / "sweep.csv"
    with atomic_write(table, newline="") as f:
        pd.DataFrame(rows).to_csv(f, index=False)
    write_manifest(base_out, command, {column: values}, files + [table], __version__)
    return rows


@app.command("sweep-contrast")
@_guarded
def cmd_sweep_contrast(
    contrasts: str = typer.Option("0.1,0.2,0.5", "--contrasts", help="Comma-separated assumed C values"),
    events: Optional[str] = typer.Option(None, help="Event file"),
    calibration: Optional[str] = typer.Option(None, help="Camera calibration"),
    init_traj: Optional[str] = typer.Option(None, "--init-traj", help="Initial trajectory"),
    gt_traj: Optional[str] = typer.Option(None, "--gt-traj", help="Ground truth for ARE metrics"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    loss: Optional[str] = typer.Option(None, "--loss", click_type=_LOSS, help="Robust loss"),
    pose_freq: Optional[float] = typer.Option(None, "--pose-freq", help="Control-pose frequency [Hz]"),
    map_size: Optional[str] = typer.Option(None, "--map-size", help="Panorama size WxH"),
    solver: Optional[str] = typer.Option(None, "--solver", click_type=_SOLVER, help="Linear solver"),
    window: Optional[str] = typer.Option(None, "--window", help="Time window T0:T1 [s]"),
    deterministic: bool = typer.Option(False, "--deterministic/--no-deterministic", help="Sequential accumulation"),
    progress: bool = typer.Option(False, "--progress/--no-progress", help="Show progress bars"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    sec = _section(_load_cfg(config), "sweep_contrast")
    values = parse_float_list(contrasts)
    if not values:
        raise ConfigError("no contrast values given")
    base_out = Path(_pick(out_dir, sec, "out_dir", "./outputs/sweep"))

    def make_rc(C: float) -> RunConfig:
        return _resolve_run(
            sec, events=events, calibration=calibration, init_traj=init_traj, gt_traj=gt_traj,
            out_dir=str(base_out / f"C_{C:g}"), map_size=map_size, window=window, pose_freq=pose_freq,
            deterministic=deterministic, loss=loss.lower() if loss else None, contrast=C,
            solver=solver.lower() if solver else None,
        )

    for r in _sweep("sweep-contrast", "contrast", values, base_out, make_rc, progress):
        typer.echo(f"C={r['contrast']:g}: PhE reduction {100 * r['phe_reduction']:.1f}%")


@app.command("sweep-pose-freq")
@_guarded
def cmd_sweep_pose_freq(
    freqs: str = typer.Option("5,10,20,40", "--freqs", help="Comma-separated control-pose frequencies [Hz]"),
    events: Optional[str] = typer.Option(None, help="Event file"),
    calibration: Optional[str] = typer.Option(None, help="Camera calibration"),
    init_traj: Optional[str] = typer.Option(None, "--init-traj", help="Initial trajectory, resampled per frequency"),
    gt_traj: Optional[str] = typer.Option(None, "--gt-traj", help="Ground truth for ARE metrics"),
    out_dir: Optional[str] = typer.Option(None, "--out-dir", help="Output directory"),
    loss: Optional[str] = typer.Option(None, "--loss", click_type=_LOSS, help="Robust loss"),
    contrast: Optional[float] = typer.Option(None, "--contrast", help="Assumed contrast threshold C"),
    map_size: Optional[str] = typer.Option(None, "--map-size", help="Panorama size WxH"),
    solver: Optional[str] = typer.Option(None, "--solver", click_type=_SOLVER, help="Linear solver"),
    window: Optional[str] = typer.Option(None, "--window", help="Time window T0:T1 [s]"),
    deterministic: bool = typer.Option(False, "--deterministic/--no-deterministic", help="Sequential accumulation"),
    progress: bool = typer.Option(False, "--progress/--no-progress", help="Show progress bars"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Path to YAML config"),
):
    """
    Re-solve the same events with the initial trajectory resampled to each
    control-pose frequency; sweep.csv holds PhE and ARE per frequency.
    """
    sec = _section(_load_cfg(config), "sweep_pose_freq")
    values = parse_float_list(freqs)
    if not values:
        raise ConfigError("no pose frequencies given")
    bad = [f for f in values if not f > 0]
    if bad:
        raise ConfigError(f"pose frequencies must be > 0, got {bad}")
    base_out = Path(_pick(out_dir, sec, "out_dir", "./outputs/sweep_pose_freq"))

    def make_rc(f: float) -> RunConfig:
        return _resolve_run(
            sec, events=events, calibration=calibration, init_traj=init_traj, gt_traj=gt_traj,
            out_dir=str(base_out / f"f_{f:g}"), map_size=map_size, window=window, pose_freq=f,
            deterministic=deterministic, loss=loss.lower() if loss else None, contrast=contrast,
            solver=solver.lower() if solver else None,
        )

    for r in _sweep("sweep-pose-freq", "pose_freq", values, base_out, make_rc, progress):
        line = f"f={r['pose_freq']:g} Hz: PhE reduction {100 * r['phe_reduction']:.1f}%"
        if "are_final_deg" in r:
            line += f", ARE {r['are_init_deg']:.3f} -> {r['are_final_deg']:.3f} deg"
        typer.echo(line)


if __name__ == "__main__":
    app()
