"""
Levenberg-Marquardt loop over the joint (poses + map) state and its
map-only reduction.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .errors import LinearSolverError, NonFiniteLossError
from .events import ResidualPairs
from .normal_eq import accumulate_normal_equations, solve_normal_equations
from .pano_map import PanoramaMap, build_valid_mask
from .photometric import LossValue, OptState, SolverConfig, evaluate_loss, linearize, robust_weights
from .utils import atomic_write

log = logging.getLogger(__name__)

CONVERGED_REASONS = ("relative_decrease", "step_norm", "no_improvement")
LOG_COLUMNS = ["iter", "lambda", "phe", "robust_loss", "step_norm_pose", "step_norm_map", "accepted", "skipped_pairs"]


@dataclass
class IterationRecord:
    iter: int
    lambda_: float
    phe: float
    robust_loss: float
    step_norm_pose: float
    step_norm_map: float
    accepted: bool
    skipped_pairs: int


@dataclass
class LMResult:
    state: OptState
    records: List[IterationRecord] = field(default_factory=list)
    reason: str = "max_iterations"
    initial: Optional[LossValue] = None
    final: Optional[LossValue] = None

    @property
    def converged(self) -> bool:
        return self.reason in CONVERGED_REASONS

    @property
    def n_accepted(self) -> int:
        return sum(1 for r in self.records if r.accepted and r.iter > 0)

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.records], columns=[f.name for f in fields(IterationRecord)])
        return df.rename(columns={"lambda_": "lambda"})[LOG_COLUMNS]


def write_iteration_log(result: LMResult, path: str | Path) -> Path:
    with atomic_write(path, newline="") as f:
        result.frame().to_csv(f, index=False)
    return Path(path)


@dataclass(frozen=True)
class StepOutcome:
    accepted: bool
    state: OptState
    loss: LossValue
    step_norm_pose: float
    step_norm_map: float
    step_inf: float


def _check_finite(loss: LossValue, it: int, lam: float, last: Optional[LossValue]) -> None:
    if np.isfinite(loss.phe) and np.isfinite(loss.robust):
        return
    dump = {
        "iteration": it,
        "lambda": lam,
        "phe": loss.phe,
        "robust_loss": loss.robust,
        "used_pairs": loss.n_used,
        "skipped_pairs": loss.n_skipped,
        "last_finite_phe": None if last is None else last.phe,
    }
    raise NonFiniteLossError(f"non-finite loss at iteration {it} (lambda={lam:g})", dump)


def lm_step(state: OptState, pairs: ResidualPairs, config: SolverConfig, lam: float,
            loss: LossValue, ne=None, map_only: bool = False, it: int = 0) -> StepOutcome:
    """
    One damped trial: solve at `lam`, retract and accept iff the robust loss
    strictly decreases. `ne` may carry a prebuilt system for retries.
    """
    if ne is None:
        ne = build_system(state, pairs, config, map_only)
    sol = solve_normal_equations(ne, lam, config)
    delta = sol.x
    n_pose = ne.n_pose
    step_pose = float(np.linalg.norm(delta[:n_pose]))
    step_map = float(np.linalg.norm(delta[n_pose:]))
    step_inf = float(np.max(np.abs(delta))) if delta.size else 0.0
    cand = state.retract(delta, map_only=map_only)
    new = evaluate_loss(cand, pairs, config)
    _check_finite(new, it, lam, loss)
    if new.robust < loss.robust:
        return StepOutcome(True, cand, new, step_pose, step_map, step_inf)
    return StepOutcome(False, state, loss, step_pose, step_map, step_inf)


def build_system(state: OptState, pairs: ResidualPairs, config: SolverConfig, map_only: bool = False,
                 progress: bool = False):
    lin = linearize(state, pairs, config.contrast)
    w = robust_weights(lin.eps, config)
    return accumulate_normal_equations(state, lin, config, weights=w, map_only=map_only, progress=progress)


def lm_run(state: OptState, pairs: ResidualPairs, config: SolverConfig, map_only: Optional[bool] = None,
           progress: bool = False) -> LMResult:
    """
    Relinearize once per iteration; on rejection multiply lambda by the
    factor and retry on the same system, on acceptance divide it. Stops on
    a small relative decrease, a negligible step, lambda above lambda_max,
    or after max_iterations.
    """
    map_only = config.map_only if map_only is None else map_only
    loss = evaluate_loss(state, pairs, config)
    _check_finite(loss, 0, config.lambda0, None)
    lam = config.lambda0
    result = LMResult(state=state, initial=loss, final=loss)
    result.records.append(IterationRecord(0, lam, loss.phe, loss.robust, 0.0, 0.0, True, loss.n_skipped))
    log.info("LM start: PhE=%.6g robust=%.6g pairs=%d skipped=%d%s",
             loss.phe, loss.robust, loss.n_used, loss.n_skipped, " (map only)" if map_only else "")

    bar = tqdm(total=config.max_iterations, desc="LM", unit="it") if progress else None
    reason = "max_iterations"
    for it in range(1, config.max_iterations + 1):
        ne = build_system(state, pairs, config, map_only)
        done = False
        while True:
            try:
                out = lm_step(state, pairs, config, lam, loss, ne=ne, map_only=map_only, it=it)
            except LinearSolverError as e:
                log.warning("Iteration %d: %s", it, e)
                lam *= config.lambda_factor
                if lam > config.lambda_max:
                    raise
                continue
            if out.step_inf < config.step_tol:
                reason, done = "step_norm", True
                break
            result.records.append(IterationRecord(
                it, lam, out.loss.phe, out.loss.robust, out.step_norm_pose, out.step_norm_map,
                out.accepted, out.loss.n_skipped,
            ))
            if out.accepted:
                rel = (loss.robust - out.loss.robust) / max(loss.robust, np.finfo(float).tiny)
                state, loss = out.state, out.loss
                lam = max(lam / config.lambda_factor, config.lambda_min)
                log.info("Iteration %d: PhE=%.6g robust=%.6g lambda=%.1e |dP|=%.3e/%.3e",
                         it, loss.phe, loss.robust, lam, out.step_norm_pose, out.step_norm_map)
                if rel < config.rel_tol:
                    reason, done = "relative_decrease", True
                break
            lam *= config.lambda_factor
            log.debug("Iteration %d: step rejected, lambda -> %.1e", it, lam)
            if lam > config.lambda_max:
                reason, done = "no_improvement", True
                break
        if bar:
            bar.update(1)
        if done:
            break
    if bar:
        bar.close()

    result.state, result.final, result.reason = state, loss, reason
    log.info("LM stop (%s) after %d accepted step(s): PhE %.6g -> %.6g",
             reason, result.n_accepted, result.initial.phe, loss.phe)
    return result


def map_only_run(state: OptState, pairs: ResidualPairs, config: SolverConfig, progress: bool = False) -> LMResult:
    """
    Refine only the map with the trajectory frozen. The valid mask is
    rebuilt from the frozen trajectory; values of pixels that stay valid
    are carried over and new pixels start at zero.
    """
    old = state.pmap
    mask = build_valid_mask(pairs, state.cam, old.geom, state.trajectory)
    pmap = PanoramaMap(old.geom, np.where(mask & ~old.mask, 0.0, old.values), mask)
    start = OptState(state.trajectory, pmap, state.cam, state.fix_first_pose)
    return lm_run(start, pairs, config, map_only=True, progress=progress)


def joint_refine(state: OptState, pairs: ResidualPairs, config: SolverConfig, bootstrap_map: bool = True,
                 progress: bool = False) -> tuple[LMResult, Optional[LMResult]]:
    """
    Joint refinement, optionally preceded by a map-only run at the initial
    trajectory that stands in for an externally supplied initial map.
    """
    boot = None
    if bootstrap_map:
        boot = map_only_run(state, pairs, config, progress=progress)
        state = boot.state
    return lm_run(state, pairs, config, map_only=False, progress=progress), boot
