"""
Per-event photometric residuals, robust reweighting and the analytic
linearization that feeds the normal equations.

    eps_k = M(p(t_k)) - M(p(t_k - dt_k)) - pol_k * C

with nearest-neighbor map readout at both endpoints. Pose perturbations
act on the left, R_i <- exp(d_i^) R_i.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .camera import CameraModel, back_project, near_pole, project_equirect, rotation_jacobian
from .errors import ConfigError, InvalidSampleError, StateError
from .events import ResidualPairs
from .pano_map import PanoramaMap, apply_update, gradient_field
from .so3 import RotationTrajectory, interp_jacobian
from .utils import read_kv, read_yaml

log = logging.getLogger(__name__)

LOSSES = ("quadratic", "huber", "cauchy")
SOLVERS = ("cholesky", "cg")


@dataclass
class SolverConfig:
    loss: str = "quadratic"
    contrast: float = 0.2
    huber_delta: float = 0.05
    cauchy_b2: float = 1.0 / 50.0
    lambda0: float = 1e-3
    lambda_factor: float = 10.0
    lambda_min: float = 1e-8
    lambda_max: float = 1e8
    max_iterations: int = 50
    rel_tol: float = 1e-6
    step_tol: float = 1e-10
    solver: str = "cholesky"
    cg_tol: float = 1e-6
    fix_first_pose: bool = True
    map_only: bool = False
    diag_floor: float = 1e-6
    chunk_size: int = 50_000
    max_workers: int = 4
    deterministic: bool = False
    skip_cost: float = 1.0      # loss charged per skipped pair, in units of rho(C)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"Unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"Unknown solver {self.solver!r}; choose from {SOLVERS}")
        positive = ("contrast", "huber_delta", "cauchy_b2", "lambda0", "lambda_min", "lambda_max",
                    "rel_tol", "step_tol", "cg_tol", "diag_floor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.skip_cost >= 0:
            raise ConfigError(f"skip_cost must be >= 0, got {self.skip_cost}")
        if not self.lambda_factor > 1:
            raise ConfigError(f"lambda_factor must be > 1, got {self.lambda_factor}")
        if self.max_iterations < 1 or self.chunk_size < 1 or self.max_workers < 1:
            raise ConfigError("max_iterations, chunk_size and max_workers must be >= 1")

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(kind: type, value: Any) -> Any:
    if kind is bool and isinstance(value, str):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


def solver_config_from_mapping(data: Mapping[str, Any], **overrides) -> SolverConfig:
    """Build a SolverConfig from a flat mapping; unknown keys are rejected."""
    defaults = SolverConfig()
    known = {f.name for f in fields(SolverConfig)}
    merged = {k: v for k, v in data.items() if v is not None}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"Unknown solver config key(s): {unknown}")
    kw = {}
    for name, value in merged.items():
        kind = type(getattr(defaults, name))
        try:
            kw[name] = _coerce(kind, value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"solver config {name}={value!r}: {e}") from e
    return SolverConfig(**kw)


def solver_config_from_file(path: str | Path, **overrides) -> SolverConfig:
    """YAML (.yaml/.yml) or flat `key = value` text mirroring SolverConfig fields."""
    path = Path(path)
    if path.suffix.lower() in (".yaml", ".yml"):
        data = read_yaml(path)
    else:
        data = read_kv(path)
    return solver_config_from_mapping(data, **overrides)


@dataclass(eq=False)
class OptState:
    trajectory: RotationTrajectory
    pmap: PanoramaMap
    cam: CameraModel
    fix_first_pose: bool = True

    @property
    def n_free_poses(self) -> int:
        return len(self.trajectory) - (1 if self.fix_first_pose else 0)

    @property
    def n_pose_params(self) -> int:
        return 3 * self.n_free_poses

    @property
    def dim(self) -> int:
        return self.n_pose_params + self.pmap.n_params

    def pose_column(self, pose_index: np.ndarray) -> np.ndarray:
        """First column of each control pose in the state vector, -1 for the fixed pose."""
        off = 1 if self.fix_first_pose else 0
        col = 3 * (np.asarray(pose_index) - off)
        return np.where(np.asarray(pose_index) < off, -1, col)

    def retract(self, delta: np.ndarray, map_only: bool = False) -> "OptState":
        """Apply [d_alpha ; d_beta]; with map_only the vector holds only d_beta."""
        delta = np.asarray(delta, dtype=float).reshape(-1)
        n_pose = 0 if map_only else self.n_pose_params
        if delta.size != n_pose + self.pmap.n_params:
            raise StateError(f"update has length {delta.size}, expected {n_pose + self.pmap.n_params}")
        traj = self.trajectory
        if n_pose:
            d = np.zeros((len(traj), 3))
            d[len(traj) - self.n_free_poses:] = delta[:n_pose].reshape(-1, 3)
            traj = traj.retract(d)
        return OptState(traj, apply_update(self.pmap, delta[n_pose:]), self.cam, self.fix_first_pose)


@dataclass(eq=False)
class Endpoints:
    z: np.ndarray         # (n, 3) bearings
    p: np.ndarray         # (n, 2) map points
    flat: np.ndarray      # (n,) nearest map pixel, flat index
    valid: np.ndarray     # (n,) nearest pixel is in the mask
    seg: np.ndarray       # (n,) segment index i
    u: np.ndarray         # (n,) interpolation parameter

    def subset(self, sel) -> "Endpoints":
        return Endpoints(self.z[sel], self.p[sel], self.flat[sel], self.valid[sel], self.seg[sel], self.u[sel])


def warp_endpoints(state: OptState, pairs: ResidualPairs, t: np.ndarray) -> Endpoints:
    R, seg, u = state.trajectory.interpolate(t)
    z = (R @ back_project(state.cam, pairs.pixels)[..., None])[..., 0]
    p = project_equirect(state.pmap.geom, z)
    flat, valid = state.pmap.lookup(p)
    return Endpoints(z, p, flat, valid, seg, u)


@dataclass(eq=False)
class ResidualEval:
    eps: np.ndarray       # residuals of the usable pairs
    used: np.ndarray      # indices into the pair list
    n_off_mask: int = 0
    n_pole: int = 0

    @property
    def n_skipped(self) -> int:
        return self.n_off_mask + self.n_pole


def _usable(end_k: Endpoints, end_p: Endpoints) -> Tuple[np.ndarray, int, int]:
    on_mask = end_k.valid & end_p.valid
    pole = near_pole(end_k.z) | near_pole(end_p.z)
    ok = on_mask & ~pole
    return ok, int(np.count_nonzero(~on_mask)), int(np.count_nonzero(on_mask & pole))


def residuals(state: OptState, pairs: ResidualPairs, contrast: float) -> ResidualEval:
    """
    Residuals of all pairs whose endpoints both land on valid pixels away
    from the poles; the rest are counted and skipped.
    """
    if len(pairs) == 0:
        return ResidualEval(np.zeros(0), np.zeros(0, dtype=np.int64))
    end_k = warp_endpoints(state, pairs, pairs.t)
    end_p = warp_endpoints(state, pairs, pairs.t_prev)
    ok, n_off, n_pole = _usable(end_k, end_p)
    v = state.pmap.values.ravel()
    used = np.flatnonzero(ok)
    eps = v[end_k.flat[used]] - v[end_p.flat[used]] - pairs.pol[used] * contrast
    return ResidualEval(eps, used, n_off, n_pole)


def residual(state: OptState, pairs: ResidualPairs, contrast: float, k: int = 0) -> float:
    """Residual of one pair; raises InvalidSampleError if an endpoint is off the mask."""
    one = pairs.subset(slice(k, k + 1))
    end_k = warp_endpoints(state, one, one.t)
    end_p = warp_endpoints(state, one, one.t_prev)
    if not (end_k.valid[0] and end_p.valid[0]):
        raise InvalidSampleError(f"pair {k} has an endpoint on an invalid map pixel")
    v = state.pmap.values.ravel()
    return float(v[end_k.flat[0]] - v[end_p.flat[0]] - one.pol[0] * contrast)


def robust_weights(eps: np.ndarray, config: SolverConfig) -> np.ndarray:
    """IRLS weights rho'(eps) / (2 eps)."""
    a = np.abs(np.asarray(eps, dtype=float))
    if config.loss == "huber":
        d = config.huber_delta
        return np.where(a < d, 1.0, d / np.maximum(a, d))
    if config.loss == "cauchy":
        return 1.0 / (1.0 + a * a / config.cauchy_b2)
    return np.ones_like(a)


def robust_loss(eps: np.ndarray, config: SolverConfig) -> np.ndarray:
    """Per-residual rho(eps); rho = eps^2 for the quadratic loss."""
    e = np.asarray(eps, dtype=float)
    a = np.abs(e)
    if config.loss == "huber":
        d = config.huber_delta
        return np.where(a < d, e * e, (2.0 * a - d) * d)
    if config.loss == "cauchy":
        b2 = config.cauchy_b2
        return b2 * np.log1p(e * e / b2)
    return e * e


@dataclass(frozen=True)
class LossValue:
    phe: float
    robust: float
    n_used: int
    n_skipped: int


def skip_penalty(config: SolverConfig) -> float:
    """Loss of one skipped pair: skip_cost * rho(C), a residual of a full contrast step."""
    return config.skip_cost * float(robust_loss(np.array([config.contrast]), config)[0])


def evaluate_loss(state: OptState, pairs: ResidualPairs, config: SolverConfig) -> LossValue:
    """
    PhE sums the usable pairs only. The robust loss also charges every
    skipped pair skip_penalty(config), so two states are compared over the
    whole pair set and a step cannot lower it by pushing pairs off the mask.
    """
    ev = residuals(state, pairs, config.contrast)
    return LossValue(
        phe=float(np.sum(ev.eps ** 2)),
        robust=float(np.sum(robust_loss(ev.eps, config))) + ev.n_skipped * skip_penalty(config),
        n_used=int(ev.eps.size),
        n_skipped=ev.n_skipped,
    )


@dataclass(eq=False)
class Linearization:
    """
    Row data of the Jacobian for the usable pairs. Pose blocks are ordered
    (t_k: i, i+1 ; t_k - dt_k: j, j+1); map coefficients are +1 at t_k and
    -1 at the earlier endpoint.
    """
    eps: np.ndarray            # (n,)
    used: np.ndarray           # (n,) indices into the pair list
    pose_index: np.ndarray     # (n, 4) control pose of each block
    pose_rows: np.ndarray      # (n, 4, 3)
    map_index: np.ndarray      # (n, 2) state index of (t_k, t_k - dt_k) pixels
    n_off_mask: int = 0
    n_pole: int = 0
    weights: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return self.eps.size

    @property
    def n_skipped(self) -> int:
        return self.n_off_mask + self.n_pole

    def subset(self, sel) -> "Linearization":
        return Linearization(
            self.eps[sel], self.used[sel], self.pose_index[sel], self.pose_rows[sel], self.map_index[sel],
            self.n_off_mask, self.n_pole, None if self.weights is None else self.weights[sel],
        )


def _pose_blocks(state: OptState, end: Endpoints, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """q^T (I - A) and q^T A with q = E^T grad M at the endpoint."""
    E = rotation_jacobian(state.pmap.geom, end.z)               # (n, 2, 3)
    g = grad.reshape(-1, 2)[end.flat]                           # (n, 2)
    q = np.einsum("ni,nij->nj", g, E)                           # (n, 3)
    A = interp_jacobian(end.u, state.trajectory.segment_increments[end.seg])
    qA = np.einsum("nj,njk->nk", q, A)
    return q - qA, qA


def linearize(state: OptState, pairs: ResidualPairs, contrast: float,
              grad: Optional[np.ndarray] = None) -> Linearization:
    if grad is None:
        grad = gradient_field(state.pmap)
    if len(pairs) == 0:
        return Linearization(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 4), dtype=np.int64),
                             np.zeros((0, 4, 3)), np.zeros((0, 2), dtype=np.int64))
    end_k = warp_endpoints(state, pairs, pairs.t)
    end_p = warp_endpoints(state, pairs, pairs.t_prev)
    ok, n_off, n_pole = _usable(end_k, end_p)
    used = np.flatnonzero(ok)
    if n_off or n_pole:
        log.debug("linearize: skipped %d off-mask and %d near-pole pairs", n_off, n_pole)
    pk = pairs.subset(used)
    ek, ep = end_k.subset(used), end_p.subset(used)

    v = state.pmap.values.ravel()
    eps = v[ek.flat] - v[ep.flat] - pk.pol * contrast
    bk0, bk1 = _pose_blocks(state, ek, grad)
    bp0, bp1 = _pose_blocks(state, ep, grad)
    rows = np.stack([-bk0, -bk1, bp0, bp1], axis=1)
    pose_index = np.stack([ek.seg, ek.seg + 1, ep.seg, ep.seg + 1], axis=1).astype(np.int64)
    sidx = state.pmap.state_index
    map_index = np.stack([sidx[ek.flat], sidx[ep.flat]], axis=1)
    return Linearization(eps, used, pose_index, rows, map_index, n_off, n_pole)


def jacobian(state: OptState, lin: Linearization, map_only: bool = False) -> sp.csr_matrix:
    """Explicit sparse Jacobian of the linearized residuals (gauge-fixed pose columns removed)."""
    n = len(lin)
    n_pose = 0 if map_only else state.n_pose_params
    rows, cols, vals = [], [], []
    r = np.arange(n)
    if not map_only:
        for b in range(4):
            c0 = state.pose_column(lin.pose_index[:, b])
            keep = c0 >= 0
            for a in range(3):
                rows.append(r[keep])
                cols.append(c0[keep] + a)
                vals.append(lin.pose_rows[keep, b, a])
    for b, coef in ((0, 1.0), (1, -1.0)):
        rows.append(r)
        cols.append(n_pose + lin.map_index[:, b])
        vals.append(np.full(n, coef))
    J = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n_pose + state.pmap.n_params),
    )
    return J.tocsr()
