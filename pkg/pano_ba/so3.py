"""
Rotation-group primitives and the linearly interpolated control-pose
trajectory.

Every function accepts batched input: vectors are (..., 3) and matrices are
(..., 3, 3). Rotations are stored as matrices; quaternions only appear in
the trajectory text format.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .errors import QueryError, TrajectoryError, log_and_reraise
from .utils import atomic_write

log = logging.getLogger(__name__)

SMALL_ANGLE = 1e-4       # Taylor branches below this norm
NEAR_PI = 1e-3           # axis-from-diagonal branch for log
BRANCH_CUT_TOL = 1e-7    # log flags angles this close to pi
UNIFORM_TOL = 1e-9       # seconds
QUAT_NORM_TOL = 1e-6

_I3 = np.eye(3)


def hat(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle(phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    return theta, small, safe


def exp_so3(phi) -> np.ndarray:
    """Rodrigues formula."""
    phi = np.asarray(phi, dtype=float)
    theta, small, safe = _angle(phi)
    th2 = theta * theta
    a = np.where(small, 1.0 - th2 / 6.0 + th2 * th2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0,
                 2.0 * np.sin(0.5 * safe) ** 2 / (safe * safe))
    K = hat(phi)
    return _I3 + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3(R) -> np.ndarray:
    """
    Axis-angle vector with norm in [0, pi]. Angles within BRANCH_CUT_TOL of
    pi are logged as a warning since the sign of the axis is ambiguous there.
    """
    R = np.asarray(R, dtype=float)
    w = vee(R - np.swapaxes(R, -1, -2))            # 2 sin(theta) axis
    s = 0.5 * np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < SMALL_ANGLE
    th2 = theta * theta
    safe_s = np.where(small | (s == 0.0), 1.0, s)
    coef = np.where(small, 0.5 * (1.0 + th2 / 6.0 + 7.0 * th2 * th2 / 360.0),
                    0.5 * theta / safe_s)
    phi = coef[..., None] * w

    near_pi = (np.pi - theta) < NEAR_PI
    if np.any(near_pi):
        # S = cos I + (1 - cos) a a^T; read the axis off the dominant diagonal
        S = 0.5 * (R + np.swapaxes(R, -1, -2))
        denom = np.where(near_pi, 1.0 - c, 1.0)[..., None, None]
        aat = (S - c[..., None, None] * _I3) / denom
        diag = np.diagonal(aat, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        col = np.take_along_axis(aat, k[..., None, None], axis=-1)[..., 0]
        dk = np.take_along_axis(diag, k[..., None], axis=-1)
        axis = col / np.sqrt(np.maximum(dk, 1e-300))
        sign = np.where(np.sum(axis * w, axis=-1) < 0.0, -1.0, 1.0)
        phi = np.where(near_pi[..., None], (sign * theta)[..., None] * axis, phi)
        n_cut = int(np.count_nonzero((np.pi - theta) < BRANCH_CUT_TOL))
        if n_cut:
            log.warning("log_so3: %d rotation(s) within %.0e rad of pi (branch cut)", n_cut, BRANCH_CUT_TOL)
    return phi


def near_branch_cut(R) -> np.ndarray:
    theta = np.linalg.norm(log_so3(R), axis=-1)
    return (np.pi - theta) < BRANCH_CUT_TOL


def left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta, small, safe = _angle(phi)
    th2 = theta * theta
    a = np.where(small, 0.5 - th2 / 24.0 + th2 * th2 / 720.0,
                 2.0 * np.sin(0.5 * safe) ** 2 / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0,
                 (safe - np.sin(safe)) / safe ** 3)
    K = hat(phi)
    return _I3 + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta, small, safe = _angle(phi)
    th2 = theta * theta
    c = np.where(small, 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0,
                 1.0 / (safe * safe) - 0.5 / (safe * np.tan(0.5 * safe)))
    K = hat(phi)
    return _I3 - 0.5 * K + c[..., None, None] * (K @ K)


def interp_jacobian(u, dphi) -> np.ndarray:
    """
    A(u, dphi) = u J(u dphi) J^-1(dphi): maps control-pose perturbations to
    the perturbation of the interpolated pose,
    delta = (I - A) delta_i + A delta_{i+1}.
    """
    u = np.asarray(u, dtype=float)
    dphi = np.asarray(dphi, dtype=float)
    return u[..., None, None] * (left_jacobian(u[..., None] * dphi) @ left_jacobian_inv(dphi))


def orthonormalize(R) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar projection via SVD)."""
    R = np.asarray(R, dtype=float)
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def geodesic_angle(Ra, Rb) -> np.ndarray:
    """Angle of Ra^T Rb in radians."""
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    return np.linalg.norm(log_so3(np.swapaxes(Ra, -1, -2) @ Rb), axis=-1)


@dataclass(frozen=True, eq=False)
class RotationTrajectory:
    """
    Control poses at strictly increasing times; R(t) is the geodesic
    interpolation exp(u log(R_{i+1} R_i^T)) R_i on the bracketing segment.
    """
    times: np.ndarray
    rotations: np.ndarray
    check_uniform: bool = field(default=True, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        rots = np.asarray(self.rotations, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "rotations", rots)
        if rots.shape != (times.size, 3, 3):
            raise TrajectoryError(f"rotations shape {rots.shape} does not match {times.size} timestamps")
        if times.size < 2:
            raise TrajectoryError("a trajectory needs at least two control poses")
        dt = np.diff(times)
        if np.any(dt <= 0):
            raise TrajectoryError("trajectory timestamps must be strictly increasing")
        if self.check_uniform and np.max(np.abs(dt - dt.mean())) > UNIFORM_TOL:
            raise TrajectoryError(
                f"control poses are not uniformly spaced (spread {np.ptp(dt):.3e} s); resample first"
            )

    def __len__(self) -> int:
        return self.times.size

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def frequency(self) -> float:
        return (self.times.size - 1) / (self.times[-1] - self.times[0])

    def is_uniform(self, freq: Optional[float] = None) -> bool:
        dt = np.diff(self.times)
        if np.max(np.abs(dt - dt.mean())) > UNIFORM_TOL:
            return False
        return freq is None or abs(dt.mean() - 1.0 / freq) <= UNIFORM_TOL

    @cached_property
    def segment_increments(self) -> np.ndarray:
        """dphi_i = log(R_{i+1} R_i^T), shape (P-1, 3)."""
        rel = self.rotations[1:] @ np.swapaxes(self.rotations[:-1], -1, -2)
        return log_so3(rel)

    def locate(self, t) -> Tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        t0, t1 = self.span
        if t.size and (np.min(t) < t0 - UNIFORM_TOL or np.max(t) > t1 + UNIFORM_TOL):
            raise QueryError(f"query time outside trajectory span [{t0}, {t1}]")
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        u = (t - self.times[idx]) / (self.times[idx + 1] - self.times[idx])
        return idx, np.clip(u, 0.0, 1.0)

    def interpolate(self, t) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (R(t), segment index i, u) for scalar or array t."""
        idx, u = self.locate(t)
        R = exp_so3(u[..., None] * self.segment_increments[idx]) @ self.rotations[idx]
        return R, idx, u

    def __call__(self, t) -> np.ndarray:
        return self.interpolate(t)[0]

    def retract(self, delta) -> "RotationTrajectory":
        """R_i <- exp(delta_i^) R_i, re-orthonormalized."""
        delta = np.asarray(delta, dtype=float).reshape(self.times.size, 3)
        rots = orthonormalize(exp_so3(delta) @ self.rotations)
        return RotationTrajectory(self.times.copy(), rots, check_uniform=self.check_uniform)

    def left_multiply(self, R0) -> "RotationTrajectory":
        return RotationTrajectory(self.times.copy(), orthonormalize(np.asarray(R0) @ self.rotations),
                                  check_uniform=self.check_uniform)

    def resample(self, freq: float, t_start: Optional[float] = None,
                 t_end: Optional[float] = None) -> "RotationTrajectory":
        if freq <= 0:
            raise TrajectoryError(f"control-pose frequency must be > 0, got {freq}")
        a, b = self.span
        t_start = a if t_start is None else max(a, t_start)
        t_end = b if t_end is None else min(b, t_end)
        n = int(np.floor((t_end - t_start) * freq + 1e-6)) + 1
        if n < 2:
            raise TrajectoryError(f"span [{t_start}, {t_end}] too short for {freq} Hz control poses")
        times = t_start + np.arange(n) / freq
        return RotationTrajectory(times, orthonormalize(self(times)), check_uniform=True)


@log_and_reraise(TrajectoryError)
def load_trajectory(path: str | Path, check_uniform: bool = False) -> RotationTrajectory:
    """
    Parse `t qx qy qz qw` lines (Hamilton, scalar last). Quaternions whose
    norm deviates from 1 by more than QUAT_NORM_TOL are rejected.
    """
    times, quats = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise TrajectoryError(f"{path}:{lineno}: expected 't qx qy qz qw', got {raw.strip()!r}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise TrajectoryError(f"{path}:{lineno}: {e}") from e
            q = np.asarray(vals[1:])
            if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
                raise TrajectoryError(f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.9f} is not 1")
            times.append(vals[0])
            quats.append(q)
    if not times:
        raise TrajectoryError(f"{path}: no control poses")
    rots = ScipyRotation.from_quat(np.asarray(quats)).as_matrix()
    return RotationTrajectory(np.asarray(times), rots, check_uniform=check_uniform)


@log_and_reraise(TrajectoryError)
def save_trajectory(traj: RotationTrajectory, path: str | Path) -> Path:
    quats = ScipyRotation.from_matrix(traj.rotations).as_quat()
    with atomic_write(path) as f:
        f.write("# t qx qy qz qw\n")
        for t, q in zip(traj.times, quats):
            f.write(f"{t:.9f} {q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}\n")
    return Path(path)
