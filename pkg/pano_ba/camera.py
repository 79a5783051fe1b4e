"""
Pinhole back-projection, equirectangular projection and the event-to-map
warp p = pi(R(t) K^-1 x^h).

Map convention: azimuth atan2(z_x, z_z) in [-pi, pi) maps to columns
[0, W_m), the forward axis +z lands on the map center, -y is the top pole
(row 0) and +y the bottom pole (row H_m). Pixel (row, col) covers
[col, col + 1) x [row, row + 1), i.e. centers sit at half-pixel offsets.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import CalibrationError, ConfigError, DegenerateBearingError, PoleSingularityError, log_and_reraise
from .so3 import RotationTrajectory, hat
from .utils import atomic_write, read_kv

POLE_TOL = 1e-6          # radians
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError(f"sensor size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError(f"focal lengths must be > 0, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CalibrationError(f"principal point ({self.cx}, {self.cy}) outside the sensor")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> np.ndarray:
        """All sensor pixels as (N, 2) (x, y), row-major."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(float)


@dataclass(frozen=True)
class PanoramaGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ConfigError(f"map must be at least 2x2, got {self.width}x{self.height}")
        if self.width != 2 * self.height:
            raise ConfigError(f"equirectangular map needs W = 2H, got {self.width}x{self.height}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


def back_project(cam: CameraModel, x) -> np.ndarray:
    """K^-1 (x, y, 1); not normalized."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape[:-1] + (3,))
    out[..., 0] = (x[..., 0] - cam.cx) / cam.fx
    out[..., 1] = (x[..., 1] - cam.cy) / cam.fy
    out[..., 2] = 1.0
    return out


def project_equirect(geom: PanoramaGeometry, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    n = np.linalg.norm(z, axis=-1)
    if np.any(n < DEGENERATE_NORM):
        raise DegenerateBearingError("cannot project a zero-length bearing")
    az = np.arctan2(z[..., 0], z[..., 2])
    el = np.arccos(np.clip(-z[..., 1] / n, -1.0, 1.0))
    px = np.mod((az + np.pi) * geom.width / (2.0 * np.pi), geom.width)
    py = el * geom.height / np.pi
    return np.stack([px, py], axis=-1)


def lift_equirect(geom: PanoramaGeometry, p) -> np.ndarray:
    """Unit bearing for a map point (inverse of project_equirect)."""
    p = np.asarray(p, dtype=float)
    az = p[..., 0] * 2.0 * np.pi / geom.width - np.pi
    el = p[..., 1] * np.pi / geom.height
    s = np.sin(el)
    return np.stack([s * np.sin(az), -np.cos(el), s * np.cos(az)], axis=-1)


def near_pole(z, tol: float = POLE_TOL) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    rho = np.hypot(z[..., 0], z[..., 2])
    n = np.linalg.norm(z, axis=-1)
    return rho <= np.sin(tol) * n


def equirect_jacobian(geom: PanoramaGeometry, z) -> np.ndarray:
    """Analytic d pi / d z, shape (..., 2, 3)."""
    z = np.asarray(z, dtype=float)
    if np.any(near_pole(z)):
        raise PoleSingularityError("bearing within pole tolerance; d pi/dz is singular")
    zx, zy, zz = z[..., 0], z[..., 1], z[..., 2]
    rho2 = zx * zx + zz * zz
    rho = np.sqrt(rho2)
    n2 = rho2 + zy * zy
    sx = geom.width / (2.0 * np.pi)
    sy = geom.height / np.pi
    J = np.zeros(z.shape[:-1] + (2, 3))
    J[..., 0, 0] = sx * zz / rho2
    J[..., 0, 2] = -sx * zx / rho2
    J[..., 1, 0] = -sy * zy * zx / (rho * n2)
    J[..., 1, 1] = sy * rho / n2
    J[..., 1, 2] = -sy * zy * zz / (rho * n2)
    return J


def rotation_jacobian(geom: PanoramaGeometry, z) -> np.ndarray:
    """E = (d pi / d z) z^, so that p(exp(d^) z) ~ p(z) - E d."""
    return equirect_jacobian(geom, z) @ hat(z)


def pixel_of(geom: PanoramaGeometry, p) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest map pixel (row, col) of continuous map points."""
    p = np.asarray(p, dtype=float)
    col = np.mod(np.floor(p[..., 0]).astype(np.int64), geom.width)
    row = np.clip(np.floor(p[..., 1]).astype(np.int64), 0, geom.height - 1)
    return row, col


def bearings(cam: CameraModel, traj: RotationTrajectory, x, t) -> np.ndarray:
    """z(t) = R(t) K^-1 x^h."""
    R = traj(t)
    return (R @ back_project(cam, x)[..., None])[..., 0]


def warp(cam: CameraModel, geom: PanoramaGeometry, traj: RotationTrajectory, x, t) -> np.ndarray:
    return project_equirect(geom, bearings(cam, traj, x, t))


@log_and_reraise(CalibrationError)
def load_calibration(path: str | Path) -> CameraModel:
    kv = read_kv(path)
    missing = [k for k in ("width", "height", "fx", "fy", "cx", "cy") if k not in kv]
    if missing:
        raise CalibrationError(f"{path}: missing calibration keys {missing}")
    try:
        return CameraModel(
            width=int(kv["width"]), height=int(kv["height"]),
            fx=float(kv["fx"]), fy=float(kv["fy"]),
            cx=float(kv["cx"]), cy=float(kv["cy"]),
        )
    except ValueError as e:
        raise CalibrationError(f"{path}: {e}") from e


def save_calibration(cam: CameraModel, path: str | Path) -> Path:
    with atomic_write(path) as f:
        for k, v in asdict(cam).items():
            f.write(f"{k} = {v}\n")
    return Path(path)
