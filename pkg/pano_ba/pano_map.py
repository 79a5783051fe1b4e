"""
Semi-dense panoramic log-intensity map: values, valid mask and the
valid-pixel -> state index table, nearest-neighbor sampling, masked
gradients and Poisson densification.

Only valid pixels are ever read by the sampling helpers; invalid pixels
keep whatever value they hold and never enter the optimization state.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .camera import CameraModel, PanoramaGeometry, pixel_of, warp
from .errors import DensifyError, InvalidSampleError, StateError
from .events import ResidualPairs
from .so3 import RotationTrajectory

log = logging.getLogger(__name__)

DENSIFY_RTOL = 1e-8
DENSIFY_HOLE_WEIGHT = 1e-2


@dataclass(eq=False)
class PanoramaMap:
    geom: PanoramaGeometry
    values: np.ndarray
    mask: np.ndarray
    flat_index: np.ndarray = field(init=False, repr=False)
    state_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.geom.shape or self.mask.shape != self.geom.shape:
            raise StateError(
                f"map arrays {self.values.shape}/{self.mask.shape} do not match geometry {self.geom.shape}"
            )
        self.flat_index = np.flatnonzero(self.mask.ravel())
        self.state_index = np.full(self.geom.n_pixels, -1, dtype=np.int64)
        self.state_index[self.flat_index] = np.arange(self.flat_index.size)

    @property
    def n_params(self) -> int:
        return int(self.flat_index.size)

    @property
    def beta(self) -> np.ndarray:
        """Valid-pixel values in state order."""
        return self.values.ravel()[self.flat_index]

    def copy(self) -> "PanoramaMap":
        return PanoramaMap(self.geom, self.values.copy(), self.mask.copy())

    def with_values(self, values: np.ndarray) -> "PanoramaMap":
        return PanoramaMap(self.geom, values, self.mask.copy())

    def lookup(self, p) -> Tuple[np.ndarray, np.ndarray]:
        """Flat nearest-pixel index and validity flag for map points."""
        row, col = pixel_of(self.geom, p)
        flat = row * self.geom.width + col
        return flat, self.mask.ravel()[flat]


def zeros_like_mask(geom: PanoramaGeometry, mask: np.ndarray) -> PanoramaMap:
    return PanoramaMap(geom, np.zeros(geom.shape), mask)


def build_valid_mask(pairs: ResidualPairs, cam: CameraModel, geom: PanoramaGeometry,
                     traj: RotationTrajectory) -> np.ndarray:
    """A map pixel is valid iff some warped pair endpoint lands on it."""
    mask = np.zeros(geom.shape, dtype=bool)
    if len(pairs) == 0:
        return mask
    x = pairs.pixels
    for t in (pairs.t, pairs.t_prev):
        row, col = pixel_of(geom, warp(cam, geom, traj, x, t))
        mask[row, col] = True
    log.info("Valid mask: %d of %d map pixels", int(mask.sum()), geom.n_pixels)
    return mask


def _neighbors(mask: np.ndarray, axis: int):
    """Masks of the previous/next neighbor along axis being valid (x wraps, y does not)."""
    if axis == 1:
        return np.roll(mask, 1, axis=1), np.roll(mask, -1, axis=1)
    prev = np.zeros_like(mask)
    nxt = np.zeros_like(mask)
    prev[1:] = mask[:-1]
    nxt[:-1] = mask[1:]
    return prev, nxt


def _shifted(values: np.ndarray, axis: int):
    if axis == 1:
        return np.roll(values, 1, axis=1), np.roll(values, -1, axis=1)
    prev = np.concatenate([values[:1], values[:-1]], axis=0)
    nxt = np.concatenate([values[1:], values[-1:]], axis=0)
    return prev, nxt


def gradient_field(pmap: PanoramaMap) -> np.ndarray:
    """
    H x W x 2 gradient (d/dx, d/dy) for residual linearization: central
    differences where both neighbors are valid, halved one-sided differences
    where only one is, zero for isolated and invalid pixels.
    """
    m = pmap.mask
    v = np.where(m, pmap.values, 0.0)
    out = np.zeros(pmap.geom.shape + (2,))
    for k, axis in enumerate((1, 0)):
        has_prev, has_next = _neighbors(m, axis)
        v_prev, v_next = _shifted(v, axis)
        g = np.where(has_prev & has_next, 0.5 * (v_next - v_prev),
            np.where(has_next, 0.5 * (v_next - v),
            np.where(has_prev, 0.5 * (v - v_prev), 0.0)))
        out[..., k] = np.where(m, g, 0.0)
    return out


def masked_central_gradients(pmap: PanoramaMap) -> Tuple[np.ndarray, np.ndarray]:
    """
    (M_x, M_y) with the (-0.5, 0, 0.5) kernels, defined only where both
    taps fall on valid pixels; zero elsewhere. Rows do not wrap.
    """
    m = pmap.mask
    v = np.where(m, pmap.values, 0.0)
    grads = []
    for axis in (1, 0):
        has_prev, has_next = _neighbors(m, axis)
        v_prev, v_next = _shifted(v, axis)
        grads.append(np.where(has_prev & has_next, 0.5 * (v_next - v_prev), 0.0))
    return grads[0], grads[1]


def sample(pmap: PanoramaMap, p) -> float:
    flat, ok = pmap.lookup(np.asarray(p, dtype=float))
    if not ok:
        raise InvalidSampleError(f"map point {tuple(np.asarray(p))} falls on an invalid pixel")
    return float(pmap.values.ravel()[flat])


def sample_gradient(pmap: PanoramaMap, p, grad: np.ndarray | None = None) -> np.ndarray:
    """Gradient at the nearest valid pixel; pass a precomputed gradient_field to skip recomputation."""
    flat, ok = pmap.lookup(np.asarray(p, dtype=float))
    if not ok:
        raise InvalidSampleError(f"map point {tuple(np.asarray(p))} falls on an invalid pixel")
    g = gradient_field(pmap) if grad is None else grad
    return g.reshape(-1, 2)[flat].copy()


def apply_update(pmap: PanoramaMap, delta_beta) -> PanoramaMap:
    delta_beta = np.asarray(delta_beta, dtype=float).reshape(-1)
    if delta_beta.size != pmap.n_params:
        raise StateError(f"map update has length {delta_beta.size}, expected {pmap.n_params}")
    values = pmap.values.copy()
    flat = values.reshape(-1)
    flat[pmap.flat_index] += delta_beta
    return pmap.with_values(values)


def _face_operator(H: int, W: int) -> Tuple[sp.csr_matrix, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Signed incidence D (faces x pixels) of the grid graph: horizontal faces
    wrap across the seam, vertical faces stop at the poles. Returns D and
    the (a, b) pixel pairs of both face families.
    """
    idx = np.arange(H * W).reshape(H, W)
    ha, hb = idx.ravel(), np.roll(idx, -1, axis=1).ravel()
    va, vb = idx[:-1].ravel(), idx[1:].ravel()
    a = np.concatenate([ha, va])
    b = np.concatenate([hb, vb])
    n_f = a.size
    rows = np.concatenate([np.arange(n_f), np.arange(n_f)])
    cols = np.concatenate([a, b])
    vals = np.concatenate([-np.ones(n_f), np.ones(n_f)])
    D = sp.coo_matrix((vals, (rows, cols)), shape=(n_f, H * W)).tocsr()
    return D, ha, hb, va, vb


def densify(pmap: PanoramaMap, rtol: float = DENSIFY_RTOL, hole_weight: float = DENSIFY_HOLE_WEIGHT) -> np.ndarray:
    """
    Fill the panorama from the semi-dense map by a Neumann Poisson solve on
    its gradient field. Each grid face carries the direct difference when
    both of its pixels are valid, otherwise the mean of the available masked
    central gradients at its two pixels. Faces with neither get a zero
    target at `hole_weight`, so unobserved regions are filled harmonically
    without pulling against observed gradients. The free constant is fixed
    by matching the valid-pixel mean.
    """
    if pmap.n_params < 1:
        raise DensifyError("cannot densify a map without valid pixels")
    if not 0.0 < hole_weight <= 1.0:
        raise DensifyError(f"hole_weight must be in (0, 1], got {hole_weight}")
    H, W = pmap.geom.shape
    m = pmap.mask.ravel()
    v = np.where(pmap.mask, pmap.values, 0.0).ravel()
    gx, gy = masked_central_gradients(pmap)
    gx, gy = gx.ravel(), gy.ravel()
    # where the 3-tap kernel is defined, including exact zeros
    hx, hy = (np.logical_and(*_neighbors(pmap.mask, axis)).ravel() for axis in (1, 0))

    D, ha, hb, va, vb = _face_operator(H, W)
    g_faces, w_faces = [], []
    for a, b, g, has in ((ha, hb, gx, hx), (va, vb, gy, hy)):
        direct = m[a] & m[b]
        cnt = has[a].astype(float) + has[b].astype(float)
        avg = (np.where(has[a], g[a], 0.0) + np.where(has[b], g[b], 0.0)) / np.maximum(cnt, 1.0)
        g_faces.append(np.where(direct, v[b] - v[a], avg))
        w_faces.append(np.where(direct | (cnt > 0), 1.0, hole_weight))
    g_faces = np.concatenate(g_faces)
    Wf = sp.diags(np.concatenate(w_faces))

    L = (D.T @ Wf @ D).tocsr()
    rhs = D.T @ (Wf @ g_faces)
    diag = L.diagonal()
    precond = sp.diags(1.0 / diag)
    maxiter = 10 * H * W
    x0 = np.full(H * W, v[m].mean())
    sol, info = cg(L, rhs, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, M=precond)
    if info != 0:
        raise DensifyError(f"Poisson CG did not reach rtol {rtol:g} within {maxiter} iterations")
    sol += v[m].mean() - sol[m].mean()
    log.info("Densified %dx%d map from %d valid pixels", W, H, pmap.n_params)
    return sol.reshape(H, W)
