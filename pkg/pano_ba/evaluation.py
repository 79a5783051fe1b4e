"""
Metrics: absolute rotation error after anchoring at t0, photometric error,
residual histograms, and map comparisons up to the per-component gauge.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DataError, QueryError
from .events import ResidualPairs
from .photometric import OptState, residuals, warp_endpoints
from .so3 import RotationTrajectory, geodesic_angle
from .utils import atomic_write, ensure_dir

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AlignedTrajectoryPair:
    est: RotationTrajectory
    gt: RotationTrajectory
    t0: float


def align_at(est: RotationTrajectory, gt: RotationTrajectory, t0: float) -> AlignedTrajectoryPair:
    """Left-multiply est by R_gt(t0) R_est(t0)^T so both agree at t0."""
    for name, traj in (("estimate", est), ("ground truth", gt)):
        a, b = traj.span
        if not a <= t0 <= b:
            raise QueryError(f"anchor time {t0} outside the {name} span [{a}, {b}]")
    R_off = gt(t0) @ est(t0).T
    return AlignedTrajectoryPair(est.left_multiply(R_off), gt, float(t0))


def are_rmse(pair: AlignedTrajectoryPair, timestamps: Optional[np.ndarray] = None) -> float:
    """RMSE in degrees of the geodesic angles; defaults to the estimate's control times inside the GT span."""
    if timestamps is None:
        a, b = pair.gt.span
        ts = pair.est.times
        timestamps = ts[(ts >= a) & (ts <= b)]
    timestamps = np.asarray(timestamps, dtype=float)
    if timestamps.size == 0:
        raise DataError("no evaluation timestamps")
    ang = geodesic_angle(pair.est(timestamps), pair.gt(timestamps))
    return float(np.degrees(np.sqrt(np.mean(ang ** 2))))


def phe(state: OptState, pairs: ResidualPairs, contrast: float) -> float:
    return float(np.sum(residuals(state, pairs, contrast).eps ** 2))


def histogram(eps: np.ndarray, contrast: float, bins: int = 61) -> Tuple[np.ndarray, np.ndarray]:
    """Counts over [-3C, 3C]; values outside land in the end bins."""
    edges = np.linspace(-3.0 * contrast, 3.0 * contrast, bins + 1)
    idx = np.clip(np.searchsorted(edges, eps, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, counts


def residual_histogram(state: OptState, pairs: ResidualPairs, contrast: float,
                       bins: int = 61) -> Tuple[np.ndarray, np.ndarray]:
    return histogram(residuals(state, pairs, contrast).eps, contrast, bins)


def small_residual_fraction(eps: np.ndarray, contrast: float) -> float:
    eps = np.asarray(eps)
    if eps.size == 0:
        return 0.0
    return float(np.mean(np.abs(eps) < 0.5 * contrast))


def pair_links(state: OptState, pairs: ResidualPairs) -> np.ndarray:
    """(n, 2) flat map pixels linked by each usable pair."""
    ev = residuals(state, pairs, 0.0)
    sub = pairs.subset(ev.used)
    a = warp_endpoints(state, sub, sub.t).flat
    b = warp_endpoints(state, sub, sub.t_prev).flat
    return np.stack([a, b], axis=1)


def gauge_align(estimate: np.ndarray, reference: np.ndarray, mask: np.ndarray,
                links: np.ndarray) -> np.ndarray:
    """
    Shift `estimate` by one constant per connected component of the
    pixel-pair graph so it best matches `reference` (least squares) over
    the masked pixels. Pixels outside the mask are returned unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    n = mask.size
    links = np.asarray(links, dtype=np.int64).reshape(-1, 2)
    graph = sp.coo_matrix((np.ones(links.shape[0]), (links[:, 0], links[:, 1])), shape=(n, n))
    n_comp, label = connected_components(graph, directed=False)
    flat_mask = mask.ravel()
    diff = (reference - estimate).ravel()
    lab = label[flat_mask]
    shift = np.bincount(lab, weights=diff[flat_mask], minlength=n_comp) / np.maximum(
        np.bincount(lab, minlength=n_comp), 1)
    out = estimate.ravel().copy()
    out[flat_mask] += shift[lab]
    log.debug("Gauge alignment over %d component(s)", np.unique(lab).size)
    return out.reshape(estimate.shape)


def valid_pixel_correlation(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    x, y = np.asarray(a)[mask], np.asarray(b)[mask]
    if x.size < 2 or np.std(x) == 0 or np.std(y) == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def write_metrics(report: Mapping[str, float], out_dir: str | Path) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    ensure_dir(out_dir)
    csv_path = out_dir / "metrics.csv"
    txt_path = out_dir / "summary.txt"
    df = pd.DataFrame({"metric": list(report.keys()), "value": list(report.values())})
    with atomic_write(csv_path, newline="") as f:
        df.to_csv(f, index=False)
    width = max((len(k) for k in report), default=0)
    with atomic_write(txt_path) as f:
        for k, v in report.items():
            f.write(f"{k:<{width}}  {v:.6g}\n" if isinstance(v, float) else f"{k:<{width}}  {v}\n")
    return csv_path, txt_path


def write_histogram(centers: np.ndarray, counts: np.ndarray, path: str | Path) -> Path:
    with atomic_write(path, newline="") as f:
        pd.DataFrame({"bin_center": centers, "count": counts}).to_csv(f, index=False)
    return Path(path)
