"""
Cumulative assembly of the partitioned normal equations

    [A11  A12] [d_alpha]   [b1]
    [A21  A22] [d_beta ] = [b2]

from linearized residuals without materializing the Jacobian, and the
damped linear solves (A + lambda diag A) dP = b.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu
from tqdm import tqdm

from .errors import LinearSolverError
from .photometric import Linearization, OptState, SolverConfig
from .utils import chunked_ranges

try:  # optional AMD-ordered sparse Cholesky
    from sksparse import cholmod
except ImportError:  # pragma: no cover - depends on the environment
    cholmod = None

log = logging.getLogger(__name__)


@dataclass(eq=False)
class NormalEquations:
    A11: np.ndarray          # dense, free-pose block
    A12: sp.csr_matrix
    A22: sp.csr_matrix
    b1: np.ndarray
    b2: np.ndarray
    n_residuals: int = 0

    @property
    def n_pose(self) -> int:
        return self.b1.size

    @property
    def dim(self) -> int:
        return self.b1.size + self.b2.size

    def matrix(self) -> sp.csc_matrix:
        if self.n_pose == 0:
            return self.A22.tocsc()
        return sp.bmat([[sp.csr_matrix(self.A11), self.A12], [self.A12.T, self.A22]], format="csc")

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.b1, self.b2])


@dataclass
class _Partial:
    a11: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    rows12: np.ndarray
    cols12: np.ndarray
    vals12: np.ndarray
    rows22: np.ndarray
    cols22: np.ndarray
    vals22: np.ndarray


def _accumulate_chunk(state: OptState, lin: Linearization, w: np.ndarray, map_only: bool) -> _Partial:
    n1 = 0 if map_only else state.n_pose_params
    n2 = state.pmap.n_params
    n = len(lin)
    we = w * lin.eps
    mk, mp = lin.map_index[:, 0], lin.map_index[:, 1]

    # A22: +w on both diagonals, -w on the two symmetric off-diagonals
    rows22 = np.concatenate([mk, mp, mk, mp])
    cols22 = np.concatenate([mk, mp, mp, mk])
    vals22 = np.concatenate([w, w, -w, -w])
    b2 = np.bincount(mk, weights=-we, minlength=n2) + np.bincount(mp, weights=we, minlength=n2)

    if n1 == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        return _Partial(np.zeros((0, 0)), np.zeros(0), b2, empty_i, empty_i, np.zeros(0),
                        rows22, cols22, vals22)

    # 12 pose entries per residual; the fixed pose gets zero weight at column 0
    col0 = state.pose_column(lin.pose_index)                       # (n, 4)
    free = col0 >= 0
    cols = (np.where(free, col0, 0)[:, :, None] + np.arange(3)).reshape(n, 12)
    vals = np.where(free[:, :, None], lin.pose_rows, 0.0).reshape(n, 12)

    outer = (w[:, None, None] * vals[:, :, None]) * vals[:, None, :]
    flat = (cols[:, :, None] * n1 + cols[:, None, :]).ravel()
    a11 = np.bincount(flat, weights=outer.ravel(), minlength=n1 * n1).reshape(n1, n1)
    b1 = np.bincount(cols.ravel(), weights=(-we[:, None] * vals).ravel(), minlength=n1)

    wv = w[:, None] * vals                                         # (n, 12)
    rows12 = np.concatenate([cols.ravel(), cols.ravel()])
    cols12 = np.concatenate([np.repeat(mk, 12), np.repeat(mp, 12)])
    vals12 = np.concatenate([wv.ravel(), -wv.ravel()])
    return _Partial(a11, b1, b2, rows12, cols12, vals12, rows22, cols22, vals22)


def accumulate_normal_equations(
    state: OptState,
    lin: Linearization,
    config: SolverConfig,
    weights: Optional[np.ndarray] = None,
    map_only: bool = False,
    progress: bool = False,
) -> NormalEquations:
    """
    A = sum w_k r_k r_k^T and b = -sum w_k r_k eps_k over chunks of
    residuals. Chunks run on a thread pool (inline when deterministic) and
    partial sums are merged in chunk order.
    """
    n1 = 0 if map_only else state.n_pose_params
    n2 = state.pmap.n_params
    w = np.ones(len(lin)) if weights is None else np.asarray(weights, dtype=float)
    ranges = list(chunked_ranges(len(lin), config.chunk_size))

    def work(rng: Tuple[int, int]) -> _Partial:
        a, b = rng
        return _accumulate_chunk(state, lin.subset(slice(a, b)), w[a:b], map_only)

    bar = tqdm(total=len(ranges), desc="Accumulate", unit="chunk") if progress else None
    parts: List[_Partial] = []
    if config.deterministic or config.max_workers == 1 or len(ranges) <= 1:
        for rng in ranges:
            parts.append(work(rng))
            if bar:
                bar.update(1)
    else:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            for part in pool.map(work, ranges):
                parts.append(part)
                if bar:
                    bar.update(1)
    if bar:
        bar.close()

    A11 = np.zeros((n1, n1))
    b1 = np.zeros(n1)
    b2 = np.zeros(n2)
    for part in parts:
        if n1:
            A11 += part.a11
            b1 += part.b1
        b2 += part.b2

    def assemble(attr: str, shape) -> sp.csr_matrix:
        if not parts:
            return sp.csr_matrix(shape)
        rows = np.concatenate([getattr(p, f"rows{attr}") for p in parts])
        cols = np.concatenate([getattr(p, f"cols{attr}") for p in parts])
        vals = np.concatenate([getattr(p, f"vals{attr}") for p in parts])
        return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()

    A12 = assemble("12", (n1, n2))
    A22 = assemble("22", (n2, n2))
    # exact symmetry regardless of duplicate-summation order
    A11 = 0.5 * (A11 + A11.T)
    A22 = (0.5 * (A22 + A22.T)).tocsr()
    A22.eliminate_zeros()
    log.debug("Normal equations: %d pose + %d map unknowns from %d residuals (nnz A22=%d)",
              n1, n2, len(lin), A22.nnz)
    return NormalEquations(A11, A12, A22, b1, b2, n_residuals=len(lin))


@dataclass(frozen=True)
class LinearSolution:
    x: np.ndarray
    method: str
    iterations: int = 0
    converged: bool = True


def damped_matrix(ne: NormalEquations, lam: float, diag_floor: float) -> sp.csc_matrix:
    A = ne.matrix()
    d = A.diagonal()
    return (A + sp.diags(lam * np.maximum(d, diag_floor))).tocsc()


def _solve_cholesky(A: sp.csc_matrix, b: np.ndarray, lam: float) -> LinearSolution:
    if cholmod is not None:
        try:
            factor = cholmod.cholesky(A, ordering_method="amd")
        except cholmod.CholmodNotPositiveDefiniteError as e:
            raise LinearSolverError(
                f"damped system is not positive definite at lambda={lam:g}; increase lambda ({e})"
            ) from e
        return LinearSolution(factor.solve_A(b), "cholmod")

    # sparse LU in symmetric mode stands in for the Cholesky factor
    try:
        lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options={"SymmetricMode": True})
    except RuntimeError as e:
        raise LinearSolverError(f"factorization failed at lambda={lam:g}; increase lambda ({e})") from e
    if np.any(lu.U.diagonal() <= 0):
        raise LinearSolverError(f"damped system is not positive definite at lambda={lam:g}; increase lambda")
    return LinearSolution(lu.solve(b), "splu")


def _solve_cg(A: sp.csc_matrix, b: np.ndarray, rtol: float) -> LinearSolution:
    n = A.shape[0]
    d = A.diagonal()
    precond = sp.diags(np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0))
    count = [0]

    def tick(_xk):
        count[0] += 1

    x, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=10 * n, M=precond, callback=tick)
    if info > 0:
        log.warning("CG reached its iteration cap (%d) before rtol %.1e; using the last iterate", 10 * n, rtol)
    elif info < 0:
        raise LinearSolverError(f"CG breakdown (info={info})")
    return LinearSolution(x, "cg", iterations=count[0], converged=info == 0)


def solve_normal_equations(ne: NormalEquations, lam: float, config: SolverConfig) -> LinearSolution:
    """Solve (A + lam * max(diag A, diag_floor)) dP = b with the configured solver."""
    if lam < 0:
        raise LinearSolverError(f"lambda must be >= 0, got {lam}")
    b = ne.rhs()
    if ne.dim == 0:
        return LinearSolution(np.zeros(0), config.solver)
    A = damped_matrix(ne, lam, config.diag_floor)
    if config.solver == "cg":
        sol = _solve_cg(A, b, config.cg_tol)
    else:
        sol = _solve_cholesky(A, b, lam)
    log.debug("Linear solve (%s): dim=%d lambda=%.1e iters=%d", sol.method, ne.dim, lam, sol.iterations)
    return sol
