"""Linear complementarity problem solvers.

Two methods: exhaustive active-set enumeration (exact, small problems only)
and projected Gauss-Seidel (the workhorse for contact problems, where M is
PSD with nonnegative diagonal by construction).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numba import njit


class LcpMethod(enum.Enum):
    ENUMERATE = "enumerate"
    ITERATIVE = "iterative"


class LcpNoSolution(RuntimeError):
    pass


@dataclass
class LinCompProblem:
    """Seek lam with 0 <= lam  perp  M lam + q >= 0."""

    m_matrix: np.ndarray
    q_vector: np.ndarray

    @property
    def n(self) -> int:
        return len(self.q_vector)

    def validate(self) -> list[str]:
        bad = []
        M = np.asarray(self.m_matrix)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            bad.append("M not square")
        elif M.shape[0] != len(self.q_vector):
            bad.append("q dimension mismatch")
        if not (np.all(np.isfinite(self.m_matrix)) and np.all(np.isfinite(self.q_vector))):
            bad.append("non-finite entries")
        return bad


def complementarity_error(M: np.ndarray, q: np.ndarray, lam: np.ndarray) -> float:
    """max of: negative-part of lam, negative-part of slack, |lam_i * w_i|."""
    w = M @ lam + q
    if len(lam) == 0:
        return 0.0
    return float(max(np.max(-lam, initial=0.0), np.max(-w, initial=0.0),
                     np.max(np.abs(lam * w), initial=0.0)))


@njit(cache=True)
def _pgs(M, q, lam, max_sweeps, tol):
    n = lam.shape[0]
    for sweep in range(max_sweeps):
        for i in range(n):
            mii = M[i, i]
            if mii <= 1e-14:
                continue
            wi = q[i]
            for j in range(n):
                wi += M[i, j] * lam[j]
            li = lam[i] - wi / mii
            lam[i] = li if li > 0.0 else 0.0
        # residual check
        worst = 0.0
        for i in range(n):
            wi = q[i]
            for j in range(n):
                wi += M[i, j] * lam[j]
            if -wi > worst:
                worst = -wi
            p = lam[i] * wi
            if p < 0.0:
                p = -p
            if p > worst:
                worst = p
        if worst <= tol:
            return sweep + 1, worst
    return max_sweeps, worst


def _solve_enumerate(M, q, tol):
    n = len(q)
    if n > 16:
        raise ValueError("ENUMERATE limited to n <= 16")
    best = None
    for mask in range(1 << n):
        active = [i for i in range(n) if mask >> i & 1]
        lam = np.zeros(n)
        if active:
            sub = M[np.ix_(active, active)]
            try:
                lam_a = np.linalg.solve(sub, -q[np.asarray(active)])
            except np.linalg.LinAlgError:
                continue
            lam[np.asarray(active)] = lam_a
        err = complementarity_error(M, q, lam)
        if err <= tol:
            return lam
        if best is None or err < best[1]:
            best = (lam, err)
    raise LcpNoSolution(f"no active set feasible; best residual {best[1]:.3e}")


def lcp_solve(p: LinCompProblem, method: LcpMethod = LcpMethod.ENUMERATE,
              tol: float | None = None, warm: np.ndarray | None = None,
              max_sweeps: int = 500) -> np.ndarray:
    """Solve 0 <= lam perp M lam + q >= 0.

    ENUMERATE: exact mode enumeration, residual target 1e-8, n <= 16 only.
    ITERATIVE: projected Gauss-Seidel, residual target 1e-6, 500-sweep cap.
    Raises LcpNoSolution when the residual target cannot be met.
    """
    bad = p.validate()
    if bad:
        raise ValueError("invalid LCP: " + "; ".join(bad))
    M = np.ascontiguousarray(p.m_matrix, dtype=float)
    q = np.ascontiguousarray(p.q_vector, dtype=float)
    if p.n == 0:
        return np.zeros(0)
    if method is LcpMethod.ENUMERATE:
        return _solve_enumerate(M, q, 1e-8 if tol is None else tol)
    tol = 1e-6 if tol is None else tol
    lam = np.zeros(p.n) if warm is None else np.asarray(warm, dtype=float).copy()
    block = 50
    used = 0
    resid = np.inf
    while used < max_sweeps:
        sweeps, resid = _pgs(M, q, lam, min(block, max_sweeps - used), tol)
        used += sweeps
        if resid <= tol:
            return lam
        # active-set polish: solve exactly on the currently active forces
        polished = _active_set_polish(M, q, lam, tol)
        if polished is not None:
            return polished
    raise LcpNoSolution(f"PGS stalled at residual {resid:.3e} after {used} sweeps")


def _active_set_polish(M, q, lam, tol, max_pivots=200):
    """Principal pivoting (least-index rule) started from the PGS active set.

    Finitely convergent for P-matrices; used as a refinement once PGS has
    identified a near-solution, so it typically terminates in a few pivots.
    """
    n = len(lam)
    active = lam > tol
    for _ in range(max_pivots):
        cand = np.zeros(n)
        idx = np.flatnonzero(active)
        if len(idx):
            try:
                cand[idx] = np.linalg.solve(M[np.ix_(idx, idx)], -q[idx])
            except np.linalg.LinAlgError:
                return None
        w = M @ cand + q
        bad_lam = np.flatnonzero(active & (cand < -tol))
        bad_w = np.flatnonzero(~active & (w < -tol))
        if len(bad_lam) == 0 and len(bad_w) == 0:
            if complementarity_error(M, q, np.maximum(cand, 0.0)) <= tol:
                return np.maximum(cand, 0.0)
            return None
        # least-index pivot
        i = min(bad_lam[0] if len(bad_lam) else n, bad_w[0] if len(bad_w) else n)
        active[i] = ~active[i]
    return None
