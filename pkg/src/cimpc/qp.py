"""Dense convex QP solver: operator-splitting ADMM with an active-set polish.

The solver follows the standard operator-splitting scheme for

    min  1/2 z'Pz + f'z   s.t.  l <= Az <= u,

where equality constraints are rows with l == u. A :class:`QpKernel` keeps the
factorization of the splitting matrix so that repeated solves with the same
(P, A) sparsity but different (f, l, u) are cheap; this is what the
branch-and-bound projection and the consensus-MPC QP step rely on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass
class QuadProgram:
    """Convex QP in natural form: hessian/linear cost, Aeq z = beq,
    Ain z >= bin, lo <= z <= hi. Any constraint block may be None."""

    hessian: np.ndarray
    linear_cost: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.hessian.shape[0]

    def validate(self, tol: float = 1e-10) -> list[str]:
        """Return a list of invariant violations (empty when usable)."""
        bad = []
        H = np.asarray(self.hessian)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            bad.append("hessian not square")
            return bad
        n = H.shape[0]
        if not np.all(np.isfinite(H)):
            bad.append("hessian has non-finite entries")
        elif np.max(np.abs(H - H.T)) > tol * max(1.0, np.max(np.abs(H))):
            bad.append("hessian not symmetric")
        if np.asarray(self.linear_cost).shape != (n,):
            bad.append("linear_cost dimension mismatch")
        if (self.a_eq is None) != (self.b_eq is None):
            bad.append("a_eq/b_eq must be given together")
        if self.a_eq is not None and (self.a_eq.shape[1] != n or self.a_eq.shape[0] != len(self.b_eq)):
            bad.append("equality block dimension mismatch")
        if (self.a_in is None) != (self.b_in is None):
            bad.append("a_in/b_in must be given together")
        if self.a_in is not None and (self.a_in.shape[1] != n or self.a_in.shape[0] != len(self.b_in)):
            bad.append("inequality block dimension mismatch")
        if self.lo is not None and self.hi is not None:
            lo = np.asarray(self.lo)
            hi = np.asarray(self.hi)
            if lo.shape != (n,) or hi.shape != (n,):
                bad.append("bounds dimension mismatch")
            elif np.any(lo > hi):
                bad.append("lo > hi componentwise")
        return bad


@dataclass
class QpResult:
    z: np.ndarray
    y: np.ndarray  # multipliers for the stacked constraint rows
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    sets: np.ndarray | None = None  # active-set state when solved by pivoting


@dataclass
class _Warm:
    z: np.ndarray
    y: np.ndarray
    sets: np.ndarray | None = None  # active-set state for active_set_solve


class QpKernel:
    """ADMM engine for min 1/2 z'Pz + f'z s.t. l <= Az <= u.

    The factorization of P + sigma*I + A' diag(rho) A is computed once and
    reused across solves; `update_hessian` refreshes it when only P changes
    (the consensus-penalty schedule of the MPC does exactly that).
    """

    def __init__(self, P: np.ndarray, A: np.ndarray, rho: np.ndarray | float = 0.1,
                 sigma: float = 1e-6, scale: bool = True):
        P = np.asarray(P, dtype=float)
        self.n = P.shape[0]
        A = np.asarray(A, dtype=float).reshape(-1, self.n)
        self.m = A.shape[0]
        self.sigma = sigma
        self._do_scale = scale
        self._equilibrate(P, A)
        rho = np.asarray(rho, dtype=float)
        self.rho_base = np.full(self.m, float(rho)) if rho.ndim == 0 else rho.copy()
        self.rho = self.rho_base.copy()
        self._rho_scale = 1.0   # adaptation survives across solves
        self._eq_mask = np.zeros(self.m, dtype=bool)
        self._atra = (self.A.T * self.rho) @ self.A if self.m else np.zeros((self.n, self.n))
        self._factor()

    def _equilibrate(self, P, A, iters: int = 10):
        """Ruiz scaling of [P A'; A 0] plus a scalar cost normalization, so
        badly conditioned objectives (the MPC tracking weights span seven
        orders of magnitude) do not stall the splitting iteration."""
        n, m = self.n, self.m
        d = np.ones(n)
        e = np.ones(m)
        c = 1.0
        if self._do_scale and n:
            P = P.copy()
            A = A.copy()
            for _ in range(iters):
                col = np.abs(P).max(axis=0)
                if m:
                    col = np.maximum(col, np.abs(A).max(axis=0))
                row = np.abs(A).max(axis=1) if m else np.zeros(0)
                dd = 1.0 / np.sqrt(np.maximum(col, 1e-12))
                ee = 1.0 / np.sqrt(np.maximum(row, 1e-12))
                dd[col < 1e-12] = 1.0
                ee[row < 1e-12] = 1.0
                P = (P * dd) * dd[:, None]
                if m:
                    A = (A * dd) * ee[:, None]
                d *= dd
                e *= ee
                gamma = np.mean(np.maximum(np.abs(P).max(axis=0), 1e-12))
                cc = 1.0 / max(gamma, 1e-12)
                P *= cc
                c *= cc
                if max(np.abs(dd - 1.0).max(), np.abs(ee - 1.0).max(initial=0.0),
                       abs(cc - 1.0)) < 1e-3:
                    break
        self.P = P
        self.A = A
        self._d = d
        self._e = e
        self._c = c
        self._p_is_diag = bool(np.count_nonzero(P - np.diag(np.diag(P))) == 0)

    def _factor(self):
        M = self.P + self.sigma * np.eye(self.n) + self._atra
        self._chol = scipy.linalg.cho_factor(M, lower=True, check_finite=False)

    def update_hessian(self, P: np.ndarray, requilibrate: bool = False):
        """Swap in a new Hessian. By default the existing scaling is kept (it
        stays a valid equilibration and saves the recompute); pass
        requilibrate=True after a drastic change of scale."""
        P = np.asarray(P, dtype=float)
        if requilibrate or not self._do_scale:
            a_orig = (self.A / self._e[:, None]) / self._d if self.m else self.A
            self._equilibrate(P, a_orig)
        else:
            self.P = self._c * (P * self._d) * self._d[:, None]
            self._p_is_diag = bool(np.count_nonzero(P - np.diag(np.diag(P))) == 0)
        self._atra = (self.A.T * self.rho) @ self.A if self.m else np.zeros((self.n, self.n))
        self._factor()

    def _set_rho(self, rho_new: np.ndarray):
        self.rho = rho_new
        self._atra = (self.A.T * self.rho) @ self.A if self.m else np.zeros((self.n, self.n))
        self._factor()

    def solve(self, f: np.ndarray, l: np.ndarray, u: np.ndarray,
              warm: _Warm | None = None, tol: float = 1e-8,
              max_iter: int = 4000, polish: bool = True,
              adaptive_rho: bool = True, alpha: float = 1.6) -> QpResult:
        n, m = self.n, self.m
        d, e, c = self._d, self._e, self._c
        f = c * d * np.asarray(f, dtype=float)
        if m == 0:
            z = scipy.linalg.solve(self.P + 1e-12 * np.eye(n), -f,
                                   assume_a="sym", check_finite=False)
            obj = float(0.5 * z @ self.P @ z + f @ z) / c
            r_d = float(np.max(np.abs((self.P @ z + f) / d))) / c
            return QpResult(d * z, np.zeros(0), QpStatus.OPTIMAL, 0, 0.0, r_d, obj)
        l = e * np.asarray(l, dtype=float)
        u = e * np.asarray(u, dtype=float)
        # equality rows (l == u) converge far faster under a stiffer penalty
        eq = (u - l) <= 1e-12 * np.maximum(1.0, np.abs(u))
        if not np.array_equal(eq, self._eq_mask):
            self._eq_mask = eq
            base = self._rho_scale * self.rho_base
            self._set_rho(np.clip(np.where(eq, 1e3 * base, base), 1e-6, 1e7))
        if warm is not None and warm.z.shape == (n,):
            z = warm.z / d
            y = c * warm.y / e if warm.y.shape == (m,) else np.zeros(m)
        else:
            z = np.zeros(n)
            y = np.zeros(m)

        def residuals(z, y):
            """Primal/dual residuals, unscaled and normalized by the size of
            the terms they compare (OSQP-style relative stopping)."""
            az = self.A @ z
            viol = np.maximum(l - az, az - u)
            fin = np.isfinite(viol)
            r_p = float(np.max(viol[fin] / e[fin], initial=0.0))
            pz = self.P @ z
            aty = self.A.T @ y
            r_d = float(np.max(np.abs((pz + f + aty) / d))) / c
            p_scale = max(1.0, float(np.max(np.abs(az / e), initial=0.0)))
            d_scale = max(1.0, float(np.max(np.abs(pz / d), initial=0.0)) / c,
                          float(np.max(np.abs(f / d), initial=0.0)) / c,
                          float(np.max(np.abs(aty / d), initial=0.0)) / c)
            return max(r_p, 0.0) / p_scale, r_d / d_scale

        v = np.clip(self.A @ z, l, u)
        r_p = r_d = np.inf
        it = 0
        rho_updates = 0
        check_every = 20
        y_prev = y.copy()
        infeasible_cert = False
        while it < max_iter:
            it += 1
            rhs = self.sigma * z - f + self.A.T @ (self.rho * v - y)
            zt = scipy.linalg.cho_solve(self._chol, rhs, check_finite=False)
            z = alpha * zt + (1.0 - alpha) * z
            azr = alpha * (self.A @ zt) + (1.0 - alpha) * v
            v_new = np.clip(azr + y / self.rho, l, u)
            y = y + self.rho * (azr - v_new)
            v = v_new
            if it % check_every == 0 or it == max_iter:
                r_p, r_d = residuals(z, y)
                if r_p <= tol and r_d <= tol:
                    break
                if self._primal_infeasible(y - y_prev, l, u):
                    infeasible_cert = True
                    break
                y_prev = y.copy()
                if adaptive_rho and rho_updates < 2 and it in (100, 500):
                    ratio = max(r_p, 1e-16) / max(r_d, 1e-16)
                    if ratio > 10.0 or ratio < 0.1:
                        scale = np.clip(np.sqrt(ratio), 1e-3, 1e3)
                        self._rho_scale = float(np.clip(self._rho_scale * scale,
                                                        1e-6, 1e6))
                        self._set_rho(np.clip(self.rho * scale, 1e-6, 1e7))
                        rho_updates += 1
        if polish:
            zp, yp = self._polish(f, l, u, z, y, tol)
            if zp is not None:
                r_pp, r_dp = residuals(zp, yp)
                if r_pp <= max(tol, r_p) and r_dp <= max(tol, r_d):
                    z, y, r_p, r_d = zp, yp, r_pp, r_dp
        obj = float(0.5 * z @ self.P @ z + f @ z) / c
        if r_p <= tol and r_d <= tol:
            status = QpStatus.OPTIMAL
        elif infeasible_cert:
            status = QpStatus.INFEASIBLE
        else:
            status = QpStatus.MAX_ITER
        return QpResult(d * z, e * y / c, status, it, r_p, r_d, obj)

    def _primal_infeasible(self, dy, l, u, eps: float = 1e-6) -> bool:
        """OSQP-style certificate: a dual direction dy with A'dy ~ 0 whose
        support value on [l, u] is strictly negative proves Az in [l, u] has
        no solution."""
        nrm = float(np.max(np.abs(dy), initial=0.0))
        if nrm < 1e-14:
            return False
        dy = dy / nrm
        if np.max(np.abs(self.A.T @ dy)) > eps:
            return False
        pos = dy > eps
        neg = dy < -eps
        if np.any(pos & ~np.isfinite(u)) or np.any(neg & ~np.isfinite(l)):
            return False
        val = float(np.sum(u[pos] * dy[pos]) + np.sum(l[neg] * dy[neg]))
        return val < -eps

    def _polish(self, f, l, u, z, y, tol):
        """KKT solve on the active set guessed from the ADMM iterate, with a
        few repair passes that add violated rows and drop wrong-sign
        multipliers. Returns the last candidate; the caller accept-checks."""
        az = self.A @ z
        act_tol = max(10.0 * tol, 1e-7)
        low = ((y < -act_tol) | (az - l < act_tol)) & np.isfinite(l)
        upp = ((y > act_tol) | (u - az < act_tol)) & np.isfinite(u)
        eq = np.isfinite(l) & np.isfinite(u) & (u - l < 1e-12)
        low |= eq
        upp &= ~low
        zp = yp = None
        for _ in range(4):
            out = self._kkt_solve(f, l, u, low, upp)
            if out is None:
                return zp, yp
            zp, yp = out
            azp = self.A @ zp
            rep_tol = 1e-9 * max(1.0, float(np.max(np.abs(azp))))
            hit_low = ~low & ~upp & np.isfinite(l) & (azp < l - rep_tol)
            hit_up = ~low & ~upp & np.isfinite(u) & (azp > u + rep_tol)
            drop_low = low & ~eq & (yp > rep_tol)
            drop_up = upp & (yp < -rep_tol)
            if not (hit_low.any() or hit_up.any() or drop_low.any() or drop_up.any()):
                break
            low = (low & ~drop_low) | hit_low
            upp = (upp & ~drop_up) | hit_up
        return zp, yp

    def _kkt_solve(self, f, l, u, low, upp):
        act = low | upp
        if not np.any(act):
            try:
                zp = scipy.linalg.solve(self.P + 1e-12 * np.eye(self.n), -f,
                                        assume_a="sym", check_finite=False)
            except scipy.linalg.LinAlgError:
                return None
            return zp, np.zeros(self.m)
        a_act = self.A[act]
        b_act = np.where(low[act], l[act], u[act])
        na = a_act.shape[0]
        if self._p_is_diag:
            # Schur complement on the diagonal Hessian: much cheaper than the
            # full KKT factorization for the MPC-sized programs
            pd = np.diag(self.P) + 1e-12
            aw = a_act / pd
            M = aw @ a_act.T
            M[np.diag_indices(na)] += 1e-10 * max(1.0, np.trace(M) / na)
            try:
                mc = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
                y_act = scipy.linalg.cho_solve(mc, -(b_act + aw @ f),
                                               check_finite=False)
            except scipy.linalg.LinAlgError:
                return None
            zp = -(f + a_act.T @ y_act) / pd
            yp = np.zeros(self.m)
            yp[act] = y_act
            return zp, yp
        delta = 1e-9
        K = np.block([[self.P + delta * np.eye(self.n), a_act.T],
                      [a_act, -delta * np.eye(na)]])
        rhs = np.concatenate([-f, b_act])
        try:
            lu = scipy.linalg.lu_factor(K, check_finite=False)
            sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            # one step of iterative refinement against the unregularized KKT
            K0 = np.block([[self.P, a_act.T], [a_act, np.zeros((na, na))]])
            sol = sol + scipy.linalg.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
        except (scipy.linalg.LinAlgError, ValueError):
            return None
        zp = sol[:self.n]
        yp = np.zeros(self.m)
        yp[act] = sol[self.n:]
        return zp, yp


def _to_box_form(prog: QuadProgram):
    """Stack [Aeq; Ain; I(bounds)] into l <= Az <= u rows.

    Returns (A, l, u, eq_mask)."""
    n = prog.n
    rows, lows, upps, eqs = [], [], [], []
    if prog.a_eq is not None and len(prog.b_eq):
        rows.append(np.asarray(prog.a_eq, dtype=float))
        lows.append(np.asarray(prog.b_eq, dtype=float))
        upps.append(np.asarray(prog.b_eq, dtype=float))
        eqs.append(np.ones(len(prog.b_eq), dtype=bool))
    if prog.a_in is not None and len(prog.b_in):
        rows.append(np.asarray(prog.a_in, dtype=float))
        lows.append(np.asarray(prog.b_in, dtype=float))
        upps.append(np.full(len(prog.b_in), np.inf))
        eqs.append(np.zeros(len(prog.b_in), dtype=bool))
    if prog.lo is not None or prog.hi is not None:
        lo = np.full(n, -np.inf) if prog.lo is None else np.asarray(prog.lo, dtype=float)
        hi = np.full(n, np.inf) if prog.hi is None else np.asarray(prog.hi, dtype=float)
        bounded = np.isfinite(lo) | np.isfinite(hi)
        if np.any(bounded):
            rows.append(np.eye(n)[bounded])
            lows.append(lo[bounded])
            upps.append(hi[bounded])
            eqs.append(np.zeros(int(bounded.sum()), dtype=bool))
    if rows:
        A = np.vstack(rows)
        l = np.concatenate(lows)
        u = np.concatenate(upps)
        eq = np.concatenate(eqs)
    else:
        A = np.zeros((0, n))
        l = np.zeros(0)
        u = np.zeros(0)
        eq = np.zeros(0, dtype=bool)
    return A, l, u, eq


def active_set_solve(P: np.ndarray, A: np.ndarray, f: np.ndarray,
                     l: np.ndarray, u: np.ndarray,
                     warm_sets: np.ndarray | None = None,
                     max_pivots: int = 300, tol: float = 1e-9):
    """Exact solve of min 1/2 z'Pz + f'z s.t. l <= Az <= u for strictly
    convex P by least-index active-set pivoting on the working set.

    Small problems only (dense KKT per pivot); finitely convergent when P is
    positive definite. Returns (z, y, sets, pivots) or None when the pivot
    budget runs out (caller falls back to the splitting solver), so
    infeasible programs are never misreported here. `sets` codes each row
    0 free, 1 at lower, 2 at upper and warm-starts the next call.
    """
    n = P.shape[0]
    m = A.shape[0]
    eq = np.isfinite(l) & np.isfinite(u) & (u - l <= 1e-14 * np.maximum(1.0, np.abs(u)))
    if warm_sets is not None and warm_sets.shape == (m,):
        sets = warm_sets.astype(np.int8).copy()
        sets[(sets == 1) & ~np.isfinite(l)] = 0
        sets[(sets == 2) & ~np.isfinite(u)] = 0
    else:
        sets = np.zeros(m, dtype=np.int8)
    sets[eq] = 1
    try:
        p_chol = scipy.linalg.cho_factor(P, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        return None
    pif = scipy.linalg.cho_solve(p_chol, -f, check_finite=False)
    pia = scipy.linalg.cho_solve(p_chol, A.T, check_finite=False)  # P^-1 A'
    scale = max(1.0, float(np.max(np.abs(f))))
    feas_tol = tol * scale
    for pivot in range(max_pivots):
        act = np.flatnonzero(sets)
        if len(act):
            b = np.where(sets[act] == 1, l[act], u[act])
            M = A[act] @ pia[:, act]
            rhs = -(b - A[act] @ pif)
            # dependent active rows make M singular; the jitter picks one of
            # the equivalent multiplier vectors without disturbing z
            jitter = 1e-10 * max(1.0, float(np.trace(M)) / len(act))
            try:
                mc = scipy.linalg.cho_factor(M + jitter * np.eye(len(act)),
                                             lower=True, check_finite=False)
                y_act = scipy.linalg.cho_solve(mc, rhs, check_finite=False)
            except scipy.linalg.LinAlgError:
                return None
            z = pif - pia[:, act] @ y_act
        else:
            y_act = np.zeros(0)
            z = pif
        az = A @ z
        y = np.zeros(m)
        y[act] = y_act
        # least-index violation: primal for free rows, dual sign for active
        free = sets == 0
        hit_low = free & (az < l - feas_tol)
        hit_up = free & (az > u + feas_tol)
        release = ~eq & (((sets == 1) & (y > feas_tol)) |
                         ((sets == 2) & (y < -feas_tol)))
        any_bad = hit_low | hit_up | release
        if not any_bad.any():
            return z, y, sets, pivot + 1
        bad = int(np.argmax(any_bad))
        sets[bad] = 1 if hit_low[bad] else (2 if hit_up[bad] else 0)
    return None


def qp_solve(prog: QuadProgram, warm: np.ndarray | None = None,
             tol: float = 1e-8, max_iter: int = 4000) -> QpResult:
    """One-shot solve of a QuadProgram. `warm` is an optional primal guess."""
    bad = prog.validate()
    if bad:
        raise ValueError("invalid QuadProgram: " + "; ".join(bad))
    if tol <= 0:
        raise ValueError("tol must be positive")
    A, l, u, _ = _to_box_form(prog)
    kern = QpKernel(np.asarray(prog.hessian, dtype=float), A, rho=0.1)
    w = _Warm(np.asarray(warm, dtype=float), np.zeros(A.shape[0])) if warm is not None else None
    return kern.solve(np.asarray(prog.linear_cost, dtype=float), l, u,
                      warm=w, tol=tol, max_iter=max_iter)
