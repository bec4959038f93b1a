"""Per-knot projection onto the complementarity set via budgeted
branch-and-bound.

Given a stacked iterate w = (x, lam, u) for one knot point, find the nearest
point delta (in the diagonal metric U) satisfying

    E x + F lam + H u + c >= 0,   lam >= 0,   lam . slack = 0,

plus optional box bounds. Best-first search on the QP relaxation lower bound,
branching on the complementarity pair with the largest lam_i * slack_i
violation (tie-break: lowest pair index). The relaxation QPs all share one
factorized kernel; nodes differ only in constraint bounds.
"""

from __future__ import annotations

import enum
import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from ._kernels import active_set_diag_nb
from .lcs import LcsModel
from .qp import QpKernel, QpResult, QpStatus, _Warm


class PairMode(enum.Enum):
    FREE = 0
    FORCE_ZERO = 1
    SLACK_ZERO = 2


class InfeasibleKnot(RuntimeError):
    pass


@dataclass
class ProjectionBudget:
    max_nodes: int = 2000
    max_time: float | None = 0.005  # seconds; None disables the wall clock cap
    rel_gap: float = 0.0            # prune nodes within this relative gap


@dataclass
class ProjectionResult:
    delta: np.ndarray
    objective: float
    exact: bool          # True when the tree was exhausted within budget
    nodes: int
    modes: np.ndarray    # final active PairMode values, int-coded
    incumbent_history: list[float] = field(default_factory=list)


class _KnotProjector:
    """Reusable projector for a fixed LCS knot structure.

    Constraint rows, in order: n_lam slack rows (E x + F lam + H u + c),
    n_lam force rows (identity on lam), then finite box-bound rows.
    """

    COMP_TOL = 1e-8

    def __init__(self, lcs: LcsModel, u_weights: np.ndarray,
                 lo: np.ndarray | None = None, hi: np.ndarray | None = None):
        n_x, n_u, n_lam = lcs.n_x, lcs.n_u, lcs.n_lam
        self.n = n_x + n_lam + n_u
        self.n_lam = n_lam
        self.lcs = lcs
        u_weights = np.asarray(u_weights, dtype=float)
        if u_weights.shape != (self.n,) or np.any(u_weights <= 0):
            raise ValueError("U must be a positive diagonal of length n_x+n_lam+n_u")
        self.u_diag = u_weights
        slack_rows = np.hstack([lcs.e, lcs.f, lcs.h])
        force_rows = np.zeros((n_lam, self.n))
        force_rows[:, n_x:n_x + n_lam] = np.eye(n_lam)
        rows = [slack_rows, force_rows]
        self._base_l = [np.asarray(-lcs.c, dtype=float), np.zeros(n_lam)]
        self._base_u = [np.full(n_lam, np.inf), np.full(n_lam, np.inf)]
        if lo is not None or hi is not None:
            lo = np.full(self.n, -np.inf) if lo is None else np.asarray(lo, dtype=float)
            hi = np.full(self.n, np.inf) if hi is None else np.asarray(hi, dtype=float)
            bounded = np.isfinite(lo) | np.isfinite(hi)
            if np.any(bounded):
                rows.append(np.eye(self.n)[bounded])
                self._base_l.append(lo[bounded])
                self._base_u.append(hi[bounded])
        A = np.vstack(rows)
        self._p_dense = np.diag(2.0 * self.u_diag)
        self._a_dense = A
        self.m = A.shape[0]
        self._kernel = None  # splitting fallback, built only if a node needs it
        self.l0 = np.concatenate(self._base_l)
        self.u0 = np.concatenate(self._base_u)

    @property
    def kernel(self) -> QpKernel:
        if self._kernel is None:
            self._kernel = QpKernel(self._p_dense, self._a_dense, rho=1.0)
        return self._kernel

    def _node_bounds(self, modes: np.ndarray):
        l = self.l0.copy()
        u = self.u0.copy()
        nl = self.n_lam
        slack_zero = modes == PairMode.SLACK_ZERO.value
        force_zero = modes == PairMode.FORCE_ZERO.value
        # slack row i pinned: l = u = -c_i; force row pinned: l = u = 0
        u[:nl][slack_zero] = l[:nl][slack_zero]
        u[nl:2 * nl][force_zero] = 0.0
        return l, u

    def _solve_node(self, omega, modes, warm):
        f = -2.0 * self.u_diag * omega
        l, u = self._node_bounds(modes)
        const = float(np.sum(self.u_diag * omega * omega))
        eq = np.isfinite(l) & np.isfinite(u) & (u - l <= 1e-14 * np.maximum(1.0, np.abs(u)))
        if warm is not None and warm.sets is not None:
            sets = warm.sets.astype(np.int8)
            sets[(sets == 1) & ~np.isfinite(l)] = 0
            sets[(sets == 2) & ~np.isfinite(u)] = 0
        else:
            sets = np.zeros(len(l), dtype=np.int8)
        sets[eq] = 1
        ok, z, y, sets, pivots = active_set_diag_nb(
            2.0 * self.u_diag, self._a_dense, f, l, u, sets, eq, 300, 1e-9)
        if ok:
            obj = float(self.u_diag @ (z * z) + f @ z)
            res = QpResult(z, y, QpStatus.OPTIMAL, pivots, 0.0, 0.0, obj)
            return res, obj + const, sets
        # pivot budget exhausted (typically an infeasible node): the
        # splitting solver settles it with a certificate
        res = self.kernel.solve(f, l, u, warm=warm, tol=1e-8, max_iter=1000,
                                adaptive_rho=True)
        return res, res.objective + const, None

    def _violations(self, z, modes):
        nl = self.n_lam
        lam = z[self.lcs.n_x:self.lcs.n_x + nl]
        slack = self.lcs.e @ z[:self.lcs.n_x] + self.lcs.f @ lam \
            + self.lcs.h @ z[self.lcs.n_x + nl:] + self.lcs.c
        v = np.abs(lam * slack)
        v[modes != PairMode.FREE.value] = 0.0
        return v, lam, slack

    def _clamp(self, z, modes):
        """Pin the decided zeros exactly so the output satisfies
        complementarity to machine precision."""
        z = z.copy()
        nl = self.n_lam
        n_x = self.lcs.n_x
        lam = z[n_x:n_x + nl]
        lam[lam < 0.0] = 0.0
        _, lam_now, slack = self._violations(z, np.full(nl, PairMode.FREE.value))
        for i in range(nl):
            if modes[i] == PairMode.FORCE_ZERO.value or \
                    (modes[i] == PairMode.FREE.value and lam_now[i] <= slack[i]):
                z[n_x + i] = 0.0
        return z

    def project(self, omega: np.ndarray, budget: ProjectionBudget | None = None,
                warm: _Warm | None = None,
                hint_modes: np.ndarray | None = None) -> ProjectionResult:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (self.n,):
            raise ValueError("omega dimension mismatch")
        budget = budget or ProjectionBudget()
        t0 = time.perf_counter()
        nl = self.n_lam
        root_modes = np.full(nl, PairMode.FREE.value, dtype=np.int8)
        nodes = 0
        incumbent = None   # (objective, z, modes)
        history: list[float] = []
        exact = True

        def consider(obj, z, modes):
            nonlocal incumbent
            if incumbent is None or obj < incumbent[0] - 1e-12:
                incumbent = (obj, z.copy(), modes.copy())
                history.append(obj)

        # root + greedy rounding dive for a quick incumbent
        res, obj, sets = self._solve_node(omega, root_modes, warm)
        nodes += 1
        heap: list = []
        counter = 0
        if res.status is not QpStatus.INFEASIBLE:
            viols, lam, slack = self._violations(res.z, root_modes)
            if np.max(viols, initial=0.0) <= self.COMP_TOL:
                consider(obj, self._clamp(res.z, root_modes), root_modes)
            else:
                root_warm = _Warm(res.z.copy(), res.y.copy(), sets)
                heapq.heappush(heap, (obj, counter, root_modes, root_warm))
                counter += 1
                # incumbent candidates: the previously optimal mode pattern,
                # then greedy rounding of the relaxation
                rounded = np.where(lam <= slack, PairMode.FORCE_ZERO.value,
                                   PairMode.SLACK_ZERO.value).astype(np.int8)
                dives = [rounded]
                if hint_modes is not None and hint_modes.shape == (nl,) \
                        and np.any(hint_modes != rounded):
                    dives.insert(0, np.where(hint_modes == PairMode.FREE.value,
                                             rounded, hint_modes).astype(np.int8))
                for dive in dives:
                    rres, robj, _ = self._solve_node(omega, dive, root_warm)
                    nodes += 1
                    if rres.status is not QpStatus.INFEASIBLE:
                        consider(robj, self._clamp(rres.z, dive), dive)

        while heap:
            if nodes >= budget.max_nodes or \
                    (budget.max_time is not None and time.perf_counter() - t0 > budget.max_time):
                exact = False
                break
            lb, _, modes, node_warm = heapq.heappop(heap)
            if incumbent is not None and \
                    lb >= incumbent[0] - max(1e-9, budget.rel_gap * incumbent[0]):
                continue
            # branch on the worst violating free pair at this node's relaxation
            zrel = node_warm.z
            viols, _, _ = self._violations(zrel, modes)
            free = np.flatnonzero(modes == PairMode.FREE.value)
            if len(free) == 0:
                continue
            pick = int(free[np.argmax(viols[free])])
            for mode_val in (PairMode.FORCE_ZERO.value, PairMode.SLACK_ZERO.value):
                child = modes.copy()
                child[pick] = mode_val
                cres, cobj, csets = self._solve_node(omega, child, node_warm)
                nodes += 1
                if cres.status is QpStatus.INFEASIBLE:
                    continue
                if incumbent is not None and cobj >= \
                        incumbent[0] - max(1e-9, budget.rel_gap * incumbent[0]):
                    continue
                cviols, _, _ = self._violations(cres.z, child)
                if np.max(cviols, initial=0.0) <= self.COMP_TOL:
                    consider(cobj, self._clamp(cres.z, child), child)
                else:
                    heapq.heappush(heap, (cobj, counter, child,
                                          _Warm(cres.z.copy(), cres.y.copy(), csets)))
                    counter += 1

        if incumbent is None:
            raise InfeasibleKnot("no mode assignment admits a feasible point within bounds")
        obj, z, modes = incumbent
        certified = exact and (not heap or all(lb >= obj - 1e-9 for lb, *_ in heap))
        return ProjectionResult(z, obj, certified, nodes, modes, history)


def miqp_project(omega: np.ndarray, u_weights: np.ndarray, lcs: LcsModel,
                 lo: np.ndarray | None = None, hi: np.ndarray | None = None,
                 budget: ProjectionBudget | None = None) -> ProjectionResult:
    """One-shot projection of a stacked (x, lam, u) knot onto the
    complementarity constraints of `lcs` in the diagonal metric `u_weights`."""
    return _KnotProjector(lcs, u_weights, lo, hi).project(omega, budget)
