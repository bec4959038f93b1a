"""Contact-implicit MPC by consensus ADMM.

Each solve alternates between a full-horizon quadratic program with the
complementarity coupling dropped and independent per-knot projections of the
(state, force, input) iterate back onto the complementarity set. The returned
plan is the iterate after a final QP step, so it satisfies the linearized
dynamics and box bounds exactly while the orthogonality condition is only
approached, never enforced. Warm starts are cached per subprogram and the
measured state is advanced through the previous plan by the filtered solve
latency before each replan.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from ._kernels import active_set_diag_nb
from .lcs import LcsModel, LcsState
from .miqp import InfeasibleKnot, ProjectionBudget, _KnotProjector
from .qp import QpKernel, QpResult, QpStatus, _Warm
from .scenario import EE_POS, EE_VEL, N_X


@dataclass
class C3Params:
    """Horizon length, weights, and consensus schedule for one scenario.

    q_q and q_v are the position and velocity blocks of the diagonal state
    weight; g/u triples weight the (state, force, input) blocks of the
    consensus penalty and the projection metric.
    """

    n_knots: int = 5
    dt: float = 0.075
    q_q: np.ndarray = field(default_factory=lambda: 50.0 * np.array(
        [150, 150, 150, 0, 1, 1, 0, 15000, 15000, 15000], dtype=float))
    q_v: np.ndarray = field(default_factory=lambda: 50.0 * np.array(
        [5, 5, 15, 10, 10, 1, 5, 5, 5], dtype=float))
    q_f: np.ndarray | None = None        # terminal weight, defaults to [q_q, q_v]
    r: np.ndarray = field(default_factory=lambda: 50.0 * np.array([0.15, 0.15, 0.1]))
    w_gx: float = 0.1
    w_glam: float = 10.0
    w_gu: float = 0.1
    w_ux: float = 0.1
    w_ulam: float = 10.0
    w_uu: float = 3.0
    rho: float = 4.0
    admm_iters: int = 2
    ee_lo: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.1, 0.35]))
    ee_hi: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.1, 0.7]))
    u_lo: np.ndarray = field(default_factory=lambda: np.array([-10.0, -10.0, 0.0]))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0, 30.0]))
    # node-capped only: a wall-clock cap would make replanning depend on
    # machine load and break bit-exact episode reproduction
    projection_budget: ProjectionBudget = field(
        default_factory=lambda: ProjectionBudget(max_time=None, rel_gap=1e-2))
    qp_tol: float = 1e-5   # the KKT polish tightens accepted solves well past this

    def validate(self) -> list[str]:
        bad = []
        if self.n_knots < 2:
            bad.append("n_knots must be >= 2")
        if not self.dt > 0:
            bad.append("dt must be positive")
        for name in ("q_q", "q_v", "r"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                bad.append(f"{name} must be nonnegative")
        for name in ("w_gx", "w_glam", "w_gu", "w_ux", "w_ulam", "w_uu"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be nonnegative")
        if self.admm_iters < 1:
            bad.append("admm_iters must be >= 1")
        if np.any(self.ee_lo > self.ee_hi) or np.any(self.u_lo > self.u_hi):
            bad.append("bounds must be ordered lo <= hi")
        return bad

    def state_weight(self) -> np.ndarray:
        return np.concatenate([self.q_q, self.q_v])

    def terminal_weight(self) -> np.ndarray:
        return self.state_weight() if self.q_f is None else np.asarray(self.q_f, dtype=float)

    def g_diag(self, n_x: int, n_lam: int, n_u: int) -> np.ndarray:
        return np.concatenate([np.full(n_x, self.w_gx), np.full(n_lam, self.w_glam),
                               np.full(n_u, self.w_gu)])

    def u_diag(self, n_x: int, n_lam: int, n_u: int) -> np.ndarray:
        return np.concatenate([np.full(n_x, self.w_ux), np.full(n_lam, self.w_ulam),
                               np.full(n_u, self.w_uu)])


@dataclass
class C3Solution:
    """Plan returned by one solve. All trajectories are knot arrays; the
    iterate comes from the final QP step, so complementarity_residuals are
    informational only."""

    xs: np.ndarray               # (N+1, n_x)
    us: np.ndarray               # (N, n_u)
    lams: np.ndarray             # (N, n_lam)
    complementarity_residuals: np.ndarray  # (N,)
    solve_time: float
    dt: float
    from_qp_step: bool = True
    projection_fallbacks: int = 0
    mode_pattern: np.ndarray | None = None  # (N, n_lam) int-coded pair modes
    # per-knot end-effector acceleration imparted by the planned contact
    # forces; the negated value times the ee mass is the force the plan
    # expects the ee to press through contact
    ee_contact_accel: np.ndarray | None = None  # (N, 3)

    @property
    def horizon(self) -> float:
        return self.us.shape[0] * self.dt


class WarmStartCache:
    """Per-subprogram warm starts: one slot for the horizon QP, one per knot
    projection, plus the previous consensus copies (shifted one knot on
    advance). Entries with stale dimensions are dropped on access."""

    def __init__(self):
        self.qp: dict[int, _Warm] = {}
        self.projections: dict[int, _Warm] = {}
        self.modes: dict[int, np.ndarray] = {}  # last optimal pair modes per knot
        self.copies: np.ndarray | None = None   # (N, n_x + n_lam + n_u)

    def qp_warm(self, key: int, n: int, m: int) -> _Warm | None:
        w = self.qp.get(key)
        if w is not None and w.z.shape == (n,) and w.y.shape == (m,):
            return w
        return None

    def projection_warm(self, k: int, n: int, m: int) -> _Warm | None:
        w = self.projections.get(k)
        if w is not None and w.z.shape == (n,) and w.y.shape == (m,):
            return w
        return None

    def copies_warm(self, shape: tuple[int, int]) -> np.ndarray | None:
        if self.copies is not None and self.copies.shape == shape:
            return self.copies.copy()
        return None

    def advance(self):
        """Shift the stored copies by one knot (receding horizon); the vacated
        last knot repeats the previous final knot."""
        if self.copies is not None and len(self.copies) > 1:
            self.copies = np.vstack([self.copies[1:], self.copies[-1:]])
        if self.modes:
            n = max(self.modes) + 1
            self.modes = {k: self.modes.get(min(k + 1, n - 1)) for k in self.modes
                          if self.modes.get(min(k + 1, n - 1)) is not None}

    def clear(self):
        self.qp.clear()
        self.projections.clear()
        self.modes.clear()
        self.copies = None


@dataclass
class LatencyEstimator:
    """Exponential moving average of solve wall time, used to roll the
    measured end-effector state forward before each replan."""

    dt_bar: float = 0.025
    coeff: float = 0.9

    def update(self, solve_time: float) -> float:
        if solve_time < 0 or not np.isfinite(solve_time):
            raise ValueError("solve_time must be finite and nonnegative")
        self.dt_bar = self.coeff * self.dt_bar + (1.0 - self.coeff) * solve_time
        return self.dt_bar


class _HorizonProgram:
    """Stacked QP over z = [x_0..x_N, lam_0..lam_{N-1}, u_0..u_{N-1}].

    Rows: initial-state equality, dynamics equalities, slack >= 0, lam >= 0,
    end-effector workspace box on knots 1..N, input box. Only the
    consensus-dependent part of the Hessian diagonal and the linear cost
    change between ADMM rounds, so one kernel serves the whole solve.
    """

    def __init__(self, lcs: LcsModel, params: C3Params):
        N = params.n_knots
        n_x, n_u, n_lam = lcs.n_x, lcs.n_u, lcs.n_lam
        self.N, self.n_x, self.n_u, self.n_lam = N, n_x, n_u, n_lam
        self.nc = n_x + n_lam + n_u
        self.nz = (N + 1) * n_x + N * (n_lam + n_u)
        self.x_off = lambda k: k * n_x
        self.lam_off = lambda k: (N + 1) * n_x + k * n_lam
        self.u_off = lambda k: (N + 1) * n_x + N * n_lam + k * n_u

        rows, lows, upps, eq_flags = [], [], [], []

        def add(block_cols, low, upp, is_eq):
            r = np.zeros((len(low), self.nz))
            for off, mat in block_cols:
                r[:, off:off + mat.shape[1]] = mat
            rows.append(r)
            lows.append(np.asarray(low, dtype=float))
            upps.append(np.asarray(upp, dtype=float))
            eq_flags.append(np.full(len(low), is_eq))

        add([(self.x_off(0), np.eye(n_x))], np.zeros(n_x), np.zeros(n_x), True)
        self._x0_rows = slice(0, n_x)
        for k in range(N):
            add([(self.x_off(k), -lcs.a), (self.x_off(k + 1), np.eye(n_x)),
                 (self.lam_off(k), -lcs.d_map), (self.u_off(k), -lcs.b)],
                lcs.d_aff, lcs.d_aff, True)
        if n_lam:
            for k in range(N):
                add([(self.x_off(k), lcs.e), (self.lam_off(k), lcs.f),
                     (self.u_off(k), lcs.h)],
                    -lcs.c, np.full(n_lam, np.inf), False)
                add([(self.lam_off(k), np.eye(n_lam))],
                    np.zeros(n_lam), np.full(n_lam, np.inf), False)
        ee_rows = np.eye(n_x)[:3]
        for k in range(1, N + 1):
            add([(self.x_off(k), ee_rows)], params.ee_lo, params.ee_hi, False)
        for k in range(N):
            add([(self.u_off(k), np.eye(n_u))], params.u_lo, params.u_hi, False)

        self.A = np.vstack(rows)
        self.l = np.concatenate(lows)
        self.u = np.concatenate(upps)
        self._eq = np.concatenate(eq_flags)

        q = params.state_weight()
        qf = params.terminal_weight()
        base = np.zeros(self.nz)
        for k in range(N):
            base[self.x_off(k):self.x_off(k) + n_x] = 2.0 * q
            base[self.u_off(k):self.u_off(k) + n_u] = 2.0 * params.r
        base[self.x_off(N):self.x_off(N) + n_x] = 2.0 * qf
        self._base_diag = base
        self._diag = base.copy()
        self._q_full = q
        self._q_term = qf
        self._r = np.asarray(params.r, dtype=float)
        self.params = params
        self._kernel = None       # splitting fallback, built only if needed
        self._kernel_diag = None  # diagonal installed in the fallback kernel
        self._g_scale_applied = None

    def copy_slices(self, k: int):
        """(x, lam, u) column ranges of knot k's consensus copy."""
        return (slice(self.x_off(k), self.x_off(k) + self.n_x),
                slice(self.lam_off(k), self.lam_off(k) + self.n_lam),
                slice(self.u_off(k), self.u_off(k) + self.n_u))

    def gather(self, z: np.ndarray, k: int) -> np.ndarray:
        sx, sl, su = self.copy_slices(k)
        return np.concatenate([z[sx], z[sl], z[su]])

    def set_consensus(self, g_diag: np.ndarray | None):
        """Install (or clear) the consensus-penalty diagonal for this round."""
        diag = self._base_diag.copy()
        if g_diag is not None:
            for k in range(self.N):
                sx, sl, su = self.copy_slices(k)
                diag[sx] += 2.0 * g_diag[:self.n_x]
                diag[sl] += 2.0 * g_diag[self.n_x:self.n_x + self.n_lam]
                diag[su] += 2.0 * g_diag[self.n_x + self.n_lam:]
        self._diag = diag

    def linear_cost(self, target: np.ndarray, g_diag: np.ndarray | None,
                    anchors: np.ndarray | None) -> np.ndarray:
        f = np.zeros(self.nz)
        for k in range(self.N):
            f[self.x_off(k):self.x_off(k) + self.n_x] = -2.0 * self._q_full * target
        f[self.x_off(self.N):self.x_off(self.N) + self.n_x] = -2.0 * self._q_term * target
        if g_diag is not None and anchors is not None:
            for k in range(self.N):
                sx, sl, su = self.copy_slices(k)
                a = g_diag * anchors[k]
                f[sx] -= 2.0 * a[:self.n_x]
                f[sl] -= 2.0 * a[self.n_x:self.n_x + self.n_lam]
                f[su] -= 2.0 * a[self.n_x + self.n_lam:]
        return f

    def solve(self, x0: np.ndarray, f: np.ndarray, warm: _Warm | None, tol: float,
              polish: bool = True):
        l = self.l.copy()
        u = self.u.copy()
        l[self._x0_rows] = x0
        u[self._x0_rows] = x0
        # zero-weight columns (all of them equality-determined states) get a
        # vanishing proximal floor so the pivoting kernel can invert P
        p_diag = np.maximum(self._diag, 1e-8 * max(1.0, self._diag.max()))
        if warm is not None and warm.sets is not None \
                and warm.sets.shape == (len(l),):
            sets = warm.sets.astype(np.int8)
            sets[(sets == 1) & ~np.isfinite(l)] = 0
            sets[(sets == 2) & ~np.isfinite(u)] = 0
        else:
            sets = np.zeros(len(l), dtype=np.int8)
        sets[self._eq] = 1
        ok, z, y, sets, pivots = active_set_diag_nb(
            p_diag, self.A, f, l, u, sets, self._eq, 500, 1e-12)
        if ok:
            obj = 0.5 * float(p_diag @ (z * z)) + float(f @ z)
            return QpResult(z, y, QpStatus.OPTIMAL, pivots, 0.0, 0.0, obj, sets)
        if self._kernel is None:
            self._kernel = QpKernel(np.diag(self._diag), self.A, rho=0.1)
            self._kernel_diag = self._diag
        elif self._kernel_diag is not self._diag:
            self._kernel.update_hessian(np.diag(self._diag))
            self._kernel_diag = self._diag
        return self._kernel.solve(f, l, u, warm=warm, tol=tol, max_iter=4000,
                                  adaptive_rho=True, polish=polish)


def admm_qp_step(lcs: LcsModel, x0: np.ndarray, target: np.ndarray,
                 params: C3Params, copies: np.ndarray | None,
                 duals: np.ndarray | None,
                 cache: WarmStartCache | None = None,
                 program: _HorizonProgram | None = None,
                 g_scale: float = 1.0, polish: bool = True, warm_key: int = 0):
    """One horizon QP: tracking cost plus the consensus penalty anchored at
    copies - duals, complementarity dropped. Returns (program, QpResult)."""
    prog = program or _HorizonProgram(lcs, params)
    g = None
    anchors = None
    if copies is not None:
        g = g_scale * prog.params.g_diag(prog.n_x, prog.n_lam, prog.n_u)
        anchors = copies - duals if duals is not None else copies
    if prog._g_scale_applied != (g_scale if copies is not None else None):
        prog.set_consensus(g)
        prog._g_scale_applied = g_scale if copies is not None else None
    f = prog.linear_cost(np.asarray(target, dtype=float), g, anchors)
    warm = cache.qp_warm(warm_key, prog.nz, len(prog.l)) if cache is not None else None
    res = prog.solve(np.asarray(x0, dtype=float), f, warm, params.qp_tol, polish)
    if cache is not None and res.status is not QpStatus.INFEASIBLE:
        cache.qp[warm_key] = _Warm(res.z.copy(), res.y.copy(), res.sets)
    return prog, res


def dual_and_scale_update(copies: np.ndarray, iterate: np.ndarray,
                          duals: np.ndarray, params: C3Params,
                          g_scale: float) -> tuple[np.ndarray, float]:
    """Scaled-dual ascent plus geometric tightening of the consensus weight:
    duals += iterate - copies, g_scale *= rho."""
    if copies.shape != iterate.shape or duals.shape != copies.shape:
        raise ValueError("copies/iterate/duals shape mismatch")
    return duals + (iterate - copies), g_scale * params.rho


def c3_solve(lcs: LcsModel, x0: LcsState | np.ndarray, target: LcsState | np.ndarray,
             params: C3Params, cache: WarmStartCache | None = None) -> C3Solution:
    """Plan over the horizon from x0 toward target.

    admm_iters rounds of {QP step, per-knot projection, dual update, weight
    tightening}, then a final QP step whose iterate is returned. Projection
    failures fall back to the unprojected knot and are counted.
    """
    bad = params.validate()
    if bad:
        raise ValueError("invalid C3Params: " + "; ".join(bad))
    bad = lcs.validate()
    if bad:
        raise ValueError("invalid LCS: " + "; ".join(bad))
    x0 = x0.x if isinstance(x0, LcsState) else np.asarray(x0, dtype=float)
    target = target.x if isinstance(target, LcsState) else np.asarray(target, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 has non-finite entries")
    t_start = time.perf_counter()
    N = params.n_knots
    n_lam = lcs.n_lam
    nc = lcs.n_x + n_lam + lcs.n_u

    fallbacks = 0
    modes = np.zeros((N, n_lam), dtype=np.int8)
    if n_lam == 0:
        prog, res = admm_qp_step(lcs, x0, target, params, None, None, cache)
        if res.status is QpStatus.INFEASIBLE:
            raise RuntimeError(
                f"horizon QP infeasible (primal residual {res.primal_residual:.3e});"
                " check x0 against the workspace bounds")
    else:
        # copies anchor the first QP step; a zero anchor regularizes the
        # otherwise cost-free force variables on cold starts
        copies = cache.copies_warm((N, nc)) if cache is not None else None
        if copies is None:
            copies = np.zeros((N, nc))
        duals = np.zeros((N, nc))
        g_scale = 1.0
        projector = _KnotProjector(lcs, params.u_diag(lcs.n_x, n_lam, lcs.n_u))
        # the first knot's state is not a decision variable: its projection
        # pins x to the initial state so no contact force can pretend the
        # current gap is closed (later knots may move into contact freely)
        lo0 = np.full(nc, -np.inf)
        hi0 = np.full(nc, np.inf)
        lo0[:lcs.n_x] = x0
        hi0[:lcs.n_x] = x0
        projector0 = _KnotProjector(lcs, params.u_diag(lcs.n_x, n_lam, lcs.n_u),
                                    lo=lo0, hi=hi0)
        prog = None
        for admm_round in range(params.admm_iters + 1):
            final = admm_round == params.admm_iters
            prog, res = admm_qp_step(lcs, x0, target, params, copies, duals,
                                     cache, program=prog, g_scale=g_scale,
                                     polish=final, warm_key=admm_round)
            if res.status is QpStatus.INFEASIBLE:
                raise RuntimeError(
                    f"horizon QP infeasible (primal residual {res.primal_residual:.3e});"
                    " check x0 against the workspace bounds")
            if admm_round == params.admm_iters:
                break
            iterate = np.stack([prog.gather(res.z, k) for k in range(N)])
            for k in range(N):
                proj_k = projector0 if k == 0 else projector
                warm = cache.projection_warm(k, proj_k.n, proj_k.m) \
                    if cache is not None else None
                hint = cache.modes.get(k) if cache is not None else None
                try:
                    p = proj_k.project(iterate[k] + duals[k],
                                       budget=params.projection_budget,
                                       warm=warm, hint_modes=hint)
                    copies[k] = p.delta
                    modes[k] = p.modes
                    if cache is not None:
                        cache.projections[k] = _Warm(p.delta.copy(),
                                                     np.zeros(proj_k.m))
                        cache.modes[k] = p.modes.copy()
                except InfeasibleKnot:
                    copies[k] = iterate[k]
                    fallbacks += 1
            duals, g_scale = dual_and_scale_update(copies, iterate, duals, params, g_scale)
        if cache is not None:
            cache.copies = copies

    xs = np.stack([res.z[prog.x_off(k):prog.x_off(k) + lcs.n_x] for k in range(N + 1)])
    us = np.stack([res.z[prog.u_off(k):prog.u_off(k) + lcs.n_u] for k in range(N)])
    lams = np.stack([res.z[prog.lam_off(k):prog.lam_off(k) + n_lam] for k in range(N)]) \
        if n_lam else np.zeros((N, 0))
    resid = np.zeros(N)
    for k in range(N):
        slack = lcs.e @ xs[k] + lcs.f @ lams[k] + lcs.h @ us[k] + lcs.c if n_lam else np.zeros(0)
        resid[k] = float(np.max(np.abs(lams[k] * slack), initial=0.0))
    us = np.clip(us, params.u_lo, params.u_hi)
    con_acc = lams @ (lcs.d_map[EE_VEL] / lcs.dt).T if n_lam else np.zeros((N, 3))
    return C3Solution(xs, us, lams, resid, time.perf_counter() - t_start,
                      params.dt, True, fallbacks, modes, con_acc)


def predict_initial_state(plan: C3Solution, measured: np.ndarray,
                          est: LatencyEstimator) -> np.ndarray:
    """Roll the measured end-effector position forward by the filtered solve
    latency at the measured velocity; every other block stays measured. The
    plan is deliberately not substituted for the measurement here: the
    executed motion departs from the plan whenever a planned contact force
    has no real counterpart yet, and the next solve must see that."""
    measured = np.asarray(measured, dtype=float)
    if measured.shape != (N_X,) or plan.xs.shape[1] != N_X:
        raise ValueError("state layout mismatch")
    t = min(max(est.dt_bar, 0.0), plan.horizon)
    x0 = measured.copy()
    x0[EE_POS] = measured[EE_POS] + t * measured[EE_VEL]
    return x0


class TrackingTargets:
    """Time-parameterized references extracted from a plan: piecewise-cubic
    end-effector position (knot velocities from the plan) and zero-order-hold
    force. Queries are clamped to the plan horizon."""

    def __init__(self, sol: C3Solution):
        N = sol.us.shape[0]
        self.t_knots = sol.dt * np.arange(N + 1)
        self._spline = CubicHermiteSpline(self.t_knots, sol.xs[:, EE_POS],
                                          sol.xs[:, EE_VEL])
        self._dspline = self._spline.derivative()
        self._ddspline = self._dspline.derivative()
        self.us = sol.us
        self.con_acc = sol.ee_contact_accel if sol.ee_contact_accel is not None \
            else np.zeros((N, 3))
        self.dt = sol.dt
        self.horizon = sol.horizon

    def _clamp(self, t: float) -> float:
        return min(max(t, 0.0), self.horizon)

    def position(self, t: float) -> np.ndarray:
        return self._spline(self._clamp(t))

    def velocity(self, t: float) -> np.ndarray:
        return self._dspline(self._clamp(t))

    def acceleration(self, t: float) -> np.ndarray:
        return self._ddspline(self._clamp(t))

    def force(self, t: float) -> np.ndarray:
        k = min(int(self._clamp(t) / self.dt), len(self.us) - 1)
        return self.us[k]

    def contact_accel(self, t: float) -> np.ndarray:
        """End-effector acceleration the plan attributes to contact forces."""
        k = min(int(self._clamp(t) / self.dt), len(self.con_acc) - 1)
        return self.con_acc[k]


def plan_to_tracking_targets(sol: C3Solution) -> TrackingTargets:
    return TrackingTargets(sol)


def append_diagnostics(path, sol: C3Solution, extra: dict | None = None):
    """Append one JSON line of per-solve diagnostics."""
    rec = {
        "solve_time": sol.solve_time,
        "max_complementarity_residual": float(np.max(sol.complementarity_residuals,
                                                     initial=0.0)),
        "projection_fallbacks": sol.projection_fallbacks,
        "mode_pattern": sol.mode_pattern.tolist() if sol.mode_pattern is not None else None,
    }
    if extra:
        rec.update(extra)
    with open(path, "a") as fh:
        fh.write(json.dumps(rec) + "\n")
