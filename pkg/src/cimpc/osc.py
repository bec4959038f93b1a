"""Operational-space inverse dynamics with an explicit force objective.

Each control tick solves for joint accelerations and an applied tool force
that minimize weighted task-space acceleration errors plus the deviation of
the applied force from its reference, subject to the manipulator equation

    M(q) qdd + c(q, qd) = u - J_tool' lam,

where lam is the force the tool exerts on the environment. Torques stay
unconstrained on the fast path (the dynamics determine u uniquely from
(qdd, lam)); a box-constrained QP fallback engages only when the fast-path
torques leave their limits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .arm import ManipulatorModel
from .qp import QpStatus, QuadProgram, qp_solve


def _const(v: np.ndarray) -> Callable[[float], np.ndarray]:
    v = np.asarray(v, dtype=float)
    return lambda t: v


@dataclass
class TaskSpaceObjective:
    """One weighted task-space tracking term.

    psi / jac / jac_dot map the joint state to the task coordinate and its
    Jacobians; references are callables of time. Weight may be a scalar or a
    full PSD matrix on the task coordinate.
    """

    name: str
    psi: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    jac_dot: Callable[[np.ndarray, np.ndarray], np.ndarray]
    weight: np.ndarray | float
    kp: float
    kd: float
    y_des: Callable[[float], np.ndarray]
    yd_des: Callable[[float], np.ndarray] | None = None
    ydd_des: Callable[[float], np.ndarray] | None = None

    def validate(self) -> list[str]:
        bad = []
        if self.kp < 0 or self.kd < 0:
            bad.append(f"{self.name}: gains must be nonnegative")
        w = np.asarray(self.weight, dtype=float)
        if w.ndim == 2:
            if np.max(np.abs(w - w.T)) > 1e-12 or np.any(np.linalg.eigvalsh(w) < -1e-12):
                bad.append(f"{self.name}: weight must be PSD")
        elif w < 0:
            bad.append(f"{self.name}: weight must be nonnegative")
        return bad


def task_space_acc_cmd(obj: TaskSpaceObjective, t: float, y: np.ndarray,
                       yd: np.ndarray) -> np.ndarray:
    """PD-stabilized reference acceleration in the objective's task space."""
    y_des = np.asarray(obj.y_des(t), dtype=float)
    yd_des = np.asarray(obj.yd_des(t), dtype=float) if obj.yd_des is not None \
        else np.zeros_like(y_des)
    ydd_des = np.asarray(obj.ydd_des(t), dtype=float) if obj.ydd_des is not None \
        else np.zeros_like(y_des)
    return ydd_des + obj.kp * (y_des - y) + obj.kd * (yd_des - yd)


@dataclass
class OscProblem:
    """Objectives plus the force target for one control configuration.

    force_target(t) is the desired tool-applied force; force_weight pulls
    the applied force toward it (it is a soft objective, not a constraint).
    A zero force weight removes the force variable entirely.
    """

    objectives: list[TaskSpaceObjective]
    force_target: Callable[[float], np.ndarray] | None = None
    force_weight: np.ndarray | float = 10.0
    torque_lo: np.ndarray | None = None
    torque_hi: np.ndarray | None = None
    acc_reg: float = 1e-6  # proximal term on qdd for redundant directions

    def validate(self) -> list[str]:
        bad = []
        if not self.objectives:
            bad.append("at least one task-space objective is required")
        for obj in self.objectives:
            bad.extend(obj.validate())
        w = np.asarray(self.force_weight, dtype=float)
        if w.ndim == 2:
            if np.any(np.linalg.eigvalsh(0.5 * (w + w.T)) < -1e-12):
                bad.append("force_weight must be PSD")
        elif w < 0:
            bad.append("force_weight must be nonnegative")
        return bad


@dataclass
class OscResult:
    u: np.ndarray        # joint torques
    lam: np.ndarray      # force applied by the tool on the environment
    qdd: np.ndarray
    status: QpStatus
    binding_joints: list[int] = field(default_factory=list)


def _weight_matrix(w, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w if w.ndim == 2 else w * np.eye(dim)


def osc_solve(model: ManipulatorModel, x_arm: np.ndarray, problem: OscProblem,
              t: float) -> OscResult:
    """One inverse-dynamics tick at joint state x_arm = [q, qd]."""
    n = model.n_joints
    x_arm = np.asarray(x_arm, dtype=float)
    q, qd = x_arm[:n], x_arm[n:]
    M = model.mass_matrix(q)
    h = model.bias(q, qd)
    J_ee = model.tool_jacobian(q)

    w_f = _weight_matrix(problem.force_weight, 3)
    with_force = problem.force_target is not None and np.any(w_f != 0.0)
    nv = n + (3 if with_force else 0)

    H = np.zeros((nv, nv))
    H[:n, :n] += problem.acc_reg * np.eye(n)
    r = np.zeros(nv)
    for obj in problem.objectives:
        y = np.asarray(obj.psi(q), dtype=float)
        J = np.asarray(obj.jac(q), dtype=float)
        Jd = np.asarray(obj.jac_dot(q, qd), dtype=float)
        b = task_space_acc_cmd(obj, t, y, J @ qd) - Jd @ qd
        W = _weight_matrix(obj.weight, len(y))
        WJ = W @ J
        H[:n, :n] += J.T @ WJ
        r[:n] += WJ.T @ b if W.ndim == 2 else J.T @ (W @ b)
    if with_force:
        H[n:, n:] += w_f
        r[n:] += w_f @ np.asarray(problem.force_target(t), dtype=float)

    w = np.linalg.solve(H, r)
    qdd = w[:n]
    lam = w[n:] if with_force else np.zeros(3)
    u = M @ qdd + h + J_ee.T @ lam

    lo = problem.torque_lo if problem.torque_lo is not None else -model.torque_limit
    hi = problem.torque_hi if problem.torque_hi is not None else model.torque_limit
    if np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12):
        return OscResult(u, lam, qdd, QpStatus.OPTIMAL)

    # torque limits bind: re-solve with u = M qdd + h + J' lam box-constrained
    if with_force:
        dyn = np.hstack([M, J_ee.T])
    else:
        dyn = M
    prog = QuadProgram(hessian=2.0 * H, linear_cost=-2.0 * r,
                       a_in=np.vstack([dyn, -dyn]),
                       b_in=np.concatenate([lo - h, -(hi - h)]))
    res = qp_solve(prog)
    if res.status is QpStatus.INFEASIBLE:
        binding = [int(j) for j in np.flatnonzero(
            (np.abs(u - lo) < 1e-9) | (np.abs(u - hi) < 1e-9))]
        return OscResult(np.clip(u, lo, hi), lam, qdd, QpStatus.INFEASIBLE, binding)
    qdd = res.z[:n]
    lam = res.z[n:] if with_force else np.zeros(3)
    u = np.clip(M @ qdd + h + J_ee.T @ lam, lo, hi)
    binding = [int(j) for j in np.flatnonzero(
        (np.abs(u - lo) < 1e-9) | (np.abs(u - hi) < 1e-9))]
    return OscResult(u, lam, qdd, res.status, binding)


def tool_position_objective(model: ManipulatorModel, y_des, yd_des=None,
                            ydd_des=None, kp: float = 400.0, kd: float = 40.0,
                            weight=1.0) -> TaskSpaceObjective:
    """Track a tool-position reference; references may be callables of time
    or constants."""
    def as_fn(v):
        return v if callable(v) else (_const(v) if v is not None else None)
    return TaskSpaceObjective(
        "tool_position", model.tool_position, model.tool_jacobian,
        model.tool_jacobian_dot, weight, kp, kd,
        as_fn(y_des), as_fn(yd_des), as_fn(ydd_des))


def tool_axis_objective(model: ManipulatorModel, kp: float = 100.0,
                        kd: float = 20.0, weight=0.5) -> TaskSpaceObjective:
    """Point the tool axis up; stands in for the fixed-orientation objective
    a full-DOF arm would use."""
    return TaskSpaceObjective(
        "tool_axis", model.tool_axis_world, model.tool_axis_jacobian,
        model.tool_axis_jacobian_dot, weight, kp, kd,
        _const(np.array([0.0, 0.0, 1.0])))


def posture_objective(model: ManipulatorModel, kp: float = 50.0,
                      kd: float = 10.0, weight=0.05) -> TaskSpaceObjective:
    """Hold the designated joint at its fixed reference angle."""
    j = model.posture_joint
    sel = np.zeros((1, model.n_joints))
    sel[0, j] = 1.0
    return TaskSpaceObjective(
        "posture", lambda q: q[j:j + 1], lambda q: sel,
        lambda q, qd: np.zeros((1, model.n_joints)), weight, kp, kd,
        _const(np.array([model.posture_ref])))
