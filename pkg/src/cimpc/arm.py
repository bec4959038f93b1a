"""Serial revolute-arm numerics for the tracking controller.

A :class:`ManipulatorModel` is a revolute chain described by joint axes and
offsets in the parent link frame plus per-link mass properties. Mass matrix,
bias, and frame Jacobians come from compiled geometric-Jacobian kernels;
Coriolis terms use Christoffel symbols of the mass matrix. The builtin
three-link yaw-pitch-pitch arm stands in for a full manipulator, and a planar
two-link variant exists for closed-form cross-checks.
"""

from __future__ import annotations

import numpy as np

from ._kernels import (chain_axis_jac_nb, chain_bias_nb, chain_gravity_nb,
                       chain_kin_nb, chain_mass_nb, chain_point_jac_nb)

GRAVITY = 9.81


class ManipulatorModel:
    """Revolute serial chain with a distinguished tool point and tool axis.

    axes[i], offsets[i]: joint i axis and origin in the parent link frame.
    coms[i], inertias[i]: link i mass properties in the link frame.
    reflected[i]: rotor inertia added to the mass-matrix diagonal.
    tool_offset / tool_axis: tool point and pointing axis in the last link
    frame. posture_joint / posture_ref: the joint held at a fixed angle by
    the posture objective.
    """

    def __init__(self, axes, offsets, masses, coms, inertias, reflected,
                 tool_offset, tool_axis, torque_limit,
                 posture_joint: int = 1, posture_ref: float = 0.0):
        self.axes = np.ascontiguousarray(axes, dtype=float)
        self.offsets = np.ascontiguousarray(offsets, dtype=float)
        self.masses = np.ascontiguousarray(masses, dtype=float)
        self.coms = np.ascontiguousarray(coms, dtype=float)
        self.inertias = np.ascontiguousarray(inertias, dtype=float)
        self.reflected = np.ascontiguousarray(reflected, dtype=float)
        self.tool_offset = np.ascontiguousarray(tool_offset, dtype=float)
        self.tool_axis = np.ascontiguousarray(tool_axis, dtype=float)
        self.n_joints = self.axes.shape[0]
        self.torque_limit = np.broadcast_to(
            np.asarray(torque_limit, dtype=float), (self.n_joints,)).copy()
        self.posture_joint = posture_joint
        self.posture_ref = posture_ref
        norms = np.linalg.norm(self.axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("joint axes must be unit vectors")
        if np.any(self.masses < 0) or np.any(self.reflected < 0):
            raise ValueError("masses and reflected inertias must be nonnegative")

    # dynamics ------------------------------------------------------------

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        return chain_mass_nb(self.axes, self.offsets, self.masses, self.coms,
                             self.inertias, self.reflected,
                             np.asarray(q, dtype=float))

    def bias(self, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
        """Coriolis plus gravity: C(q, qd) qd + g(q)."""
        return chain_bias_nb(self.axes, self.offsets, self.masses, self.coms,
                             self.inertias, self.reflected,
                             np.asarray(q, dtype=float),
                             np.asarray(qd, dtype=float), GRAVITY)

    def gravity(self, q: np.ndarray) -> np.ndarray:
        return chain_gravity_nb(self.axes, self.offsets, self.masses,
                                self.coms, np.asarray(q, dtype=float), GRAVITY)

    def potential_energy(self, q: np.ndarray) -> float:
        pj, _, Rw = chain_kin_nb(self.axes, self.offsets, np.asarray(q, dtype=float))
        v = 0.0
        for i in range(self.n_joints):
            cw = pj[i] + Rw[i] @ self.coms[i]
            v += self.masses[i] * GRAVITY * cw[2]
        return v

    # tool kinematics -----------------------------------------------------

    def tool_position(self, q: np.ndarray) -> np.ndarray:
        p, _ = chain_point_jac_nb(self.axes, self.offsets,
                                  np.asarray(q, dtype=float),
                                  self.n_joints - 1, self.tool_offset)
        return p

    def tool_jacobian(self, q: np.ndarray) -> np.ndarray:
        _, J = chain_point_jac_nb(self.axes, self.offsets,
                                  np.asarray(q, dtype=float),
                                  self.n_joints - 1, self.tool_offset)
        return J

    def tool_jacobian_dot(self, q: np.ndarray, qd: np.ndarray,
                          h: float = 1e-6) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        return (self.tool_jacobian(q + h * qd) - self.tool_jacobian(q - h * qd)) / (2 * h)

    def tool_axis_world(self, q: np.ndarray) -> np.ndarray:
        ax, _ = chain_axis_jac_nb(self.axes, self.offsets,
                                  np.asarray(q, dtype=float),
                                  self.n_joints - 1, self.tool_axis)
        return ax

    def tool_axis_jacobian(self, q: np.ndarray) -> np.ndarray:
        _, J = chain_axis_jac_nb(self.axes, self.offsets,
                                 np.asarray(q, dtype=float),
                                 self.n_joints - 1, self.tool_axis)
        return J

    def tool_axis_jacobian_dot(self, q: np.ndarray, qd: np.ndarray,
                               h: float = 1e-6) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        return (self.tool_axis_jacobian(q + h * qd)
                - self.tool_axis_jacobian(q - h * qd)) / (2 * h)

    def tool_velocity(self, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
        return self.tool_jacobian(q) @ np.asarray(qd, dtype=float)

    # simulation helpers --------------------------------------------------

    def forward_dynamics(self, q: np.ndarray, qd: np.ndarray, tau: np.ndarray,
                         f_tool: np.ndarray | None = None) -> np.ndarray:
        """Joint accelerations under torques tau; f_tool is the force the
        tool applies to the environment (reaction enters with minus sign)."""
        rhs = np.asarray(tau, dtype=float) - self.bias(q, qd)
        if f_tool is not None:
            rhs = rhs - self.tool_jacobian(q).T @ np.asarray(f_tool, dtype=float)
        return np.linalg.solve(self.mass_matrix(q), rhs)

    def solve_tool_ik(self, target: np.ndarray, q0: np.ndarray,
                      iters: int = 200, tol: float = 1e-10) -> np.ndarray:
        """Damped least-squares inverse kinematics for the tool position."""
        q = np.asarray(q0, dtype=float).copy()
        target = np.asarray(target, dtype=float)
        for _ in range(iters):
            err = target - self.tool_position(q)
            if np.dot(err, err) < tol * tol:
                break
            J = self.tool_jacobian(q)
            JJt = J @ J.T + 1e-8 * np.eye(3)
            q += J.T @ np.linalg.solve(JJt, err)
        return q


def _rod_inertia(mass: float, length: float, axis: int) -> np.ndarray:
    """Inertia of a slender rod along the given axis, about its center."""
    val = mass * length * length / 12.0
    inertia = np.full(3, val)
    inertia[axis] = 0.0
    return np.diag(inertia)


def builtin_test_arm() -> ManipulatorModel:
    """Three-link yaw-pitch-pitch arm reaching the on-palm workspace.

    Base yaw about z, then two pitch joints about the rotated y axis.
    At q = 0 both distal links point along +x, the tool axis points up.
    Link masses and rotor inertias are sized so a vertical tool load held by
    position feedback alone sags by close to f / K_p at the working pose.
    """
    axes = np.array([[0.0, 0.0, 1.0],
                     [0.0, 1.0, 0.0],
                     [0.0, 1.0, 0.0]])
    offsets = np.array([[0.0, 0.0, 0.0],      # yaw joint at the base
                        [0.0, 0.0, 0.35],     # shoulder atop the column
                        [0.35, 0.0, 0.0]])    # elbow at the end of link 2
    masses = np.array([1.869, 1.494, 0.841])
    coms = np.array([[0.0, 0.0, 0.175],
                     [0.175, 0.0, 0.0],
                     [0.15, 0.0, 0.0]])
    inertias = np.stack([_rod_inertia(masses[0], 0.35, 2),
                         _rod_inertia(masses[1], 0.35, 0),
                         _rod_inertia(masses[2], 0.30, 0)])
    reflected = np.array([0.140, 0.113, 0.075])
    return ManipulatorModel(axes, offsets, masses, coms, inertias, reflected,
                            tool_offset=np.array([0.30, 0.0, 0.0]),
                            tool_axis=np.array([0.0, 0.0, 1.0]),
                            torque_limit=80.0,
                            posture_joint=1, posture_ref=0.35)


def planar_two_link(l1: float = 0.4, l2: float = 0.3, m1: float = 1.2,
                    m2: float = 0.8) -> ManipulatorModel:
    """Two pitch joints in the x-z plane, rod links; admits the textbook
    closed-form mass matrix for cross-checks."""
    axes = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    offsets = np.array([[0.0, 0.0, 0.0], [l1, 0.0, 0.0]])
    masses = np.array([m1, m2])
    coms = np.array([[l1 / 2, 0.0, 0.0], [l2 / 2, 0.0, 0.0]])
    inertias = np.stack([_rod_inertia(m1, l1, 0), _rod_inertia(m2, l2, 0)])
    return ManipulatorModel(axes, offsets, masses, coms, inertias,
                            np.zeros(2), tool_offset=np.array([l2, 0.0, 0.0]),
                            tool_axis=np.array([0.0, 0.0, 1.0]),
                            torque_limit=50.0, posture_joint=1,
                            posture_ref=0.0)
