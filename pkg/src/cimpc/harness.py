"""Closed-loop experiment engine.

Ground truth advances with the fine-step nonlinear complementarity stepper at
1 kHz while the planner replans continuously; each plan becomes active only
after its emulated solve delay, and the tray state the planner sees comes
from a 10 Hz zero-order-hold measurement channel. Between plans the active
plan is tracked either by applying forces to the end-effector body directly
(DIRECT_FORCE) or through the operational-space controller on the builtin
arm whose tool carries the end effector (OSC_ARM). Deterministic mode runs
single-threaded on virtual time, so a fixed seed and fixed emulated latency
reproduce an episode bit for bit.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .arm import ManipulatorModel, builtin_test_arm
from .c3 import (C3Params, C3Solution, LatencyEstimator, WarmStartCache,
                 c3_solve, plan_to_tracking_targets, predict_initial_state)
from .osc import (OscProblem, osc_solve, posture_objective,
                  tool_axis_objective, tool_position_objective)
from .scenario import (EE_POS, EE_VEL, N_X, OMEGA, QUAT, TRAY_POS, TRAY_VEL,
                       ScenarioConfig, ground_truth_step, linearize_dynamics,
                       normalize_quat, pack_state, quat_multiply)

FINE_DT = 1e-3
MEASUREMENT_PERIOD = 0.1      # 10 Hz tray pose channel


class ControlBridgeMode(enum.Enum):
    DIRECT_FORCE = "direct"   # plan forces applied to the ee body directly
    OSC_ARM = "osc"           # plan tracked by the arm controller


@dataclass
class LatencyModel:
    """Emulated solve latency. Fixed mode charges every solve the same
    virtual delay (deterministic); wallclock mode charges measured time."""

    fixed_delay: float | None = 0.025

    def charge(self, wall_time: float) -> float:
        return self.fixed_delay if self.fixed_delay is not None else wall_time


@dataclass
class TargetStep:
    tray_pos: np.ndarray
    ee_pos: np.ndarray
    idle: float = 0.0


@dataclass
class TaskSpec:
    targets: list[TargetStep]
    success_radius: float = 0.05
    time_limit: float = 15.0

    def validate(self) -> list[str]:
        bad = []
        if not self.targets:
            bad.append("at least one target required")
        if self.success_radius <= 0:
            bad.append("success radius must be positive")
        if self.time_limit <= 0:
            bad.append("time limit must be positive")
        return bad


def tray_task_spec(time_limit: float = 15.0) -> TaskSpec:
    """Retrieve, lift, place: three sequential targets in the world frame
    with the hold times of the hardware task."""
    return TaskSpec(targets=[
        TargetStep(np.array([0.45, 0.0, 0.485]), np.array([0.45, 0.0, 0.47]), 0.5),
        TargetStep(np.array([0.45, 0.0, 0.60]), np.array([0.45, 0.0, 0.585]), 3.0),
        TargetStep(np.array([0.7, 0.0, 0.485]), np.array([0.6, 0.0, 0.47]), 0.0),
    ], success_radius=0.05, time_limit=time_limit)


@dataclass
class SequencerState:
    index: int = 0
    hold_since: float | None = None


def target_sequencer_step(spec: TaskSpec, state: SequencerState,
                          tray_pos: np.ndarray, t: float):
    """Advance the target pointer when the tray has stayed inside the
    success ball for the active target's idle time. Returns
    (active TargetStep, advanced, all_done)."""
    if state.index >= len(spec.targets):
        return spec.targets[-1], False, True
    tgt = spec.targets[state.index]
    dist = float(np.linalg.norm(tray_pos - tgt.tray_pos))
    advanced = False
    if dist <= spec.success_radius:
        if state.hold_since is None:
            state.hold_since = t
        if t - state.hold_since >= tgt.idle:
            state.index += 1
            state.hold_since = None
            advanced = True
    else:
        state.hold_since = None
    done = state.index >= len(spec.targets)
    active = spec.targets[min(state.index, len(spec.targets) - 1)]
    return active, advanced, done


class Outcome(enum.Enum):
    SUCCESS = "success"
    TIMEOUT = "timeout"
    FAULT = "fault"


@dataclass
class EpisodeLog:
    t: np.ndarray                    # (n,)
    x: np.ndarray                    # (n, 19) ground-truth states
    u_cmd: np.ndarray                # (n, 3) commanded ee force
    lam: np.ndarray                  # (n, n_lam_true) ground-truth impulses
    target_index: np.ndarray         # (n,) active target at each tick
    outcome: Outcome
    reach_times: list[float]
    solve_times: list[float]
    plan_times: list[float]          # activation timestamps of each plan
    mode_patterns: list[np.ndarray]  # per-plan first-knot pair modes
    fault_message: str = ""
    arm_q: np.ndarray | None = None  # (n, n_joints) in OSC_ARM mode

    def summary(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "duration": float(self.t[-1]) if len(self.t) else 0.0,
            "reach_times": [float(v) for v in self.reach_times],
            "median_solve_time": float(np.median(self.solve_times)) if self.solve_times else None,
            "n_plans": len(self.plan_times),
            "fault_message": self.fault_message,
        }

    def write_csv(self, path) -> None:
        """Deterministic text export: repr formatting, fixed column order."""
        cols = (["t"] + [f"x{i}" for i in range(self.x.shape[1])]
                + [f"u{i}" for i in range(self.u_cmd.shape[1])]
                + [f"lam{i}" for i in range(self.lam.shape[1])]
                + ["target_index"])
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(len(self.t)):
                row = [repr(float(self.t[k]))]
                row += [repr(float(v)) for v in self.x[k]]
                row += [repr(float(v)) for v in self.u_cmd[k]]
                row += [repr(float(v)) for v in self.lam[k]]
                row.append(str(int(self.target_index[k])))
                fh.write(",".join(row) + "\n")

    def plot_data(self) -> dict:
        """Series behind trajectory plots: positions and per-plan modes."""
        return {
            "t": self.t.tolist(),
            "ee_pos": self.x[:, EE_POS].tolist(),
            "tray_pos": self.x[:, TRAY_POS].tolist(),
            "quat": self.x[:, QUAT].tolist(),
            "u_cmd": self.u_cmd.tolist(),
            "target_index": self.target_index.tolist(),
            "plan_times": [float(v) for v in self.plan_times],
            "mode_patterns": [m.tolist() for m in self.mode_patterns],
        }


def initial_tray_state(cfg: ScenarioConfig, seed: int,
                       tray_pos=(0.7, 0.0, 0.485),
                       ee_pos=(0.55, 0.0, 0.45)) -> np.ndarray:
    """Nominal start with a +-1 cm uniform perturbation on tray x/y."""
    rng = np.random.default_rng(seed)
    tray = np.array(tray_pos, dtype=float)
    tray[:2] += rng.uniform(-0.01, 0.01, 2)
    return pack_state(np.array(ee_pos, dtype=float), np.array([1.0, 0, 0, 0]), tray)


def _hover_force(cfg: ScenarioConfig) -> np.ndarray:
    return np.array([0.0, 0.0, cfg.ee.mass * 9.81])


class _Replanner:
    """Sequential deterministic replanning: each solve is charged its
    emulated latency; the produced plan activates once virtual time passes
    the charge."""

    def __init__(self, cfg, params, latency, u_bounds=True):
        self.cfg = cfg
        self.params = params
        self.latency = latency
        self.cache = WarmStartCache()
        self.est = LatencyEstimator()
        self.plan: C3Solution | None = None
        self.targets = None
        self.plan_epoch = 0.0
        self.pending = None          # (activation time, plan, targets)
        self.next_start = 0.0
        self.solve_times: list[float] = []
        self.plan_times: list[float] = []
        self.mode_patterns: list[np.ndarray] = []
        self.u_lin = None

    def maybe_replan(self, t, measured, target_state):
        """Kick off a solve whenever the previous one has been delivered."""
        if self.pending is not None or t < self.next_start:
            return
        if self.plan is not None:
            self.cache.advance()
            x0 = predict_initial_state(self.plan, measured, self.est)
        else:
            x0 = measured.copy()
        u_lin = self.u_lin if self.u_lin is not None else _hover_force(self.cfg)
        wall_t0 = time.perf_counter()
        lcs = linearize_dynamics(self.cfg, x0, u_lin, self.params.dt)
        sol = c3_solve(lcs, x0, target_state, self.params, self.cache)
        wall = time.perf_counter() - wall_t0
        delay = self.latency.charge(wall)
        self.est.update(delay)
        self.solve_times.append(wall)
        self.pending = (t + delay, sol)
        self.next_start = t + delay
        self.u_lin = sol.us[0].copy()

    def activate_due(self, t):
        if self.pending is not None and t >= self.pending[0]:
            t_act, sol = self.pending
            self.plan = sol
            self.targets = plan_to_tracking_targets(sol)
            self.plan_epoch = t_act
            self.plan_times.append(t_act)
            if sol.mode_pattern is not None:
                self.mode_patterns.append(sol.mode_pattern[0].copy())
            self.pending = None


def run_episode(cfg: ScenarioConfig, spec: TaskSpec, c3_params: C3Params,
                mode: ControlBridgeMode = ControlBridgeMode.DIRECT_FORCE,
                seed: int = 0, latency: LatencyModel | None = None,
                ablate_force_objective: bool = False,
                osc_kp: float = 400.0, osc_kd: float = 40.0,
                force_weight: float = 10.0,
                pd_assist: tuple[float, float] = (400.0, 40.0),
                press_gain: float = 2.0,
                arm: ManipulatorModel | None = None,
                x_init: np.ndarray | None = None,
                target_override=None) -> EpisodeLog:
    """Simulate one closed-loop episode of the sequential-target task."""
    bad = spec.validate() + c3_params.validate() + cfg.validate()
    if bad:
        raise ValueError("invalid episode setup: " + "; ".join(bad))
    latency = latency or LatencyModel()
    x = initial_tray_state(cfg, seed) if x_init is None else np.asarray(x_init, dtype=float).copy()
    n_steps = int(round(spec.time_limit / FINE_DT))
    n_lam_true = cfg.n_lam

    rp = _Replanner(cfg, c3_params, latency)
    seq = SequencerState()
    meas_tray = x.copy()       # zero-order-hold tray channel
    next_meas = 0.0
    warm_lam = None

    use_arm = mode is ControlBridgeMode.OSC_ARM
    if use_arm:
        arm = arm or builtin_test_arm()
        q_arm = arm.solve_tool_ik(x[EE_POS], np.array([0.0, 0.5, -1.0]))
        qd_arm = np.zeros(arm.n_joints)
        weld_k, weld_d = 2.0e4, 150.0

    ts = np.empty(n_steps)
    xs = np.empty((n_steps, N_X))
    us = np.empty((n_steps, 3))
    lams = np.zeros((n_steps, n_lam_true))
    tgt_idx = np.empty(n_steps, dtype=int)
    arm_qs = np.empty((n_steps, arm.n_joints)) if use_arm else None
    reach_times: list[float] = []
    outcome = Outcome.TIMEOUT
    fault_message = ""
    n_logged = 0

    for k in range(n_steps):
        t = k * FINE_DT
        if t >= next_meas:
            meas_tray = x.copy()
            next_meas += MEASUREMENT_PERIOD

        active, advanced, done = target_sequencer_step(spec, seq, x[TRAY_POS], t)
        if advanced:
            reach_times.append(t)
        if done:
            outcome = Outcome.SUCCESS
            break

        if target_override is not None:
            target_state = target_override(t, meas_tray)
        else:
            target_state = pack_state(
                np.clip(active.ee_pos, c3_params.ee_lo, c3_params.ee_hi),
                np.array([1.0, 0, 0, 0]), active.tray_pos)
        measured = x.copy()
        measured[QUAT] = meas_tray[QUAT]
        measured[TRAY_POS] = meas_tray[TRAY_POS]
        measured[OMEGA] = meas_tray[OMEGA]
        measured[TRAY_VEL] = meas_tray[TRAY_VEL]
        rp.activate_due(t)
        rp.maybe_replan(t, measured, target_state)
        rp.activate_due(t)

        if rp.targets is None:
            u_ee = _hover_force(cfg)
            tracking = None
        else:
            tracking = rp.targets
            tau = t - rp.plan_epoch
            u_ee = tracking.force(tau)

        try:
            if not use_arm:
                if tracking is not None:
                    # hybrid tracking split along the contact normal: a
                    # moderate planar impedance follows the planned stroke,
                    # while the vertical axis servoes the planned vertical
                    # velocity and adds the planned press as a feedforward
                    # force. The press is ramped in with the measured gap
                    # (it only acts through real contact), capped below the
                    # tray weight (an off-center press past that tips the
                    # tray), and scaled by press_gain to cover the gap
                    # between modeled and actual friction.
                    kp, kd = pd_assist if pd_assist is not None else (120.0, 25.0)
                    e_p = tracking.position(tau) - x[EE_POS]
                    e_v = tracking.velocity(tau) - x[EE_VEL]
                    u_xy = cfg.ee.mass * (kp * e_p[:2] + kd * e_v[:2])
                    press = max(0.0, -cfg.ee.mass * tracking.contact_accel(tau)[2])
                    gap = (x[TRAY_POS][2] - cfg.tray.base_offset) \
                        - (x[EE_POS][2] + 0.5 * cfg.ee.thickness)
                    scale = min(max(1.0 - gap / 0.01, 0.0), 1.0)
                    vz_des = min(max(tracking.velocity(tau)[2], -0.15), 0.15)
                    if press > 0.2 and gap > 0.0:
                        vz_des = max(vz_des, min(5.0 * gap, 0.12))
                    e_z = min(max(e_p[2], -0.02), 0.02)
                    press_cap = 0.7 * cfg.tray.mass * 9.81
                    u_z = cfg.ee.mass * (9.81 + 30.0 * e_z
                                         + 60.0 * (vz_des - x[EE_VEL][2])) \
                        + min(press_gain * press * scale, press_cap)
                    u_ee = np.array([u_xy[0], u_xy[1], u_z])
                u_apply = np.clip(u_ee, c3_params.u_lo, c3_params.u_hi)
                x, lam, _ = ground_truth_step(cfg, x, u_apply, FINE_DT, warm_lam)
            else:
                if tracking is not None:
                    objs = [tool_position_objective(
                        arm, lambda s: tracking.position(s - rp.plan_epoch),
                        lambda s: tracking.velocity(s - rp.plan_epoch),
                        lambda s: tracking.acceleration(s - rp.plan_epoch),
                        kp=osc_kp, kd=osc_kd)]
                    # tool-applied force target: carry the welded paddle and
                    # press with the plan's contact force
                    f_des = _hover_force(cfg) \
                        - cfg.ee.mass * tracking.contact_accel(tau)
                else:
                    objs = [tool_position_objective(arm, x[EE_POS],
                                                    kp=osc_kp, kd=osc_kd)]
                    f_des = _hover_force(cfg)
                objs += [tool_axis_objective(arm), posture_objective(arm)]
                prob = OscProblem(
                    objectives=objs,
                    force_target=None if ablate_force_objective else (lambda s: f_des),
                    force_weight=force_weight)
                res = osc_solve(arm, np.concatenate([q_arm, qd_arm]), prob, t)
                p_tool = arm.tool_position(q_arm)
                v_tool = arm.tool_jacobian(q_arm) @ qd_arm
                f_weld = weld_k * (p_tool - x[EE_POS]) + weld_d * (v_tool - x[EE_VEL])
                qdd = arm.forward_dynamics(q_arm, qd_arm, res.u, f_tool=f_weld)
                qd_arm = qd_arm + FINE_DT * qdd
                q_arm = q_arm + FINE_DT * qd_arm
                u_apply = f_weld
                x, lam, _ = ground_truth_step(cfg, x, f_weld, FINE_DT, warm_lam)
            warm_lam = lam
        except RuntimeError as err:
            outcome = Outcome.FAULT
            fault_message = str(err)
            break
        if not np.all(np.isfinite(x)):
            outcome = Outcome.FAULT
            fault_message = "non-finite state"
            break

        ts[k] = t
        xs[k] = x
        us[k] = u_apply
        lams[k] = lam
        tgt_idx[k] = seq.index
        if use_arm:
            arm_qs[k] = q_arm
        n_logged = k + 1

    n = n_logged
    return EpisodeLog(ts[:n].copy(), xs[:n].copy(), us[:n].copy(),
                      lams[:n].copy(), tgt_idx[:n].copy(), outcome,
                      reach_times, rp.solve_times, rp.plan_times,
                      rp.mode_patterns, fault_message,
                      arm_qs[:n].copy() if use_arm else None)


# ---------------------------------------------------------------------------
# wall rotation task


def wall_orientation_target(current_quat: np.ndarray, target_quat: np.ndarray,
                            gain: float) -> np.ndarray:
    """Desired tray angular velocity proportional to the angle-axis error
    rotating current into target."""
    cq = normalize_quat(np.asarray(current_quat, dtype=float))
    tq = normalize_quat(np.asarray(target_quat, dtype=float))
    # error quaternion e = target * conj(current)
    conj = cq * np.array([1.0, -1.0, -1.0, -1.0])
    e = quat_multiply(tq, conj)
    if e[0] < 0.0:
        e = -e
    s = np.linalg.norm(e[1:])
    if s < 1e-12:
        return np.zeros(3)
    theta = 2.0 * np.arctan2(s, e[0])
    return gain * theta * (e[1:] / s)


def wall_task_target(c3_params: C3Params, gain: float = 1.5,
                     wall_bias: float = 0.04):
    """Target-state factory for the wall task: fixed pose target, tray
    position biased toward the wall, desired angular velocity from the
    quaternion error."""
    q_des = np.array([1.0, 0.0, 0.0, 0.0])

    def build(t, measured):
        target = pack_state(np.array([0.55, 0.0, 0.469]), q_des,
                            np.array([0.55, wall_bias, 0.485]))
        target[OMEGA] = wall_orientation_target(measured[QUAT], q_des, gain)
        return target
    return build


def tray_yaw(quat: np.ndarray) -> float:
    w, x, y, z = normalize_quat(np.asarray(quat, dtype=float))
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def run_wall_task(cfg_wall: ScenarioConfig, c3_params: C3Params, seed: int = 0,
                  initial_yaw_deg: float = 45.0, gain: float = 1.5,
                  time_limit: float = 20.0, yaw_tol_deg: float = 10.0,
                  mode: ControlBridgeMode = ControlBridgeMode.DIRECT_FORCE,
                  latency: LatencyModel | None = None) -> EpisodeLog:
    """Rotate the tray against the wall until the yaw error is small."""
    half = np.deg2rad(initial_yaw_deg) / 2.0
    quat0 = np.array([np.cos(half), 0.0, 0.0, np.sin(half)])
    rng = np.random.default_rng(seed)
    # tray starts resting on the end-effector face, not at the pose target
    rest_z = 0.469 + 0.5 * cfg_wall.ee.thickness + cfg_wall.tray.base_offset
    tray0 = np.array([0.55, 0.02, rest_z])
    tray0[:2] += rng.uniform(-0.005, 0.005, 2)
    x0 = pack_state(np.array([0.55, 0.0, 0.469]), quat0, tray0)

    yaw_tol = np.deg2rad(yaw_tol_deg)
    spec = TaskSpec(targets=[TargetStep(np.array([0.55, 0.0, 0.485]),
                                        np.array([0.55, 0.0, 0.469]))],
                    success_radius=1e-9, time_limit=time_limit)

    log = run_episode(cfg_wall, spec, c3_params, mode=mode, seed=seed,
                      latency=latency, x_init=x0,
                      target_override=wall_task_target(c3_params, gain))
    # success is orientation-based for this task
    yaws = np.array([abs(tray_yaw(q)) for q in log.x[:, QUAT]])
    if np.any(yaws < yaw_tol):
        log.outcome = Outcome.SUCCESS
        log.reach_times = [float(log.t[int(np.argmax(yaws < yaw_tol))])]
    return log
