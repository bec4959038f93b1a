"""Tray-manipulation scenario: rigid-body model of a flat end effector, a
cylindrical tray, and static environment contacts (two line supports or a
wall), with Anitescu-basis linearization into an LCS and a fine-step
nonlinear ground-truth simulator.

State layout (19):
    q = [ee_xyz (0:3), tray quat wxyz (3:7), tray_xyz (7:10)]
    v = [ee vel (10:13), tray angular vel, world frame (13:16), tray vel (16:19)]

The end effector is a disk restricted to translation; its 3 contact points
are fixed offsets in the world frame. Supports contribute 2 fixed contact
points each; the wall contributes a single rim contact. All contact normals
point from the tray toward the opposing point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lcp import LinCompProblem, LcpMethod, lcp_solve, LcpNoSolution
from .lcs import LcsModel
from ._kernels import contact_geometry_nb, rays_nb

EE_POS = slice(0, 3)
QUAT = slice(3, 7)
TRAY_POS = slice(7, 10)
EE_VEL = slice(10, 13)
OMEGA = slice(13, 16)
TRAY_VEL = slice(16, 19)
N_X = 19
N_U = 3
N_V = 9
RAYS_PER_CONTACT = 4


class DegenerateContact(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrayGeom:
    mass: float = 1.0
    radius: float = 0.228
    thickness: float = 0.004
    rim_height: float = 0.022
    # The recessed base plate the end effector presses sits base_offset below
    # the tray origin; the rim lip that rests on supports reaches down to
    # bottom_offset. Targets separated by 0.015 m vertically (half the ee
    # thickness plus base_offset) stack the ee flush under the tray.
    base_offset: float = 0.010
    bottom_offset: float = 0.019

    def inertia_body(self) -> np.ndarray:
        # uniform cylinder over the rim-inclusive height
        m, r, h = self.mass, self.radius, self.rim_height
        ixx = m * (3 * r * r + h * h) / 12.0
        return np.diag([ixx, ixx, 0.5 * m * r * r])


@dataclass
class EeGeom:
    mass: float = 0.37
    radius: float = 0.0725
    thickness: float = 0.01
    contact_ring_scale: float = 0.9  # contact circle radius as fraction of radius

    def contact_offsets(self) -> np.ndarray:
        """Three contact points on the top face, 120 degrees apart (world frame
        offsets; the disk does not rotate)."""
        r = self.contact_ring_scale * self.radius
        z = 0.5 * self.thickness
        angs = np.deg2rad([0.0, 120.0, 240.0])
        return np.stack([r * np.cos(angs), r * np.sin(angs),
                         np.full(3, z)], axis=1)


@dataclass
class Support:
    """Straight rail along x at fixed y.

    The tray's circular rim rests on the rail, so the candidate contacts are
    the two points where the rim circle crosses the rail line, clamped to the
    rail extent. They move with the tray: the support polygon follows the
    tray as it slides, keeping the tray's weight centered between the
    crossings instead of pinned to the rail ends.
    """
    y: float
    z_top: float
    x_lo: float
    x_hi: float

    def contact_points(self, tray_pos=None,
                       rim_radius: float | None = None) -> np.ndarray:
        if tray_pos is None or rim_radius is None:
            return np.array([[self.x_lo, self.y, self.z_top],
                             [self.x_hi, self.y, self.z_top]])
        cx, cy = float(tray_pos[0]), float(tray_pos[1])
        dy = self.y - cy
        # inset the crossings slightly inside the rim circle so they land on
        # the underside face of the rim annulus rather than its outer corner
        r = rim_radius - 3e-3
        half = np.sqrt(max(r * r - dy * dy, 0.0))
        xs = np.clip([cx - half, cx + half], self.x_lo, self.x_hi)
        return np.array([[xs[0], self.y, self.z_top],
                         [xs[1], self.y, self.z_top]])


@dataclass
class Wall:
    """Vertical wall modeled by its inner face plane y = y_face (normal -y)."""
    y_face: float


@dataclass
class FrictionPair:
    tray_ee: float
    tray_env: float


@dataclass
class ScenarioConfig:
    tray: TrayGeom = field(default_factory=TrayGeom)
    ee: EeGeom = field(default_factory=EeGeom)
    supports: list[Support] = field(default_factory=list)
    wall: Wall | None = None
    mu_model: FrictionPair = field(default_factory=lambda: FrictionPair(0.6, 0.1))
    mu_true: FrictionPair = field(default_factory=lambda: FrictionPair(0.5, 0.18))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def validate(self) -> list[str]:
        bad = []
        if self.tray.mass <= 0 or self.ee.mass <= 0:
            bad.append("masses must be positive")
        if self.tray.radius <= 0 or self.ee.radius <= 0:
            bad.append("radii must be positive")
        for mu in (self.mu_model.tray_ee, self.mu_model.tray_env,
                   self.mu_true.tray_ee, self.mu_true.tray_env):
            if not 0.0 <= mu <= 2.0:
                bad.append(f"friction coefficient {mu} outside [0, 2]")
                break
        if not self.supports and self.wall is None:
            bad.append("need at least one support or a wall")
        return bad

    @property
    def n_contacts(self) -> int:
        return 3 + 2 * len(self.supports) + (1 if self.wall is not None else 0)

    @property
    def n_lam(self) -> int:
        return RAYS_PER_CONTACT * self.n_contacts


def tray_scenario() -> ScenarioConfig:
    """Default retrieve/lift/place scenario (two line supports).

    Support tops sit flush with the tray bottom at its resting height, and
    the segments start slightly inboard of the tray's initial rim so the
    tray overhangs the near edge where the end effector works."""
    return ScenarioConfig(supports=[Support(0.12, 0.466, 0.50, 0.95),
                                    Support(-0.12, 0.466, 0.50, 0.95)])


def wall_scenario() -> ScenarioConfig:
    """Tray balanced on the end effector next to a wall 0.3 m to the side."""
    cfg = ScenarioConfig(wall=Wall(0.3),
                         mu_model=FrictionPair(0.8, 1.0),
                         mu_true=FrictionPair(0.8, 1.0))
    return cfg


# ---------------------------------------------------------------------------
# state helpers


def pack_state(ee_pos, quat, tray_pos, ee_vel=None, omega=None, tray_vel=None) -> np.ndarray:
    x = np.zeros(N_X)
    x[EE_POS] = ee_pos
    x[QUAT] = quat
    x[TRAY_POS] = tray_pos
    if ee_vel is not None:
        x[EE_VEL] = ee_vel
    if omega is not None:
        x[OMEGA] = omega
    if tray_vel is not None:
        x[TRAY_VEL] = tray_vel
    return x


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_rate_matrix(q: np.ndarray) -> np.ndarray:
    """4x3 map from world-frame angular velocity to quaternion rate:
    qdot = 0.5 * [0, omega] (x) q."""
    w, x, y, z = q
    return 0.5 * np.array([
        [-x, -y, -z],
        [w, z, -y],
        [-z, w, x],
        [y, -x, w],
    ])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def normalize_quat(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return q / n


# ---------------------------------------------------------------------------
# geometry


def _point_cylinder(p: np.ndarray, radius: float, z_lo: float, z_hi: float):
    """Signed distance from a point to a z-aligned cylinder (local frame).

    Returns (phi, outward normal at the witness, witness on the surface).
    Ties on interior faces prefer the face normal; the axis singularity
    resolves to -z.
    """
    r = float(np.hypot(p[0], p[1]))
    if r > 1e-12:
        radial = np.array([p[0] / r, p[1] / r, 0.0])
    else:
        radial = None
    dr = r - radius
    below = z_lo - p[2]
    above = p[2] - z_hi
    dz_out = max(below, above)
    face_n = np.array([0.0, 0.0, -1.0]) if below >= above else np.array([0.0, 0.0, 1.0])
    z_face = z_lo if below >= above else z_hi
    if dr > 0.0 or dz_out > 0.0:
        # outside
        if dr <= 0.0:
            witness = np.array([p[0], p[1], z_face])
            return dz_out, face_n, witness
        if radial is None:  # cannot happen with dr > 0
            raise DegenerateContact("radial direction undefined outside cylinder")
        if dz_out <= 0.0:
            witness = radius * radial + np.array([0.0, 0.0, p[2]])
            return dr, radial, witness
        phi = float(np.hypot(dr, dz_out))
        witness = radius * radial + np.array([0.0, 0.0, z_face])
        normal = (dr * radial + dz_out * face_n) / phi
        return phi, normal, witness
    # inside: nearest surface, faces win ties, axis falls back to -z
    d_face = -dz_out
    d_side = -dr
    if d_face <= d_side or radial is None:
        witness = np.array([p[0], p[1], z_face])
        return -d_face, face_n, witness
    witness = radius * radial + np.array([0.0, 0.0, p[2]])
    return -d_side, radial, witness


def signed_distance_point_tray(point: np.ndarray, tray_quat: np.ndarray,
                               tray_pos: np.ndarray, geom: TrayGeom,
                               surface: str = "env", sphere_radius: float = 0.0):
    """Signed distance from a world point (sphere center) to the tray cylinder.

    `surface` picks the collision cylinder: "env" uses the rim-inclusive
    height, "ee" uses the thin base. Returns (phi, world normal from tray
    toward the point, world witness on the tray)."""
    R = quat_to_rot(tray_quat)
    p_local = R.T @ (np.asarray(point) - np.asarray(tray_pos))
    if surface == "env":
        z_lo = -geom.bottom_offset
        z_hi = z_lo + geom.rim_height
    else:
        z_lo = -geom.base_offset
        z_hi = z_lo + geom.thickness
    phi, n_local, w_local = _point_cylinder(p_local, geom.radius, z_lo, z_hi)
    return phi - sphere_radius, R @ n_local, R @ w_local + tray_pos


def _tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = ref - np.dot(ref, n) * n
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


@dataclass
class Contact:
    kind: str            # "ee", "support", or "wall"
    phi: float
    normal: np.ndarray   # world, from tray toward the opposing point
    witness: np.ndarray  # on the tray, world
    point: np.ndarray    # opposing contact point, world
    mu: float
    tangent1: np.ndarray = field(init=False)
    tangent2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tangent1, self.tangent2 = _tangent_basis(self.normal)


def _wall_rim_point(quat, tray_pos, geom: TrayGeom, wall: Wall):
    """Closest point of the tray (env cylinder) to the wall plane y = y_face."""
    R = quat_to_rot(quat)
    axis = R[:, 2]
    d = np.array([0.0, 1.0, 0.0])
    radial = d - np.dot(d, axis) * axis
    rn = np.linalg.norm(radial)
    if rn < 1e-9:
        raise DegenerateContact("tray axis parallel to wall normal")
    radial /= rn
    z_lo = -geom.bottom_offset
    z_hi = z_lo + geom.rim_height
    mid = 0.5 * (z_lo + z_hi)
    half = 0.5 * (z_hi - z_lo)
    s = np.sign(axis[1]) if abs(axis[1]) > 1e-9 else 0.0
    rim = np.asarray(tray_pos) + (mid + s * half) * axis + geom.radius * radial
    phi = wall.y_face - rim[1]
    point = rim.copy()
    point[1] = wall.y_face
    return phi, np.array([0.0, 1.0, 0.0]), rim, point


def _env_points(cfg: ScenarioConfig, tray_pos: np.ndarray) -> np.ndarray:
    pts = [s.contact_points(tray_pos, cfg.tray.radius) for s in cfg.supports]
    return np.vstack(pts) if pts else np.zeros((0, 3))


def _contact_arrays(cfg: ScenarioConfig, x: np.ndarray, friction: str):
    """Vectorized contact query (numba-backed). Returns (phi, normals,
    witnesses, mus, is_ee) with one row per contact, in fixed order:
    3 ee points, 2 per support, then the wall."""
    mu = cfg.mu_model if friction == "model" else cfg.mu_true
    quat = normalize_quat(np.asarray(x[QUAT], dtype=float))
    z_lo_ee = -cfg.tray.base_offset
    z_lo_env = -cfg.tray.bottom_offset
    wall_y = np.nan if cfg.wall is None else cfg.wall.y_face
    phi, normal, witness = contact_geometry_nb(
        np.ascontiguousarray(x[EE_POS], dtype=float), quat,
        np.ascontiguousarray(x[TRAY_POS], dtype=float),
        cfg.ee.contact_offsets(), _env_points(cfg, x[TRAY_POS]), wall_y,
        cfg.tray.radius, z_lo_ee, z_lo_ee + cfg.tray.thickness,
        z_lo_env, z_lo_env + cfg.tray.rim_height)
    n_env = len(phi) - 3
    mus = np.concatenate([np.full(3, mu.tray_ee), np.full(n_env, mu.tray_env)])
    is_ee = np.zeros(len(phi), dtype=bool)
    is_ee[:3] = True
    return phi, normal, witness, mus, is_ee


def contact_set(cfg: ScenarioConfig, x: np.ndarray, friction: str = "model") -> list[Contact]:
    """All candidate contacts at state x as Contact objects (fixed order)."""
    phi, normal, witness, mus, is_ee = _contact_arrays(cfg, x, friction)
    pts = [x[EE_POS] + off for off in cfg.ee.contact_offsets()]
    kinds = ["ee"] * 3
    for sup in cfg.supports:
        pts.extend(sup.contact_points(x[TRAY_POS], cfg.tray.radius))
        kinds.extend(["support", "support"])
    if cfg.wall is not None:
        p = witness[-1].copy()
        p[1] = cfg.wall.y_face
        pts.append(p)
        kinds.append("wall")
    return [Contact(kinds[i], float(phi[i]), normal[i], witness[i],
                    np.asarray(pts[i], dtype=float), float(mus[i]))
            for i in range(len(phi))]


def contact_jacobian(x: np.ndarray, contact: Contact) -> np.ndarray:
    """Rows (normal, tangent1, tangent2) mapping v_lcs to the relative
    contact-point velocity along each direction (separating positive)."""
    rows = np.zeros((3, N_V))
    r = contact.witness - x[TRAY_POS]
    for k, e in enumerate((contact.normal, contact.tangent1, contact.tangent2)):
        if contact.kind == "ee":
            rows[k, 0:3] = e
        rows[k, 3:6] = -np.cross(r, e)
        rows[k, 6:9] = -e
    return rows


def anitescu_rays(x: np.ndarray, contact: Contact) -> np.ndarray:
    """4 generalized force direction rows: J_n + mu * J_t for
    t in (+t1, -t1, +t2, -t2)."""
    J = contact_jacobian(x, contact)
    jn, jt1, jt2 = J
    mu = contact.mu
    return np.stack([jn + mu * jt1, jn - mu * jt1, jn + mu * jt2, jn - mu * jt2])


def contact_rays(cfg: ScenarioConfig, x: np.ndarray, friction: str = "model"):
    """Stacked Anitescu ray matrix (n_lam x 9) and per-ray gap vector.

    Third return value carries the raw per-contact arrays
    (phi, normal, witness, mu, is_ee)."""
    phi, normal, witness, mus, is_ee = _contact_arrays(cfg, x, friction)
    J = rays_nb(np.ascontiguousarray(x[TRAY_POS], dtype=float), phi, normal,
                witness, mus, 3)
    return J, np.repeat(phi, RAYS_PER_CONTACT), (phi, normal, witness, mus, is_ee)


# ---------------------------------------------------------------------------
# dynamics


def generalized_mass(cfg: ScenarioConfig, quat: np.ndarray) -> np.ndarray:
    R = quat_to_rot(quat)
    M = np.zeros((N_V, N_V))
    M[0:3, 0:3] = cfg.ee.mass * np.eye(3)
    M[3:6, 3:6] = R @ cfg.tray.inertia_body() @ R.T
    M[6:9, 6:9] = cfg.tray.mass * np.eye(3)
    return M


def generalized_mass_inv(cfg: ScenarioConfig, quat: np.ndarray) -> np.ndarray:
    R = quat_to_rot(quat)
    Minv = np.zeros((N_V, N_V))
    Minv[0:3, 0:3] = np.eye(3) / cfg.ee.mass
    Minv[3:6, 3:6] = R @ np.linalg.inv(cfg.tray.inertia_body()) @ R.T
    Minv[6:9, 6:9] = np.eye(3) / cfg.tray.mass
    return Minv


def free_velocity(cfg: ScenarioConfig, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Contact-free velocity after one semi-implicit Euler step."""
    quat = normalize_quat(x[QUAT])
    R = quat_to_rot(quat)
    iw = R @ cfg.tray.inertia_body() @ R.T
    omega = x[OMEGA]
    v = np.empty(N_V)
    v[0:3] = x[EE_VEL] + dt * (u / cfg.ee.mass + cfg.gravity)
    gyro = -np.cross(omega, iw @ omega)
    v[3:6] = omega + dt * np.linalg.solve(iw, gyro)
    v[6:9] = x[TRAY_VEL] + dt * cfg.gravity
    return v


def integrate_positions(x: np.ndarray, v_next: np.ndarray, dt: float) -> np.ndarray:
    """Semi-implicit position update from the post-step velocity."""
    xn = np.empty(N_X)
    xn[EE_POS] = x[EE_POS] + dt * v_next[0:3]
    quat = x[QUAT]
    qn = quat + dt * (quat_rate_matrix(quat) @ v_next[3:6])
    xn[QUAT] = normalize_quat(qn)
    xn[TRAY_POS] = x[TRAY_POS] + dt * v_next[6:9]
    xn[EE_VEL] = v_next[0:3]
    xn[OMEGA] = v_next[3:6]
    xn[TRAY_VEL] = v_next[6:9]
    return xn


def smooth_step(cfg: ScenarioConfig, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One contact-free semi-implicit Euler step (quaternion renormalized)."""
    return integrate_positions(x, free_velocity(cfg, x, u, dt), dt)


def ground_truth_step(cfg: ScenarioConfig, x: np.ndarray, ee_force: np.ndarray,
                      fine_dt: float, warm_lam: np.ndarray | None = None):
    """One fine step of the nonlinear time stepper with measured friction.

    Re-linearizes contacts at the current state, solves the contact LCP in the
    Anitescu basis, and advances with a semi-implicit update. Returns
    (x_next, lam, contacts)."""
    if fine_dt > 2e-3:
        raise ValueError("fine_dt must be <= 2 ms")
    J, phi, contacts = contact_rays(cfg, x, friction="true")
    minv = generalized_mass_inv(cfg, normalize_quat(x[QUAT]))
    v_free = free_velocity(cfg, x, ee_force, fine_dt)
    jm = J @ minv
    M_lcp = fine_dt * (jm @ J.T)
    M_lcp[np.diag_indices_from(M_lcp)] += 1e-12
    q_lcp = phi / fine_dt + J @ v_free
    try:
        lam = lcp_solve(LinCompProblem(M_lcp, q_lcp), method=LcpMethod.ITERATIVE,
                        warm=warm_lam)
    except LcpNoSolution as err:
        raise RuntimeError(f"simulation fault: contact LCP failed at state {x!r}") from err
    v_next = v_free + fine_dt * (jm.T @ lam)
    return integrate_positions(x, v_next, fine_dt), lam, contacts


def _state_input_jacobians(cfg: ScenarioConfig, x: np.ndarray, u: np.ndarray,
                           dt: float, eps: float = 1e-6):
    """A, B of the contact-free step by central differences."""
    A = np.empty((N_X, N_X))
    for j in range(N_X):
        dx = np.zeros(N_X)
        dx[j] = eps
        A[:, j] = (smooth_step(cfg, x + dx, u, dt) - smooth_step(cfg, x - dx, u, dt)) / (2 * eps)
    B = np.empty((N_X, N_U))
    for j in range(N_U):
        du = np.zeros(N_U)
        du[j] = eps
        B[:, j] = (smooth_step(cfg, x, u + du, dt) - smooth_step(cfg, x, u - du, dt)) / (2 * eps)
    return A, B


def _gap_position_jacobian(cfg: ScenarioConfig, x: np.ndarray, friction: str,
                           eps: float = 1e-6) -> np.ndarray:
    """d(phi)/d(position components), per ray (n_lam x 19, velocity cols 0)."""
    n_lam = cfg.n_lam
    G = np.zeros((n_lam, N_X))
    for j in range(10):
        dx = np.zeros(N_X)
        dx[j] = eps
        _, phi_p, _ = contact_rays(cfg, x + dx, friction)
        _, phi_m, _ = contact_rays(cfg, x - dx, friction)
        G[:, j] = (phi_p - phi_m) / (2 * eps)
    return G


def linearize_dynamics(cfg: ScenarioConfig, x: np.ndarray, u: np.ndarray,
                       dt: float, friction: str = "model") -> LcsModel:
    """Linearize the scenario at (x, u) into an LCS with Anitescu contacts.

    Complementarity per ray: 0 <= lam perp phi/dt + J_ray v_next >= 0."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    A, B = _state_input_jacobians(cfg, x, u, dt)
    f0 = smooth_step(cfg, x, u, dt)
    d = f0 - A @ x - B @ u

    J, phi, _ = contact_rays(cfg, x, friction)
    minv = generalized_mass_inv(cfg, normalize_quat(x[QUAT]))
    jm = J @ minv
    d_vel = dt * jm.T                      # (9, n_lam)
    T = np.zeros((10, N_V))
    T[0:3, 0:3] = np.eye(3)
    T[3:7, 3:6] = quat_rate_matrix(normalize_quat(x[QUAT]))
    T[7:10, 6:9] = np.eye(3)
    D = np.vstack([dt * (T @ d_vel), d_vel])  # (19, n_lam)

    E = _gap_position_jacobian(cfg, x, friction) / dt + J @ A[10:19, :]
    H = J @ B[10:19, :]
    F = dt * (jm @ J.T)
    v0 = f0[10:19]
    c = phi / dt + J @ v0 - E @ x - H @ u
    return LcsModel(a=A, b=B, d_map=D, d_aff=d, e=E, f=F, h=H, c=c, dt=dt)
