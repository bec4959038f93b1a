"""Numba kernels for the hot path of the ground-truth stepper: contact
geometry and Anitescu ray assembly. Mirrors the numpy implementations in
scenario.py; the agreement is covered by tests."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def quat_to_rot_nb(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def _point_cylinder_nb(px, py, pz, radius, z_lo, z_hi):
    """Returns (phi, nx, ny, nz, wx, wy, wz) in the cylinder frame."""
    r = np.sqrt(px * px + py * py)
    if r > 1e-12:
        rx, ry = px / r, py / r
        degenerate = False
    else:
        rx, ry = 1.0, 0.0
        degenerate = True
    dr = r - radius
    below = z_lo - pz
    above = pz - z_hi
    if below >= above:
        dz_out = below
        fz = -1.0
        z_face = z_lo
    else:
        dz_out = above
        fz = 1.0
        z_face = z_hi
    if (dr <= 0.0 and dz_out > 0.0) or (degenerate and dz_out > 0.0):
        return dz_out, 0.0, 0.0, fz, px, py, z_face
    if dr > 0.0 and dz_out <= 0.0 and not degenerate:
        return dr, rx, ry, 0.0, radius * rx, radius * ry, pz
    if dr > 0.0 and dz_out > 0.0 and not degenerate:
        d = np.sqrt(dr * dr + dz_out * dz_out)
        return (d, dr * rx / d, dr * ry / d, dz_out * fz / d,
                radius * rx, radius * ry, z_face)
    # inside
    d_face = -dz_out
    d_side = -dr
    if d_face <= d_side or degenerate:
        return -d_face, 0.0, 0.0, fz, px, py, z_face
    return -d_side, rx, ry, 0.0, radius * rx, radius * ry, pz


@njit(cache=True)
def contact_geometry_nb(ee_pos, quat, tray_pos, ee_off, env_pts, wall_y,
                        radius, z_lo_ee, z_hi_ee, z_lo_env, z_hi_env):
    """phi, world normals (from tray toward point), world witnesses for the
    fixed contact order: 3 ee points, env points, optional wall (wall_y=nan
    disables it)."""
    has_wall = not np.isnan(wall_y)
    n_env = env_pts.shape[0]
    n_c = 3 + n_env + (1 if has_wall else 0)
    phi = np.empty(n_c)
    normal = np.empty((n_c, 3))
    witness = np.empty((n_c, 3))
    R = quat_to_rot_nb(quat)
    for i in range(3 + n_env):
        if i < 3:
            wx = ee_pos[0] + ee_off[i, 0] - tray_pos[0]
            wy = ee_pos[1] + ee_off[i, 1] - tray_pos[1]
            wz = ee_pos[2] + ee_off[i, 2] - tray_pos[2]
            z_lo = z_lo_ee
            z_hi = z_hi_ee
        else:
            wx = env_pts[i - 3, 0] - tray_pos[0]
            wy = env_pts[i - 3, 1] - tray_pos[1]
            wz = env_pts[i - 3, 2] - tray_pos[2]
            z_lo = z_lo_env
            z_hi = z_hi_env
        px = R[0, 0] * wx + R[1, 0] * wy + R[2, 0] * wz
        py = R[0, 1] * wx + R[1, 1] * wy + R[2, 1] * wz
        pz = R[0, 2] * wx + R[1, 2] * wy + R[2, 2] * wz
        p, nx, ny, nz, sx, sy, sz = _point_cylinder_nb(px, py, pz, radius, z_lo, z_hi)
        phi[i] = p
        for a in range(3):
            normal[i, a] = R[a, 0] * nx + R[a, 1] * ny + R[a, 2] * nz
            witness[i, a] = R[a, 0] * sx + R[a, 1] * sy + R[a, 2] * sz + tray_pos[a]
    if has_wall:
        ax, ay, az = R[0, 2], R[1, 2], R[2, 2]
        rx_, ry_, rz_ = -ax * ay, 1.0 - ay * ay, -az * ay
        rn = np.sqrt(rx_ * rx_ + ry_ * ry_ + rz_ * rz_)
        rx_, ry_, rz_ = rx_ / rn, ry_ / rn, rz_ / rn
        mid = 0.5 * (z_lo_env + z_hi_env)
        half = 0.5 * (z_hi_env - z_lo_env)
        s = 0.0
        if ay > 1e-9:
            s = 1.0
        elif ay < -1e-9:
            s = -1.0
        i = n_c - 1
        witness[i, 0] = tray_pos[0] + (mid + s * half) * ax + radius * rx_
        witness[i, 1] = tray_pos[1] + (mid + s * half) * ay + radius * ry_
        witness[i, 2] = tray_pos[2] + (mid + s * half) * az + radius * rz_
        phi[i] = wall_y - witness[i, 1]
        normal[i, 0] = 0.0
        normal[i, 1] = 1.0
        normal[i, 2] = 0.0
    return phi, normal, witness


@njit(cache=True)
def _chol_delete_nb(L, na, k):
    """Remove row/column k from the na-by-na Cholesky factor L in place,
    restoring lower-triangular form with Givens rotations."""
    for i in range(k, na - 1):
        for j in range(i + 2):
            L[i, j] = L[i + 1, j]
    for j in range(k, na - 1):
        a = L[j, j]
        b = L[j, j + 1]
        r = np.hypot(a, b)
        if r <= 0.0:
            c, s = 1.0, 0.0
        else:
            c, s = a / r, b / r
        for i in range(j, na - 1):
            t1 = L[i, j]
            t2 = L[i, j + 1]
            L[i, j] = c * t1 + s * t2
            L[i, j + 1] = c * t2 - s * t1


@njit(cache=True)
def active_set_diag_nb(p_diag, A, f, l, u, sets, eq, max_pivots, tol):
    """Least-index active-set QP solve for diagonal positive P.

    Same pivoting rule as qp.active_set_solve. The Cholesky factor of the
    active Schur complement A_act P^-1 A_act' is updated incrementally: one
    appended row per joining constraint, one Givens down-date per release.
    Returns (ok, z, y, sets, pivots); ok=False means the pivot budget ran out.
    """
    m, n = A.shape
    pinv = 1.0 / p_diag
    pif = -f * pinv
    apinv = A * pinv  # row i = A_i / p, so apinv @ A.T is A P^-1 A'
    scale = 1.0
    for j in range(n):
        af = abs(f[j])
        if af > scale:
            scale = af
    feas_tol = tol * scale
    z = np.zeros(n)
    y = np.zeros(m)

    na = 0
    for i in range(m):
        if sets[i] != 0:
            na += 1
    act = np.empty(m, dtype=np.int64)
    k = 0
    for i in range(m):
        if sets[i] != 0:
            act[k] = i
            k += 1
    L = np.zeros((m, m))
    if na:
        M = A[act[:na]] @ apinv[act[:na]].T
        for k in range(na):
            M[k, k] += 1e-10 * max(1.0, M[k, k])
        L[:na, :na] = np.linalg.cholesky(M)

    y_act = np.empty(m)
    for pivot in range(max_pivots):
        if na:
            rhs = np.empty(na)
            for k in range(na):
                i = act[k]
                b = l[i] if sets[i] == 1 else u[i]
                rhs[k] = -(b - A[i] @ pif)
            # forward then back substitution with the current factor
            for k in range(na):
                s = rhs[k]
                for j in range(k):
                    s -= L[k, j] * y_act[j]
                y_act[k] = s / L[k, k]
            for k in range(na - 1, -1, -1):
                s = y_act[k]
                for j in range(k + 1, na):
                    s -= L[j, k] * y_act[j]
                y_act[k] = s / L[k, k]
            z = pif - apinv[act[:na]].T @ y_act[:na]
            for i in range(m):
                y[i] = 0.0
            for k in range(na):
                y[act[k]] = y_act[k]
        else:
            z = pif.copy()
            for i in range(m):
                y[i] = 0.0
        az = A @ z
        bad = -1
        kind = 0
        for i in range(m):
            if sets[i] == 0:
                if az[i] < l[i] - feas_tol:
                    bad = i
                    kind = 1
                    break
                if az[i] > u[i] + feas_tol:
                    bad = i
                    kind = 2
                    break
            elif not eq[i]:
                if sets[i] == 1 and y[i] > feas_tol:
                    bad = i
                    kind = 0
                    break
                if sets[i] == 2 and y[i] < -feas_tol:
                    bad = i
                    kind = 0
                    break
        if bad < 0:
            return True, z, y, sets, pivot + 1
        if kind == 0:
            pos = 0
            for k in range(na):
                if act[k] == bad:
                    pos = k
                    break
            _chol_delete_nb(L, na, pos)
            for k in range(pos, na - 1):
                act[k] = act[k + 1]
            na -= 1
            sets[bad] = 0
        else:
            col = A[act[:na]] @ apinv[bad]
            d = A[bad] @ apinv[bad]
            d += 1e-10 * max(1.0, d)
            # l12 = L^-1 col, l22 = sqrt(d - l12'l12)
            for k in range(na):
                s = col[k]
                for j in range(k):
                    s -= L[k, j] * L[na, j]
                L[na, k] = s / L[k, k]
            s = d
            for j in range(na):
                s -= L[na, j] * L[na, j]
            L[na, na] = np.sqrt(max(s, 1e-14 * max(1.0, d)))
            act[na] = bad
            na += 1
            sets[bad] = kind
    return False, z, y, sets, max_pivots


@njit(cache=True)
def rays_nb(tray_pos, phi, normal, witness, mus, n_ee):
    """Anitescu ray matrix (4*n_c, 9) over v = [v_ee, omega, v_tray]."""
    n_c = phi.shape[0]
    J = np.zeros((4 * n_c, 9))
    for i in range(n_c):
        nx, ny, nz = normal[i, 0], normal[i, 1], normal[i, 2]
        # tangent basis (matches _tangent_basis)
        if abs(nx) < 0.9:
            tx, ty, tz = 1.0 - nx * nx, -nx * ny, -nx * nz
        else:
            tx, ty, tz = -ny * nx, 1.0 - ny * ny, -ny * nz
        tn = np.sqrt(tx * tx + ty * ty + tz * tz)
        tx, ty, tz = tx / tn, ty / tn, tz / tn
        sx = ny * tz - nz * ty
        sy = nz * tx - nx * tz
        sz = nx * ty - ny * tx
        rx = witness[i, 0] - tray_pos[0]
        ry = witness[i, 1] - tray_pos[1]
        rz = witness[i, 2] - tray_pos[2]
        mu = mus[i]
        for k in range(4):
            if k == 0:
                ex, ey, ez = nx + mu * tx, ny + mu * ty, nz + mu * tz
            elif k == 1:
                ex, ey, ez = nx - mu * tx, ny - mu * ty, nz - mu * tz
            elif k == 2:
                ex, ey, ez = nx + mu * sx, ny + mu * sy, nz + mu * sz
            else:
                ex, ey, ez = nx - mu * sx, ny - mu * sy, nz - mu * sz
            row = 4 * i + k
            if i < n_ee:
                J[row, 0] = ex
                J[row, 1] = ey
                J[row, 2] = ez
            # -(r x e) on the angular block
            J[row, 3] = -(ry * ez - rz * ey)
            J[row, 4] = -(rz * ex - rx * ez)
            J[row, 5] = -(rx * ey - ry * ex)
            J[row, 6] = -ex
            J[row, 7] = -ey
            J[row, 8] = -ez
    return J


@njit(cache=True)
def _axis_rot_nb(a, th):
    """Rodrigues rotation about unit axis a by angle th."""
    c = np.cos(th)
    s = np.sin(th)
    x, y, z = a[0], a[1], a[2]
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * (1 - c)
    R[0, 1] = x * y * (1 - c) - z * s
    R[0, 2] = x * z * (1 - c) + y * s
    R[1, 0] = y * x * (1 - c) + z * s
    R[1, 1] = c + y * y * (1 - c)
    R[1, 2] = y * z * (1 - c) - x * s
    R[2, 0] = z * x * (1 - c) - y * s
    R[2, 1] = z * y * (1 - c) + x * s
    R[2, 2] = c + z * z * (1 - c)
    return R


@njit(cache=True)
def chain_kin_nb(axes, offsets, q):
    """World joint origins, world joint axes, and world link rotations for a
    revolute serial chain. axes/offsets are given in the parent link frame."""
    n = q.shape[0]
    pj = np.empty((n, 3))
    aw = np.empty((n, 3))
    Rw = np.empty((n, 3, 3))
    R = np.eye(3)
    p = np.zeros(3)
    for i in range(n):
        p = p + R @ offsets[i]
        a = R @ axes[i]
        pj[i] = p
        aw[i] = a
        R = R @ _axis_rot_nb(axes[i], q[i])
        Rw[i] = R
    return pj, aw, Rw


@njit(cache=True)
def chain_mass_nb(axes, offsets, masses, coms, inertias, reflected, q):
    """Joint-space mass matrix of the chain, including reflected rotor
    inertia on the diagonal."""
    n = q.shape[0]
    pj, aw, Rw = chain_kin_nb(axes, offsets, q)
    M = np.zeros((n, n))
    for i in range(n):
        cw = pj[i] + Rw[i] @ coms[i]
        Jv = np.zeros((3, n))
        Jw = np.zeros((3, n))
        for j in range(i + 1):
            r0 = cw[0] - pj[j, 0]
            r1 = cw[1] - pj[j, 1]
            r2 = cw[2] - pj[j, 2]
            Jv[0, j] = aw[j, 1] * r2 - aw[j, 2] * r1
            Jv[1, j] = aw[j, 2] * r0 - aw[j, 0] * r2
            Jv[2, j] = aw[j, 0] * r1 - aw[j, 1] * r0
            Jw[0, j] = aw[j, 0]
            Jw[1, j] = aw[j, 1]
            Jw[2, j] = aw[j, 2]
        Iw = Rw[i] @ inertias[i] @ Rw[i].T
        M += masses[i] * (Jv.T @ Jv) + Jw.T @ Iw @ Jw
    for i in range(n):
        M[i, i] += reflected[i]
    return M


@njit(cache=True)
def chain_gravity_nb(axes, offsets, masses, coms, q, g):
    """Generalized gravity torque: d/dq of sum_i m_i g z_ci."""
    n = q.shape[0]
    pj, aw, Rw = chain_kin_nb(axes, offsets, q)
    tau = np.zeros(n)
    for i in range(n):
        cw = pj[i] + Rw[i] @ coms[i]
        for j in range(i + 1):
            r0 = cw[0] - pj[j, 0]
            r1 = cw[1] - pj[j, 1]
            jvz = aw[j, 0] * r1 - aw[j, 1] * r0
            tau[j] += masses[i] * g * jvz
    return tau


@njit(cache=True)
def chain_bias_nb(axes, offsets, masses, coms, inertias, reflected, q, qd, g):
    """Coriolis-plus-gravity bias C(q, qd) qd + g(q). Coriolis terms come
    from Christoffel symbols with central differences of the mass matrix."""
    n = q.shape[0]
    h = 1e-6
    dM = np.empty((n, n, n))
    for k in range(n):
        qp = q.copy()
        qm = q.copy()
        qp[k] += h
        qm[k] -= h
        dM[k] = (chain_mass_nb(axes, offsets, masses, coms, inertias, reflected, qp)
                 - chain_mass_nb(axes, offsets, masses, coms, inertias, reflected, qm)) / (2 * h)
    c = np.zeros(n)
    for j in range(n):
        s = 0.0
        for i in range(n):
            for k in range(n):
                s += 0.5 * (dM[k, j, i] + dM[i, j, k] - dM[j, i, k]) * qd[i] * qd[k]
        c[j] = s
    return c + chain_gravity_nb(axes, offsets, masses, coms, q, g)


@njit(cache=True)
def chain_point_jac_nb(axes, offsets, q, link, local_pt):
    """World position and translational Jacobian of a point fixed in the
    given link's frame."""
    n = q.shape[0]
    pj, aw, Rw = chain_kin_nb(axes, offsets, q)
    p = pj[link] + Rw[link] @ local_pt
    J = np.zeros((3, n))
    for j in range(link + 1):
        r0 = p[0] - pj[j, 0]
        r1 = p[1] - pj[j, 1]
        r2 = p[2] - pj[j, 2]
        J[0, j] = aw[j, 1] * r2 - aw[j, 2] * r1
        J[1, j] = aw[j, 2] * r0 - aw[j, 0] * r2
        J[2, j] = aw[j, 0] * r1 - aw[j, 1] * r0
    return p, J


@njit(cache=True)
def chain_axis_jac_nb(axes, offsets, q, link, local_axis):
    """World direction of an axis fixed in the given link's frame and its
    Jacobian: column j is a_wj x axis for j <= link."""
    n = q.shape[0]
    pj, aw, Rw = chain_kin_nb(axes, offsets, q)
    ax = Rw[link] @ local_axis
    J = np.zeros((3, n))
    for j in range(link + 1):
        J[0, j] = aw[j, 1] * ax[2] - aw[j, 2] * ax[1]
        J[1, j] = aw[j, 2] * ax[0] - aw[j, 0] * ax[2]
        J[2, j] = aw[j, 0] * ax[1] - aw[j, 1] * ax[0]
    return ax, J
