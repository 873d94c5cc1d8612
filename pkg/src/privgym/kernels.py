"""Numba-compiled planar rigid-body kernels.

Everything hot lives here: box-box contact generation (SAT + incident-face
clipping), the sequential-impulse contact solver, and the per-substep
integrator. The same kernels back both the single-instance API in
``physics.py`` and the batched environment stepper, so the two paths are
bit-identical by construction.

Coordinate system: x horizontal, z vertical (gravity acts along -z).
Generalized coordinates (7 DOF):

    q = [x_R, z_R, theta_R, aperture, x_O, z_O, theta_O]
    v = [vx_R, vz_R, omega_R, aperture_rate, vx_O, vz_O, omega_O]

The gripper is a single 4-DOF floating body: palm box plus two finger
boxes whose inner faces sit ``aperture`` apart, symmetric about the palm
center. The gripper's generalized mass matrix is constant diagonal
(mass, mass, inertia, aperture effective mass).

Scene scalars are packed into a flat float64 parameter vector indexed by
the ``P_*`` constants; contacts are rows of a float64 buffer indexed by
the ``C_*`` constants.
"""

import math

import numpy as np
from numba import njit

# body ids
B_TABLE = 0
B_FLOOR = 1
B_OBJECT = 2
B_PALM = 3
B_FINGER_L = 4
B_FINGER_R = 5
B_WALL_L = 6
B_WALL_R = 7

# parameter vector layout
P_TABLE_HW = 0       # table half width
P_TABLE_TOP = 1      # z of table top surface
P_FLOOR_HW = 2
P_OBJ_MASS = 3
P_PALM_HX = 4
P_PALM_HZ = 5
P_FIN_HX = 6
P_FIN_HZ = 7
P_ROBOT_MASS = 8
P_ROBOT_INERTIA = 9
P_AP_MASS = 10       # effective mass of the aperture DOF
P_AP_MAX = 11
P_MU = 12
P_GRAVITY = 13
P_BETA = 14          # positional correction factor
P_SLOP = 15          # penetration slop
P_MARGIN = 16        # contact activation margin
P_MAX_ITERS = 17
P_RESIDUAL_TOL = 18
P_WALLS = 19         # 0/1
P_WALL_HX = 20
P_WALL_HZ = 21
P_GRAVITY_COMP = 22  # 0/1: robot wrench DOFs gravity-compensated
P_DAMP_R_LIN = 23    # viscous damping coefficients (1/s)
P_DAMP_R_ANG = 24
P_DAMP_AP = 25
P_DAMP_O_LIN = 26
P_DAMP_O_ANG = 27
P_GRIP_KV = 28       # aperture velocity-servo gain (N per m/s)
P_GRIP_FMAX = 29     # aperture servo force limit (N)
P_STALL_TOL = 30     # residual accepted when sweeps stall
P_FAIL_TOL = 31      # residual above this is a solver failure
P_WS_XMIN = 32       # palm-center workspace box
P_WS_XMAX = 33
P_WS_ZMIN = 34
P_WS_ZMAX = 35
N_PARAMS = 36

# contact row layout
C_A = 0      # body id A (normal points A -> B)
C_B = 1
C_PX = 2
C_PZ = 3
C_NX = 4
C_NZ = 5
C_PHI = 6    # signed distance, real geometry
C_RELAX = 7  # relaxation offset applied to this pair
C_JN = 8     # accumulated normal impulse
C_JT = 9     # accumulated tangent impulse
NCOLS = 10
MAX_CONTACTS = 48

NDOF = 7


@njit(cache=True)
def body_pose(bid, q, obj_he, params):
    """World pose and half extents of a body: (cx, cz, angle, hx, hz)."""
    if bid == B_TABLE:
        top = params[P_TABLE_TOP]
        return 0.0, 0.5 * top, 0.0, params[P_TABLE_HW], 0.5 * top
    if bid == B_FLOOR:
        return 0.0, -0.05, 0.0, params[P_FLOOR_HW], 0.05
    if bid == B_OBJECT:
        return q[4], q[5], q[6], obj_he[0], obj_he[1]
    if bid == B_PALM:
        return q[0], q[1], q[2], params[P_PALM_HX], params[P_PALM_HZ]
    if bid == B_FINGER_L or bid == B_FINGER_R:
        c = math.cos(q[2])
        s = math.sin(q[2])
        lx = 0.5 * q[3] + params[P_FIN_HX]
        if bid == B_FINGER_L:
            lx = -lx
        lz = -(params[P_PALM_HZ] + params[P_FIN_HZ])
        return (q[0] + c * lx - s * lz, q[1] + s * lx + c * lz, q[2],
                params[P_FIN_HX], params[P_FIN_HZ])
    # walls sit on the table top, flush with the edges
    wx = params[P_TABLE_HW] - params[P_WALL_HX]
    if bid == B_WALL_L:
        wx = -wx
    return wx, params[P_TABLE_TOP] + params[P_WALL_HZ], 0.0, \
        params[P_WALL_HX], params[P_WALL_HZ]


@njit(cache=True)
def _clip_segment(px, pz, npts, gx, gz, offset, out):
    """Keep the part of a 2-point segment with g . p <= offset."""
    n = 0
    d0 = gx * px[0] + gz * pz[0] - offset
    d1 = gx * px[1] + gz * pz[1] - offset
    if d0 <= 0.0:
        out[n, 0] = px[0]
        out[n, 1] = pz[0]
        n += 1
    if npts > 1:
        if d1 <= 0.0:
            out[n, 0] = px[1]
            out[n, 1] = pz[1]
            n += 1
        if d0 * d1 < 0.0:
            t = d0 / (d0 - d1)
            out[n, 0] = px[0] + t * (px[1] - px[0])
            out[n, 1] = pz[0] + t * (pz[1] - pz[0])
            n += 1
    return n


@njit(cache=True)
def box_manifold(pax, paz, anga, hax, haz, pbx, pbz, angb, hbx, hbz,
                 margin, out_pts):
    """SAT contact manifold between two oriented boxes.

    Emits up to two points into ``out_pts`` rows (px, pz, separation).
    Returns (npts, nx, nz) with the normal pointing from box A to box B.
    Points with separation > margin are dropped; margin may be negative
    (used to require deep overlap before a relaxed pair activates).
    """
    ca = math.cos(anga)
    sa = math.sin(anga)
    cb = math.cos(angb)
    sb = math.sin(angb)
    dpx = pbx - pax
    dpz = pbz - paz
    # center offset in each frame
    dax = ca * dpx + sa * dpz
    daz = -sa * dpx + ca * dpz
    dbx = cb * dpx + sb * dpz
    dbz = -sb * dpx + cb * dpz
    cr = math.cos(angb - anga)
    sr = math.sin(angb - anga)
    acr = abs(cr)
    asr = abs(sr)
    # face separations on the four candidate axes
    sep_ax = abs(dax) - hax - (acr * hbx + asr * hbz)
    sep_az = abs(daz) - haz - (asr * hbx + acr * hbz)
    sep_bx = abs(dbx) - hbx - (acr * hax + asr * haz)
    sep_bz = abs(dbz) - hbz - (asr * hax + acr * haz)
    if sep_ax > margin or sep_az > margin:
        return 0, 0.0, 0.0
    if sep_bx > margin or sep_bz > margin:
        return 0, 0.0, 0.0

    # pick the reference axis (greatest separation, biased for coherence)
    rel = 0.95
    absol = 0.01
    axis = 0
    best = sep_ax
    if sep_az > rel * best + absol * haz:
        axis = 1
        best = sep_az
    if sep_bx > rel * best + absol * hbx:
        axis = 2
        best = sep_bx
    if sep_bz > rel * best + absol * hbz:
        axis = 3
        best = sep_bz

    # reference face: outward direction m, center offset along m, side axis
    if axis == 0:
        sgn = 1.0 if dax >= 0.0 else -1.0
        mx = sgn * ca
        mz = sgn * sa
        rcx, rcz, rh = pax, paz, hax
        sx, sz, sh = -sa, ca, haz
        ref_is_a = True
    elif axis == 1:
        sgn = 1.0 if daz >= 0.0 else -1.0
        mx = sgn * -sa
        mz = sgn * ca
        rcx, rcz, rh = pax, paz, haz
        sx, sz, sh = ca, sa, hax
        ref_is_a = True
    elif axis == 2:
        sgn = 1.0 if dbx >= 0.0 else -1.0
        # face of B that looks back toward A
        mx = -sgn * cb
        mz = -sgn * sb
        rcx, rcz, rh = pbx, pbz, hbx
        sx, sz, sh = -sb, cb, hbz
        ref_is_a = False
    else:
        sgn = 1.0 if dbz >= 0.0 else -1.0
        mx = -sgn * -sb
        mz = -sgn * cb
        rcx, rcz, rh = pbx, pbz, hbz
        sx, sz, sh = cb, sb, hbx
        ref_is_a = False

    # incident face on the other box: most anti-parallel to m
    if ref_is_a:
        icx, icz, iang, ihx, ihz = pbx, pbz, angb, hbx, hbz
    else:
        icx, icz, iang, ihx, ihz = pax, paz, anga, hax, haz
    ci = math.cos(iang)
    si = math.sin(iang)
    m_ix = mx * ci + mz * si        # m in incident frame
    m_iz = -mx * si + mz * ci
    segx = np.empty(2)
    segz = np.empty(2)
    if abs(m_ix) > abs(m_iz):
        fs = -1.0 if m_ix > 0.0 else 1.0
        fcx = icx + fs * ihx * ci
        fcz = icz + fs * ihx * si
        ex = -si * ihz
        ez = ci * ihz
    else:
        fs = -1.0 if m_iz > 0.0 else 1.0
        fcx = icx + fs * ihz * -si
        fcz = icz + fs * ihz * ci
        ex = ci * ihx
        ez = si * ihx
    segx[0] = fcx - ex
    segz[0] = fcz - ez
    segx[1] = fcx + ex
    segz[1] = fcz + ez

    # clip to the reference face side planes
    buf1 = np.empty((2, 2))
    off1 = sx * rcx + sz * rcz + sh
    n1 = _clip_segment(segx, segz, 2, sx, sz, off1, buf1)
    if n1 == 0:
        return 0, 0.0, 0.0
    buf2 = np.empty((2, 2))
    off2 = -sx * rcx - sz * rcz + sh
    n2 = _clip_segment(buf1[:, 0], buf1[:, 1], n1, -sx, -sz, off2, buf2)
    if n2 == 0:
        return 0, 0.0, 0.0

    face_d = mx * rcx + mz * rcz + rh
    npts = 0
    for i in range(n2):
        sep = mx * buf2[i, 0] + mz * buf2[i, 1] - face_d
        if sep <= margin:
            out_pts[npts, 0] = buf2[i, 0]
            out_pts[npts, 1] = buf2[i, 1]
            out_pts[npts, 2] = sep
            npts += 1
    if ref_is_a:
        return npts, mx, mz
    return npts, -mx, -mz


# candidate pair table: (body A, body B, relaxed flag, needs walls)
_PAIR_LIST = np.array([
    (B_TABLE, B_OBJECT, 0, 0),
    (B_FLOOR, B_OBJECT, 0, 0),
    (B_WALL_L, B_OBJECT, 0, 1),
    (B_WALL_R, B_OBJECT, 0, 1),
    (B_TABLE, B_PALM, 1, 0),
    (B_TABLE, B_FINGER_L, 1, 0),
    (B_TABLE, B_FINGER_R, 1, 0),
    (B_FLOOR, B_PALM, 0, 0),
    (B_FLOOR, B_FINGER_L, 0, 0),
    (B_FLOOR, B_FINGER_R, 0, 0),
    (B_WALL_L, B_PALM, 0, 1),
    (B_WALL_L, B_FINGER_L, 0, 1),
    (B_WALL_L, B_FINGER_R, 0, 1),
    (B_WALL_R, B_PALM, 0, 1),
    (B_WALL_R, B_FINGER_L, 0, 1),
    (B_WALL_R, B_FINGER_R, 0, 1),
    (B_OBJECT, B_PALM, 0, 0),
    (B_OBJECT, B_FINGER_L, 0, 0),
    (B_OBJECT, B_FINGER_R, 0, 0),
], dtype=np.int64)


@njit(cache=True)
def detect_contacts_kernel(q, obj_he, params, relax, margin, rows):
    """Fill contact rows for every active pair; returns the contact count.

    A pair emits points when signed distance + its relaxation offset is
    <= margin. Only robot-table pairs carry a nonzero offset; for those
    the collision runs against the table translated down by the offset
    (the virtual table), so stored phi is the distance to the real table
    and phi + relax is the distance to the virtual one.
    """
    n = 0
    walls = params[P_WALLS] > 0.5
    pts = np.empty((2, 3))
    for k in range(_PAIR_LIST.shape[0]):
        ia = _PAIR_LIST[k, 0]
        ib = _PAIR_LIST[k, 1]
        if _PAIR_LIST[k, 3] == 1 and not walls:
            continue
        pair_relax = relax if _PAIR_LIST[k, 2] == 1 else 0.0
        ax, az, aa, ahx, ahz = body_pose(ia, q, obj_he, params)
        az -= pair_relax
        bx, bz, ba, bhx, bhz = body_pose(ib, q, obj_he, params)
        cnt, nx, nz = box_manifold(ax, az, aa, ahx, ahz,
                                   bx, bz, ba, bhx, bhz,
                                   margin, pts)
        for i in range(cnt):
            if n >= MAX_CONTACTS:
                break
            rows[n, C_A] = ia
            rows[n, C_B] = ib
            rows[n, C_PX] = pts[i, 0]
            rows[n, C_PZ] = pts[i, 1]
            rows[n, C_NX] = nx
            rows[n, C_NZ] = nz
            rows[n, C_PHI] = pts[i, 2] - pair_relax
            rows[n, C_RELAX] = pair_relax
            rows[n, C_JN] = 0.0
            rows[n, C_JT] = 0.0
            n += 1
    return n


@njit(cache=True)
def _jacobian_row(bid, px, pz, dx, dz, sign, q, out):
    """Accumulate the generalized-velocity jacobian of a contact point.

    (dx, dz) is the direction along which the relative velocity is
    measured; ``sign`` is +1 for body B, -1 for body A.
    """
    if bid == B_OBJECT:
        rx = px - q[4]
        rz = pz - q[5]
        out[4] += sign * dx
        out[5] += sign * dz
        out[6] += sign * (rx * dz - rz * dx)
    elif bid == B_PALM or bid == B_FINGER_L or bid == B_FINGER_R:
        rx = px - q[0]
        rz = pz - q[1]
        out[0] += sign * dx
        out[1] += sign * dz
        out[2] += sign * (rx * dz - rz * dx)
        if bid != B_PALM:
            fa = -0.5 if bid == B_FINGER_L else 0.5
            out[3] += sign * fa * (math.cos(q[2]) * dx + math.sin(q[2]) * dz)
    # static bodies contribute nothing


@njit(cache=True)
def inv_mass_vector(params, obj_he, out):
    m_o = params[P_OBJ_MASS]
    i_o = m_o * (obj_he[0] * obj_he[0] + obj_he[1] * obj_he[1]) / 3.0
    out[0] = 1.0 / params[P_ROBOT_MASS]
    out[1] = out[0]
    out[2] = 1.0 / params[P_ROBOT_INERTIA]
    out[3] = 1.0 / params[P_AP_MASS]
    out[4] = 1.0 / m_o
    out[5] = out[4]
    out[6] = 1.0 / i_o


@njit(cache=True)
def solve_contacts_kernel(rows, n, q, v, obj_he, params, dt):
    """Projected sequential-impulse solve; mutates v and impulse columns.

    Velocity-level complementarity with a speculative bias: each contact
    may approach no faster than closes its gap to the slop distance in
    one step, and never separates slower than rest. The bias is always
    <= 0, so the solve only removes kinetic energy.

    Returns (residual, converged). The residual is the max over contacts
    of the complementarity product |jn * (vn - bias)| and the feasibility
    defect max(0, bias - vn).
    """
    if n == 0:
        return 0.0, True
    invm = np.empty(NDOF)
    inv_mass_vector(params, obj_he, invm)
    mu = params[P_MU]
    max_iters = int(params[P_MAX_ITERS])

    jn = np.zeros((n, NDOF))
    jt = np.zeros((n, NDOF))
    kn = np.empty(n)
    kt = np.empty(n)
    bias = np.empty(n)
    for c in range(n):
        ia = int(rows[c, C_A])
        ib = int(rows[c, C_B])
        px = rows[c, C_PX]
        pz = rows[c, C_PZ]
        nx = rows[c, C_NX]
        nz = rows[c, C_NZ]
        tx = -nz
        tz = nx
        _jacobian_row(ia, px, pz, nx, nz, -1.0, q, jn[c])
        _jacobian_row(ib, px, pz, nx, nz, 1.0, q, jn[c])
        _jacobian_row(ia, px, pz, tx, tz, -1.0, q, jt[c])
        _jacobian_row(ib, px, pz, tx, tz, 1.0, q, jt[c])
        an = 0.0
        at = 0.0
        for d in range(NDOF):
            an += jn[c, d] * jn[c, d] * invm[d]
            at += jt[c, d] * jt[c, d] * invm[d]
        kn[c] = an
        kt[c] = at
        # speculative bias: approach may close the gap to exact touch in
        # one step, never faster; penetrating contacts may not approach
        # at all (the positional pass heals them). Always <= 0, so the
        # solve never injects energy.
        sep_eff = rows[c, C_PHI] + rows[c, C_RELAX]
        b = -sep_eff / dt
        bias[c] = b if b < 0.0 else 0.0

    tol = params[P_RESIDUAL_TOL]
    stall_tol = params[P_STALL_TOL]
    residual = 0.0
    prev_residual = np.inf
    for it in range(max_iters):
        max_dl = 0.0
        for c in range(n):
            if kn[c] <= 0.0:
                continue
            vn = 0.0
            for d in range(NDOF):
                vn += jn[c, d] * v[d]
            dl = (bias[c] - vn) / kn[c]
            acc = rows[c, C_JN] + dl
            if acc < 0.0:
                acc = 0.0
            dl = acc - rows[c, C_JN]
            rows[c, C_JN] = acc
            if abs(dl) > max_dl:
                max_dl = abs(dl)
            for d in range(NDOF):
                v[d] += invm[d] * jn[c, d] * dl

            if kt[c] <= 0.0:
                continue
            vt = 0.0
            for d in range(NDOF):
                vt += jt[c, d] * v[d]
            dlt = -vt / kt[c]
            hi = mu * rows[c, C_JN]
            acc = rows[c, C_JT] + dlt
            if acc > hi:
                acc = hi
            elif acc < -hi:
                acc = -hi
            dlt = acc - rows[c, C_JT]
            rows[c, C_JT] = acc
            if abs(dlt) > max_dl:
                max_dl = abs(dlt)
            for d in range(NDOF):
                v[d] += invm[d] * jt[c, d] * dlt
        done_sweeping = max_dl < 1e-14
        if done_sweeping or (it & 15) == 15 or it == max_iters - 1:
            residual = 0.0
            for c in range(n):
                vn = 0.0
                for d in range(NDOF):
                    vn += jn[c, d] * v[d]
                gap = vn - bias[c]
                e = abs(rows[c, C_JN] * gap)
                if e > residual:
                    residual = e
                if -gap > residual:
                    residual = -gap
            if done_sweeping or residual <= tol:
                break
            # degenerate slowly-separating contacts decay their stale
            # impulse at ~1/sweep rates; accept a stalled residual once
            # it is physically negligible
            if residual <= stall_tol and residual > 0.9 * prev_residual:
                break
            prev_residual = residual
    return residual, residual <= params[P_FAIL_TOL]


@njit(cache=True)
def _positional_pass(rows, n, q, obj_he, params):
    """Push penetration beyond the slop back out, positions only."""
    if n == 0:
        return
    invm = np.empty(NDOF)
    inv_mass_vector(params, obj_he, invm)
    beta = params[P_BETA]
    slop = params[P_SLOP]
    jrow = np.zeros(NDOF)
    sep_adj = np.zeros(n)
    for it in range(2):
        for c in range(n):
            sep_eff = rows[c, C_PHI] + rows[c, C_RELAX] + sep_adj[c]
            pen = -sep_eff - slop
            if pen <= 0.0:
                continue
            for d in range(NDOF):
                jrow[d] = 0.0
            ia = int(rows[c, C_A])
            ib = int(rows[c, C_B])
            px = rows[c, C_PX]
            pz = rows[c, C_PZ]
            nx = rows[c, C_NX]
            nz = rows[c, C_NZ]
            _jacobian_row(ia, px, pz, nx, nz, -1.0, q, jrow)
            _jacobian_row(ib, px, pz, nx, nz, 1.0, q, jrow)
            k = 0.0
            for d in range(NDOF):
                k += jrow[d] * jrow[d] * invm[d]
            if k <= 0.0:
                continue
            push = beta * pen
            if push > 0.05:
                push = 0.05
            p = push / k
            for d in range(NDOF):
                q[d] += invm[d] * jrow[d] * p
            sep_adj[c] += push
    # aperture is a bounded joint, keep it in range after correction
    if q[3] < 0.0:
        q[3] = 0.0
    elif q[3] > params[P_AP_MAX]:
        q[3] = params[P_AP_MAX]


@njit(cache=True)
def speculative_margin(v, params, dt):
    """Upper bound on per-step normal approach, for tunneling-safe detection."""
    reach_r = params[P_PALM_HX] + 0.5 * params[P_AP_MAX] + \
        2.0 * (params[P_FIN_HX] + params[P_FIN_HZ] + params[P_PALM_HZ])
    rel = abs(v[0]) + abs(v[1]) + reach_r * abs(v[2]) + 0.5 * abs(v[3]) + \
        abs(v[4]) + abs(v[5]) + 0.2 * abs(v[6])
    return params[P_MARGIN] + rel * dt


@njit(cache=True)
def substep_kernel(q, v, obj_he, params, applied, relax, dt, rows):
    """One integration substep; mutates q and v in place.

    Order: external/gravity/damping accelerations, contact detection at
    a speculative margin, impulse solve, semi-implicit position update,
    aperture limit clamp, positional penetration correction.

    Returns (n_contacts, residual, converged).
    """
    invm = np.empty(NDOF)
    inv_mass_vector(params, obj_he, invm)
    g = params[P_GRAVITY]
    for d in range(NDOF):
        v[d] += applied[d] * invm[d] * dt
    if params[P_GRAVITY_COMP] < 0.5:
        v[1] -= g * dt
    v[5] -= g * dt
    v[0] /= 1.0 + params[P_DAMP_R_LIN] * dt
    v[1] /= 1.0 + params[P_DAMP_R_LIN] * dt
    v[2] /= 1.0 + params[P_DAMP_R_ANG] * dt
    v[3] /= 1.0 + params[P_DAMP_AP] * dt
    v[4] /= 1.0 + params[P_DAMP_O_LIN] * dt
    v[5] /= 1.0 + params[P_DAMP_O_LIN] * dt
    v[6] /= 1.0 + params[P_DAMP_O_ANG] * dt

    margin = speculative_margin(v, params, dt)
    n = detect_contacts_kernel(q, obj_he, params, relax, margin, rows)
    residual, converged = solve_contacts_kernel(rows, n, q, v, obj_he,
                                                params, dt)

    for d in range(NDOF):
        q[d] += v[d] * dt
    if q[3] < 0.0:
        q[3] = 0.0
        if v[3] < 0.0:
            v[3] = 0.0
    elif q[3] > params[P_AP_MAX]:
        q[3] = params[P_AP_MAX]
        if v[3] > 0.0:
            v[3] = 0.0
    # palm-center workspace box (the floating gripper's joint limits)
    if q[0] < params[P_WS_XMIN]:
        q[0] = params[P_WS_XMIN]
        if v[0] < 0.0:
            v[0] = 0.0
    elif q[0] > params[P_WS_XMAX]:
        q[0] = params[P_WS_XMAX]
        if v[0] > 0.0:
            v[0] = 0.0
    if q[1] < params[P_WS_ZMIN]:
        q[1] = params[P_WS_ZMIN]
        if v[1] < 0.0:
            v[1] = 0.0
    elif q[1] > params[P_WS_ZMAX]:
        q[1] = params[P_WS_ZMAX]
        if v[1] > 0.0:
            v[1] = 0.0

    # refresh separations at the integrated positions for the positional pass
    for c in range(n):
        adv = 0.0
        jrow = np.zeros(NDOF)
        _jacobian_row(int(rows[c, C_A]), rows[c, C_PX], rows[c, C_PZ],
                      rows[c, C_NX], rows[c, C_NZ], -1.0, q, jrow)
        _jacobian_row(int(rows[c, C_B]), rows[c, C_PX], rows[c, C_PZ],
                      rows[c, C_NX], rows[c, C_NZ], 1.0, q, jrow)
        for d in range(NDOF):
            adv += jrow[d] * v[d]
        rows[c, C_PHI] += adv * dt
    _positional_pass(rows, n, q, obj_he, params)
    return n, residual, converged


@njit(cache=True)
def aperture_servo_force(v_ap, rate_cmd, params):
    """Force-limited velocity servo on the aperture DOF."""
    f = params[P_GRIP_KV] * (rate_cmd - v_ap)
    fmax = params[P_GRIP_FMAX]
    if f > fmax:
        f = fmax
    elif f < -fmax:
        f = -fmax
    return f


@njit(cache=True)
def control_step_kernel(q, v, obj_he, params, wrench, rate_cmd, obj_force,
                        relax, dt, substeps, rows):
    """Advance one control step (``substeps`` physics substeps).

    wrench: (fx, fz, torque) on the robot; rate_cmd: commanded aperture
    rate (servoed to a force each substep); obj_force: (fx, fz) applied
    at the object center of mass.

    Returns (ok, finger_force_left, finger_force_right, max_residual)
    where finger forces are the normal contact force each finger exerts
    on the object during the final substep.
    """
    applied = np.zeros(NDOF)
    applied[0] = wrench[0]
    applied[1] = wrench[1]
    applied[2] = wrench[2]
    applied[4] = obj_force[0]
    applied[5] = obj_force[1]
    ok = True
    worst = 0.0
    n = 0
    for s in range(substeps):
        applied[3] = aperture_servo_force(v[3], rate_cmd, params)
        n, residual, converged = substep_kernel(q, v, obj_he, params,
                                                applied, relax, dt, rows)
        if residual > worst:
            worst = residual
        if not converged:
            ok = False
        for d in range(NDOF):
            if not math.isfinite(q[d]) or not math.isfinite(v[d]):
                ok = False
    f_left = 0.0
    f_right = 0.0
    for c in range(n):
        ia = int(rows[c, C_A])
        ib = int(rows[c, C_B])
        if ia == B_OBJECT and ib == B_FINGER_L:
            f_left += rows[c, C_JN] / dt
        elif ia == B_OBJECT and ib == B_FINGER_R:
            f_right += rows[c, C_JN] / dt
    return ok, f_left, f_right, worst


@njit(cache=True)
def step_batch_kernel(qs, vs, obj_hes, params, wrenches, rate_cmds,
                      obj_forces, relaxes, dt, substeps,
                      ok_out, finger_out, residual_out):
    """Advance every environment one control step (single-threaded loop)."""
    n_envs = qs.shape[0]
    rows = np.empty((MAX_CONTACTS, NCOLS))
    for e in range(n_envs):
        ok, fl, fr, worst = control_step_kernel(
            qs[e], vs[e], obj_hes[e], params, wrenches[e], rate_cmds[e],
            obj_forces[e], relaxes[e], dt, substeps, rows)
        ok_out[e] = ok
        finger_out[e, 0] = fl
        finger_out[e, 1] = fr
        residual_out[e] = worst
