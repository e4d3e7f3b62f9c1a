"""Compiled numerical kernels shared by the model, cost, constraint and rollout code.

Everything here works on flat float64 arrays so it can be jitted. The public
modules wrap these with validation, dataclasses and exceptions.

State layout (18):  h_lin[0:3] h_ang[3:6] p_b[6:9] euler[9:12] p_L[12:15] p_R[15:18]
    euler is ZYX: (yaw, pitch, roll).
Input layout (18):  f_L[0:3] m_L[3:6] f_R[6:9] m_R[9:12] v_L[12:15] v_R[15:18]
Parameter layout (83): see ``THETA_BLOCKS``.
"""

import math

import numpy as np
from numba import njit

NX = 18
NU = 18

THETA_BLOCKS = (
    ("theta_hl", 3),
    ("theta_ha", 3),
    ("theta_q", 18),
    ("theta_r", 18),
    ("theta_qf", 18),
    ("theta_base", 6),
    ("theta_com", 2),
    ("theta_sw", 12),
    ("theta_torq", 3),
)
O_HL = 0
O_HA = 3
O_Q = 6
O_R = 24
O_QF = 42
O_BASE = 60
O_COM = 66
O_SW = 68
O_TORQ = 80
NTHETA = 83

# residual layout: 19 inequality entries followed by 20 equality entries
N_INEQ = 19
N_EQ = 20
NRES = N_INEQ + N_EQ
NRES_TERMINAL = 13
R_FRICTION = 0
R_COP = 2
R_WORKSPACE = 6
R_DSAFE = 18
R_SWING_WRENCH = 19
R_STANCE_VEL = 31
R_SWING_VZ = 37

OK = 0
SINGULAR = 1
NONFINITE = 2
DIVERGED = 3

EULER_EPS = 1e-3
PITCH_LIMIT = 0.5 * math.pi - EULER_EPS
DIVERGENCE_BOUND = 1e9

# model_par layout: mass, Ixx, Iyy, Izz, gx, gy, gz, dt
# con_par layout: mu, d_x, d_y, d_safe


@njit(cache=True)
def deriv(x, u, stance, gains, model_par, ext, out):
    mass = model_par[0]
    # linear momentum
    for j in range(3):
        out[j] = gains[j] * (u[j] + u[6 + j]) + mass * model_par[4 + j] + ext[j]
    # angular momentum about the CoM
    rlx = x[12] - x[6]
    rly = x[13] - x[7]
    rlz = x[14] - x[8]
    rrx = x[15] - x[6]
    rry = x[16] - x[7]
    rrz = x[17] - x[8]
    t0 = rly * u[2] - rlz * u[1] + u[3] + rry * u[8] - rrz * u[7] + u[9]
    t1 = rlz * u[0] - rlx * u[2] + u[4] + rrz * u[6] - rrx * u[8] + u[10]
    t2 = rlx * u[1] - rly * u[0] + u[5] + rrx * u[7] - rry * u[6] + u[11]
    out[3] = gains[3] * t0 + ext[3]
    out[4] = gains[4] * t1 + ext[4]
    out[5] = gains[5] * t2 + ext[5]
    for j in range(3):
        out[6 + j] = x[j] / mass
    # ZYX Euler rates from world angular velocity
    w0 = x[3] / model_par[1]
    w1 = x[4] / model_par[2]
    w2 = x[5] / model_par[3]
    cy = math.cos(x[9])
    sy = math.sin(x[9])
    cp = math.cos(x[10])
    tp = math.tan(x[10])
    a = cy * w0 + sy * w1
    b = -sy * w0 + cy * w1
    out[9] = a * tp + w2
    out[10] = b
    out[11] = a / cp
    for j in range(3):
        out[12 + j] = 0.0 if stance[0] else u[12 + j]
        out[15 + j] = 0.0 if stance[1] else u[15 + j]


@njit(cache=True)
def deriv_vjp(x, u, stance, gains, model_par, lam, xbar, ubar, gbar):
    """Accumulate lam^T df/dx, lam^T df/du and lam^T df/dgains."""
    mass = model_par[0]
    for j in range(3):
        ubar[j] += gains[j] * lam[j]
        ubar[6 + j] += gains[j] * lam[j]
        gbar[j] += (u[j] + u[6 + j]) * lam[j]

    rlx = x[12] - x[6]
    rly = x[13] - x[7]
    rlz = x[14] - x[8]
    rrx = x[15] - x[6]
    rry = x[16] - x[7]
    rrz = x[17] - x[8]
    t0 = rly * u[2] - rlz * u[1] + u[3] + rry * u[8] - rrz * u[7] + u[9]
    t1 = rlz * u[0] - rlx * u[2] + u[4] + rrz * u[6] - rrx * u[8] + u[10]
    t2 = rlx * u[1] - rly * u[0] + u[5] + rrx * u[7] - rry * u[6] + u[11]
    gbar[3] += t0 * lam[3]
    gbar[4] += t1 * lam[4]
    gbar[5] += t2 * lam[5]
    m0 = gains[3] * lam[3]
    m1 = gains[4] * lam[4]
    m2 = gains[5] * lam[5]
    # d/df = mu x r
    ubar[0] += m1 * rlz - m2 * rly
    ubar[1] += m2 * rlx - m0 * rlz
    ubar[2] += m0 * rly - m1 * rlx
    ubar[6] += m1 * rrz - m2 * rry
    ubar[7] += m2 * rrx - m0 * rrz
    ubar[8] += m0 * rry - m1 * rrx
    ubar[3] += m0
    ubar[4] += m1
    ubar[5] += m2
    ubar[9] += m0
    ubar[10] += m1
    ubar[11] += m2
    # d/dr = f x mu
    c0 = u[1] * m2 - u[2] * m1
    c1 = u[2] * m0 - u[0] * m2
    c2 = u[0] * m1 - u[1] * m0
    xbar[12] += c0
    xbar[13] += c1
    xbar[14] += c2
    xbar[6] -= c0
    xbar[7] -= c1
    xbar[8] -= c2
    c0 = u[7] * m2 - u[8] * m1
    c1 = u[8] * m0 - u[6] * m2
    c2 = u[6] * m1 - u[7] * m0
    xbar[15] += c0
    xbar[16] += c1
    xbar[17] += c2
    xbar[6] -= c0
    xbar[7] -= c1
    xbar[8] -= c2

    for j in range(3):
        xbar[j] += lam[6 + j] / mass

    w0 = x[3] / model_par[1]
    w1 = x[4] / model_par[2]
    w2 = x[5] / model_par[3]
    cy = math.cos(x[9])
    sy = math.sin(x[9])
    cp = math.cos(x[10])
    sp = math.sin(x[10])
    tp = sp / cp
    a = cy * w0 + sy * w1
    b = -sy * w0 + cy * w1
    l0 = lam[9]
    l1 = lam[10]
    l2 = lam[11]
    ka = l0 * tp + l2 / cp
    wb0 = ka * cy - l1 * sy
    wb1 = ka * sy + l1 * cy
    wb2 = l0
    xbar[3] += wb0 / model_par[1]
    xbar[4] += wb1 / model_par[2]
    xbar[5] += wb2 / model_par[3]
    xbar[9] += l0 * b * tp - l1 * a + l2 * b / cp
    xbar[10] += l0 * a / (cp * cp) + l2 * a * sp / (cp * cp)

    if not stance[0]:
        for j in range(3):
            ubar[12 + j] += lam[12 + j]
    if not stance[1]:
        for j in range(3):
            ubar[15 + j] += lam[15 + j]


@njit(cache=True)
def rk4(x, u, stance, gains, model_par, ext):
    dt = model_par[7]
    h2 = 0.5 * dt
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    k4 = np.empty(NX)
    xs = np.empty(NX)
    deriv(x, u, stance, gains, model_par, ext, k1)
    for j in range(NX):
        xs[j] = x[j] + h2 * k1[j]
    deriv(xs, u, stance, gains, model_par, ext, k2)
    for j in range(NX):
        xs[j] = x[j] + h2 * k2[j]
    deriv(xs, u, stance, gains, model_par, ext, k3)
    for j in range(NX):
        xs[j] = x[j] + dt * k3[j]
    deriv(xs, u, stance, gains, model_par, ext, k4)
    out = np.empty(NX)
    c = dt / 6.0
    for j in range(NX):
        out[j] = x[j] + c * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return out


@njit(cache=True)
def rk4_vjp(x, u, stance, gains, model_par, ext, lam, xbar, ubar, gbar):
    """Reverse pass through one RK4 step; accumulates into xbar/ubar/gbar."""
    dt = model_par[7]
    h2 = 0.5 * dt
    k1 = np.empty(NX)
    k2 = np.empty(NX)
    k3 = np.empty(NX)
    x2 = np.empty(NX)
    x3 = np.empty(NX)
    x4 = np.empty(NX)
    deriv(x, u, stance, gains, model_par, ext, k1)
    for j in range(NX):
        x2[j] = x[j] + h2 * k1[j]
    deriv(x2, u, stance, gains, model_par, ext, k2)
    for j in range(NX):
        x3[j] = x[j] + h2 * k2[j]
    deriv(x3, u, stance, gains, model_par, ext, k3)
    for j in range(NX):
        x4[j] = x[j] + dt * k3[j]

    c6 = dt / 6.0
    c3 = dt / 3.0
    k1b = np.empty(NX)
    k2b = np.empty(NX)
    k3b = np.empty(NX)
    k4b = np.empty(NX)
    for j in range(NX):
        xbar[j] += lam[j]
        k1b[j] = c6 * lam[j]
        k2b[j] = c3 * lam[j]
        k3b[j] = c3 * lam[j]
        k4b[j] = c6 * lam[j]
    v = np.zeros(NX)
    deriv_vjp(x4, u, stance, gains, model_par, k4b, v, ubar, gbar)
    for j in range(NX):
        xbar[j] += v[j]
        k3b[j] += dt * v[j]
        v[j] = 0.0
    deriv_vjp(x3, u, stance, gains, model_par, k3b, v, ubar, gbar)
    for j in range(NX):
        xbar[j] += v[j]
        k2b[j] += h2 * v[j]
        v[j] = 0.0
    deriv_vjp(x2, u, stance, gains, model_par, k2b, v, ubar, gbar)
    for j in range(NX):
        xbar[j] += v[j]
        k1b[j] += h2 * v[j]
        v[j] = 0.0
    deriv_vjp(x, u, stance, gains, model_par, k1b, v, ubar, gbar)
    for j in range(NX):
        xbar[j] += v[j]


@njit(cache=True)
def rk4_jacobians(x, u, stance, gains, model_par, ext):
    """Dense step Jacobians assembled row by row from the reverse pass."""
    jx = np.zeros((NX, NX))
    ju = np.zeros((NX, NU))
    jg = np.zeros((NX, 6))
    lam = np.zeros(NX)
    for r in range(NX):
        lam[:] = 0.0
        lam[r] = 1.0
        xb = np.zeros(NX)
        ub = np.zeros(NU)
        gb = np.zeros(6)
        rk4_vjp(x, u, stance, gains, model_par, ext, lam, xb, ub, gb)
        jx[r, :] = xb
        ju[r, :] = ub
        jg[r, :] = gb
    return jx, ju, jg


# ---------------------------------------------------------------- costs


@njit(cache=True)
def _torque_proxy(x, u, foot):
    o = 6 * foot
    p = 12 + 3 * foot
    rx = x[p] - x[6]
    ry = x[p + 1] - x[7]
    rz = x[p + 2] - x[8]
    t0 = ry * u[o + 2] - rz * u[o + 1] + u[o + 3]
    t1 = rz * u[o] - rx * u[o + 2] + u[o + 4]
    t2 = rx * u[o + 1] - ry * u[o] + u[o + 5]
    return rx, ry, rz, t0, t1, t2


@njit(cache=True)
def stage_cost_terms(x, u, xr, ur, stance, th, model_par, terms):
    """terms <- (trac, base, com, swing, torq)."""
    s = 0.0
    for j in range(NX):
        d = x[j] - xr[j]
        s += th[O_Q + j] * d * d
    for j in range(NU):
        d = u[j] - ur[j]
        s += th[O_R + j] * d * d
    terms[0] = s

    s = 0.0
    for j in range(3):
        e = x[9 + j] - xr[9 + j]
        s += th[O_BASE + j] * e * e
        e = (x[3 + j] - xr[3 + j]) / model_par[1 + j]
        s += th[O_BASE + 3 + j] * e * e
    terms[1] = s

    s = 0.0
    for j in range(2):
        d = x[6 + j] - 0.5 * (x[12 + j] + x[15 + j])
        s += th[O_COM + j] * d * d
    terms[2] = s

    s = 0.0
    for i in range(2):
        if not stance[i]:
            for j in range(3):
                e = x[12 + 3 * i + j] - xr[12 + 3 * i + j]
                s += th[O_SW + 6 * i + j] * e * e
                e = u[12 + 3 * i + j] - ur[12 + 3 * i + j]
                s += th[O_SW + 6 * i + 3 + j] * e * e
    terms[3] = s

    s = 0.0
    for i in range(2):
        if stance[i]:
            _, _, _, t0, t1, t2 = _torque_proxy(x, u, i)
            s += th[O_TORQ] * t0 * t0 + th[O_TORQ + 1] * t1 * t1 + th[O_TORQ + 2] * t2 * t2
    terms[4] = s


@njit(cache=True)
def stage_cost_grad(x, u, xr, ur, stance, th, model_par, gx, gu, gth):
    """Accumulate exact partials of the stage cost."""
    for j in range(NX):
        d = x[j] - xr[j]
        gx[j] += 2.0 * th[O_Q + j] * d
        gth[O_Q + j] += d * d
    for j in range(NU):
        d = u[j] - ur[j]
        gu[j] += 2.0 * th[O_R + j] * d
        gth[O_R + j] += d * d

    for j in range(3):
        e = x[9 + j] - xr[9 + j]
        gx[9 + j] += 2.0 * th[O_BASE + j] * e
        gth[O_BASE + j] += e * e
        inv = 1.0 / model_par[1 + j]
        e = (x[3 + j] - xr[3 + j]) * inv
        gx[3 + j] += 2.0 * th[O_BASE + 3 + j] * e * inv
        gth[O_BASE + 3 + j] += e * e

    for j in range(2):
        d = x[6 + j] - 0.5 * (x[12 + j] + x[15 + j])
        c = 2.0 * th[O_COM + j] * d
        gx[6 + j] += c
        gx[12 + j] -= 0.5 * c
        gx[15 + j] -= 0.5 * c
        gth[O_COM + j] += d * d

    for i in range(2):
        if not stance[i]:
            for j in range(3):
                k = 12 + 3 * i + j
                e = x[k] - xr[k]
                gx[k] += 2.0 * th[O_SW + 6 * i + j] * e
                gth[O_SW + 6 * i + j] += e * e
                e = u[k] - ur[k]
                gu[k] += 2.0 * th[O_SW + 6 * i + 3 + j] * e
                gth[O_SW + 6 * i + 3 + j] += e * e

    for i in range(2):
        if stance[i]:
            rx, ry, rz, t0, t1, t2 = _torque_proxy(x, u, i)
            gth[O_TORQ] += t0 * t0
            gth[O_TORQ + 1] += t1 * t1
            gth[O_TORQ + 2] += t2 * t2
            m0 = 2.0 * th[O_TORQ] * t0
            m1 = 2.0 * th[O_TORQ + 1] * t1
            m2 = 2.0 * th[O_TORQ + 2] * t2
            o = 6 * i
            p = 12 + 3 * i
            f0 = u[o]
            f1 = u[o + 1]
            f2 = u[o + 2]
            gu[o] += m1 * rz - m2 * ry
            gu[o + 1] += m2 * rx - m0 * rz
            gu[o + 2] += m0 * ry - m1 * rx
            gu[o + 3] += m0
            gu[o + 4] += m1
            gu[o + 5] += m2
            c0 = f1 * m2 - f2 * m1
            c1 = f2 * m0 - f0 * m2
            c2 = f0 * m1 - f1 * m0
            gx[p] += c0
            gx[p + 1] += c1
            gx[p + 2] += c2
            gx[6] -= c0
            gx[7] -= c1
            gx[8] -= c2


@njit(cache=True)
def terminal_cost(x, xr, th):
    s = 0.0
    for j in range(NX):
        d = x[j] - xr[j]
        s += th[O_QF + j] * d * d
    return s


@njit(cache=True)
def terminal_cost_grad(x, xr, th, gx, gth):
    for j in range(NX):
        d = x[j] - xr[j]
        gx[j] += 2.0 * th[O_QF + j] * d
        gth[O_QF + j] += d * d


# ---------------------------------------------------------- constraints


@njit(cache=True)
def _workspace_pre(x, foot, qmin, qmax, pre, offset):
    p = 12 + 3 * foot
    vx = x[p] - x[6]
    vy = x[p + 1] - x[7]
    vz = x[p + 2] - x[8]
    cy = math.cos(x[9])
    sy = math.sin(x[9])
    d0 = cy * vx + sy * vy
    d1 = -sy * vx + cy * vy
    d2 = vz
    pre[offset] = d0 - qmax[foot, 0]
    pre[offset + 1] = d1 - qmax[foot, 1]
    pre[offset + 2] = d2 - qmax[foot, 2]
    pre[offset + 3] = qmin[foot, 0] - d0
    pre[offset + 4] = qmin[foot, 1] - d1
    pre[offset + 5] = qmin[foot, 2] - d2


@njit(cache=True)
def _foot_distance(x):
    d0 = x[12] - x[15]
    d1 = x[13] - x[16]
    d2 = x[14] - x[17]
    return d0, d1, d2, math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)


@njit(cache=True)
def residual_pre(x, u, ur, stance, con_par, qmin, qmax, pre):
    """Constraint values before the [.]_+ clip; inactive entries are 0."""
    mu = con_par[0]
    dx = con_par[1]
    dy = con_par[2]
    for i in range(2):
        o = 6 * i
        if stance[i]:
            ft = math.sqrt(u[o] * u[o] + u[o + 1] * u[o + 1])
            pre[R_FRICTION + i] = ft - mu * u[o + 2]
            pre[R_COP + 2 * i] = abs(u[o + 3]) - dy * u[o + 2]
            pre[R_COP + 2 * i + 1] = abs(u[o + 4]) - dx * u[o + 2]
        else:
            pre[R_FRICTION + i] = 0.0
            pre[R_COP + 2 * i] = 0.0
            pre[R_COP + 2 * i + 1] = 0.0
    _workspace_pre(x, 0, qmin, qmax, pre, R_WORKSPACE)
    _workspace_pre(x, 1, qmin, qmax, pre, R_WORKSPACE + 6)
    _, _, _, dist = _foot_distance(x)
    pre[R_DSAFE] = con_par[3] - dist
    for i in range(2):
        for j in range(6):
            pre[R_SWING_WRENCH + 6 * i + j] = 0.0 if stance[i] else u[6 * i + j]
        for j in range(3):
            pre[R_STANCE_VEL + 3 * i + j] = u[12 + 3 * i + j] if stance[i] else 0.0
        if stance[i]:
            pre[R_SWING_VZ + i] = 0.0
        else:
            pre[R_SWING_VZ + i] = u[14 + 3 * i] - ur[14 + 3 * i]


@njit(cache=True)
def clip_residuals(pre, n_ineq, out):
    for k in range(pre.shape[0]):
        if k < n_ineq:
            out[k] = pre[k] if pre[k] > 0.0 else 0.0
        else:
            out[k] = pre[k]


@njit(cache=True)
def terminal_residual_pre(x, con_par, qmin, qmax, pre):
    _workspace_pre(x, 0, qmin, qmax, pre, 0)
    _workspace_pre(x, 1, qmin, qmax, pre, 6)
    _, _, _, dist = _foot_distance(x)
    pre[12] = con_par[3] - dist


@njit(cache=True)
def weighted_square(r, w):
    s = 0.0
    for k in range(r.shape[0]):
        s += w[k] * r[k] * r[k]
    return s


@njit(cache=True)
def _workspace_grad(x, foot, c, offset, gx):
    # c[offset:offset+6] = dphi/dpre for (upper x3, lower x3)
    p = 12 + 3 * foot
    vx = x[p] - x[6]
    vy = x[p + 1] - x[7]
    cy = math.cos(x[9])
    sy = math.sin(x[9])
    d0 = cy * vx + sy * vy
    d1 = -sy * vx + cy * vy
    g0 = c[offset] - c[offset + 3]
    g1 = c[offset + 1] - c[offset + 4]
    g2 = c[offset + 2] - c[offset + 5]
    v0 = cy * g0 - sy * g1
    v1 = sy * g0 + cy * g1
    gx[p] += v0
    gx[p + 1] += v1
    gx[p + 2] += g2
    gx[6] -= v0
    gx[7] -= v1
    gx[8] -= g2
    gx[9] += g0 * d1 - g1 * d0


@njit(cache=True)
def _dsafe_grad(x, c, gx):
    d0, d1, d2, dist = _foot_distance(x)
    if dist > 0.0 and c != 0.0:
        s = c / dist
        gx[12] -= s * d0
        gx[13] -= s * d1
        gx[14] -= s * d2
        gx[15] += s * d0
        gx[16] += s * d1
        gx[17] += s * d2


@njit(cache=True)
def penalty_grad(x, u, ur, stance, con_par, qmin, qmax, w, gx, gu):
    """Accumulate partials of sum_k w_k r_k^2 (subgradient 0 at the clip kink)."""
    pre = np.empty(NRES)
    residual_pre(x, u, ur, stance, con_par, qmin, qmax, pre)
    c = np.empty(NRES)
    for k in range(NRES):
        r = pre[k]
        if k < N_INEQ and r < 0.0:
            r = 0.0
        c[k] = 2.0 * w[k] * r
    mu = con_par[0]
    dx = con_par[1]
    dy = con_par[2]
    for i in range(2):
        if stance[i]:
            o = 6 * i
            cf = c[R_FRICTION + i]
            if cf != 0.0:
                ft = math.sqrt(u[o] * u[o] + u[o + 1] * u[o + 1])
                if ft > 0.0:
                    gu[o] += cf * u[o] / ft
                    gu[o + 1] += cf * u[o + 1] / ft
                gu[o + 2] -= cf * mu
            ca = c[R_COP + 2 * i]
            if ca != 0.0:
                if u[o + 3] > 0.0:
                    gu[o + 3] += ca
                elif u[o + 3] < 0.0:
                    gu[o + 3] -= ca
                gu[o + 2] -= ca * dy
            cb = c[R_COP + 2 * i + 1]
            if cb != 0.0:
                if u[o + 4] > 0.0:
                    gu[o + 4] += cb
                elif u[o + 4] < 0.0:
                    gu[o + 4] -= cb
                gu[o + 2] -= cb * dx
    _workspace_grad(x, 0, c, R_WORKSPACE, gx)
    _workspace_grad(x, 1, c, R_WORKSPACE + 6, gx)
    _dsafe_grad(x, c[R_DSAFE], gx)
    for i in range(2):
        if stance[i]:
            for j in range(3):
                gu[12 + 3 * i + j] += c[R_STANCE_VEL + 3 * i + j]
        else:
            for j in range(6):
                gu[6 * i + j] += c[R_SWING_WRENCH + 6 * i + j]
            gu[14 + 3 * i] += c[R_SWING_VZ + i]


@njit(cache=True)
def terminal_penalty_grad(x, con_par, qmin, qmax, wf, gx):
    pre = np.empty(NRES_TERMINAL)
    terminal_residual_pre(x, con_par, qmin, qmax, pre)
    c = np.empty(NRES_TERMINAL)
    for k in range(NRES_TERMINAL):
        r = pre[k] if pre[k] > 0.0 else 0.0
        c[k] = 2.0 * wf[k] * r
    _workspace_grad(x, 0, c, 0, gx)
    _workspace_grad(x, 1, c, 6, gx)
    _dsafe_grad(x, c[12], gx)


# -------------------------------------------------------------- rollouts


@njit(cache=True)
def _check_state(x):
    for j in range(NX):
        v = x[j]
        if not math.isfinite(v):
            return NONFINITE
    for j in range(NX):
        if abs(x[j]) > DIVERGENCE_BOUND:
            return DIVERGED
    if abs(x[10]) >= PITCH_LIMIT:
        return SINGULAR
    return OK


@njit(cache=True)
def rollout(th, x0, U, ST, XR, UR, model_par, con_par, qmin, qmax, w, wf, want_grad):
    """Roll the parameterized model along U and accumulate cost and penalties.

    Returns (status, fail_stage, X, stage_costs, stage_pens, terminal, terminal_pen,
    grad_theta, grad_U). Gradients are only filled when ``want_grad``.
    """
    n = U.shape[0]
    X = np.empty((n + 1, NX))
    stage_costs = np.zeros(n)
    stage_pens = np.zeros(n)
    grad_th = np.zeros(NTHETA)
    grad_u = np.zeros((n, NU))
    gains = th[0:6]
    ext = np.zeros(6)
    terms = np.empty(5)
    pre = np.empty(NRES)
    res = np.empty(NRES)
    pre_f = np.empty(NRES_TERMINAL)
    res_f = np.empty(NRES_TERMINAL)

    X[0, :] = x0
    for i in range(n):
        status = _check_state(X[i])
        if status != OK:
            return status, i, X, stage_costs, stage_pens, 0.0, 0.0, grad_th, grad_u
        stage_cost_terms(X[i], U[i], XR[i], UR[i], ST[i], th, model_par, terms)
        stage_costs[i] = terms[0] + terms[1] + terms[2] + terms[3] + terms[4]
        residual_pre(X[i], U[i], UR[i], ST[i], con_par, qmin, qmax, pre)
        clip_residuals(pre, N_INEQ, res)
        stage_pens[i] = weighted_square(res, w)
        X[i + 1, :] = rk4(X[i], U[i], ST[i], gains, model_par, ext)
    status = _check_state(X[n])
    if status != OK:
        return status, n, X, stage_costs, stage_pens, 0.0, 0.0, grad_th, grad_u
    term = terminal_cost(X[n], XR[n], th)
    terminal_residual_pre(X[n], con_par, qmin, qmax, pre_f)
    clip_residuals(pre_f, NRES_TERMINAL, res_f)
    term_pen = weighted_square(res_f, wf)

    if want_grad:
        lam = np.zeros(NX)
        terminal_cost_grad(X[n], XR[n], th, lam, grad_th)
        terminal_penalty_grad(X[n], con_par, qmin, qmax, wf, lam)
        gb = np.zeros(6)
        for i in range(n - 1, -1, -1):
            xb = np.zeros(NX)
            ub = np.zeros(NU)
            rk4_vjp(X[i], U[i], ST[i], gains, model_par, ext, lam, xb, ub, gb)
            stage_cost_grad(X[i], U[i], XR[i], UR[i], ST[i], th, model_par, xb, ub, grad_th)
            penalty_grad(X[i], U[i], UR[i], ST[i], con_par, qmin, qmax, w, xb, ub)
            grad_u[i, :] = ub
            lam = xb
        for j in range(6):
            grad_th[j] += gb[j]
    return OK, -1, X, stage_costs, stage_pens, term, term_pen, grad_th, grad_u


@njit(cache=True)
def rollout_value(th, x0, U, ST, XR, UR, model_par, con_par, qmin, qmax, w, wf):
    """Objective value only (line searches); returns (status, value)."""
    n = U.shape[0]
    gains = th[0:6]
    ext = np.zeros(6)
    terms = np.empty(5)
    pre = np.empty(NRES)
    res = np.empty(NRES)
    x = x0.copy()
    total = 0.0
    for i in range(n):
        status = _check_state(x)
        if status != OK:
            return status, np.inf
        stage_cost_terms(x, U[i], XR[i], UR[i], ST[i], th, model_par, terms)
        total += terms[0] + terms[1] + terms[2] + terms[3] + terms[4]
        residual_pre(x, U[i], UR[i], ST[i], con_par, qmin, qmax, pre)
        clip_residuals(pre, N_INEQ, res)
        total += weighted_square(res, w)
        x = rk4(x, U[i], ST[i], gains, model_par, ext)
    status = _check_state(x)
    if status != OK:
        return status, np.inf
    total += terminal_cost(x, XR[n], th)
    pre_f = np.empty(NRES_TERMINAL)
    res_f = np.empty(NRES_TERMINAL)
    terminal_residual_pre(x, con_par, qmin, qmax, pre_f)
    clip_residuals(pre_f, NRES_TERMINAL, res_f)
    total += weighted_square(res_f, wf)
    return OK, total


@njit(cache=True)
def batch_rollouts(th, S, A, ST, XR, UR, anchors, horizon, model_par, con_par, qmin, qmax, w, wf, want_grad):
    """Evaluate Q^MPC (and its theta-gradient) at many anchors of a packed dataset.

    Row ``g`` of the packed arrays is an absolute time index; an anchor ``g`` uses
    S[g], A[g:g+N], ST[g:g+N], XR[g:g+N+1], UR[g:g+N].
    """
    b = anchors.shape[0]
    values = np.zeros(b)
    grads = np.zeros((b, NTHETA))
    status = np.zeros(b, dtype=np.int64)
    fail = np.full(b, -1, dtype=np.int64)
    for k in range(b):
        g = anchors[k]
        st, fi, _, sc, sp, term, tpen, gth, _ = rollout(
            th, S[g], A[g:g + horizon], ST[g:g + horizon], XR[g:g + horizon + 1],
            UR[g:g + horizon], model_par, con_par, qmin, qmax, w, wf, want_grad)
        status[k] = st
        fail[k] = fi
        if st != OK:
            continue
        total = term + tpen
        for i in range(horizon):
            total += sc[i] + sp[i]
        values[k] = total
        if want_grad:
            grads[k, :] = gth
    return status, fail, values, grads
