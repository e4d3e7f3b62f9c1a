"""Finite-difference audits of the analytic Q^MPC gradient."""

import numpy as np

from . import _kernels as K
from .constraints import ConstraintConfig
from .model import DynParams, standing_state
from .objective import CostParams
from .valuation import P, ParamVector, Segment, q_mpc, q_mpc_gradient

KINK_MARGIN = 1e-3


def relative_error(g, fd):
    """Entrywise ``|g - fd| / max(|g|, |fd|, floor)`` with a floor tied to the gradient scale."""
    g = np.asarray(g, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    floor = 1e-8 * max(float(np.max(np.abs(g))), float(np.max(np.abs(fd))), 1e-300)
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)


def fd_theta_gradient(value_fn, theta: ParamVector, gain_step=1e-3, weight_step=1.0):
    """Central differences over the flat parameter vector.

    ``Q^MPC`` is linear in every cost weight, so those entries use a large step
    (no truncation error, little cancellation). Gains use a Richardson-extrapolated
    central difference.
    """
    base = theta.to_array()
    f0 = None
    out = np.empty(P)
    for j in range(P):
        def at(h):
            arr = base.copy()
            arr[j] += h
            return value_fn(theta.with_array(arr))

        def central(h):
            return (at(h) - at(-h)) / (2 * h)
        if j < 6:
            h = gain_step * max(1.0, abs(base[j]))
            out[j] = (4.0 * central(h / 2) - central(h)) / 3.0
            continue
        h = weight_step * max(1.0, abs(base[j]))
        if base[j] >= h:
            out[j] = central(h)
        else:
            # weights must stay nonnegative; linearity makes a one-sided step exact too
            f0 = value_fn(theta) if f0 is None else f0
            out[j] = (at(h) - f0) / h
    return out


def pre_residual_margin(theta: ParamVector, s, segment: Segment, dyn=None, constraints=None):
    """Smallest |pre-clip inequality value| along the rollout (kink distance)."""
    dyn = dyn or DynParams()
    constraints = constraints or ConstraintConfig()
    ev = q_mpc(theta, s, segment, dyn, constraints)
    cp, qmin, qmax = constraints.con_par, constraints.q_min, constraints.q_max
    pre = np.empty(K.NRES)
    pre_f = np.empty(K.NRES_TERMINAL)
    margin = np.inf
    for i in range(segment.horizon):
        K.residual_pre(ev.states[i], segment.actions[i], segment.u_refs[i], segment.phases[i],
                       cp, qmin, qmax, pre)
        active = np.ones(K.N_INEQ, dtype=bool)
        for foot in (0, 1):
            if not segment.phases[i][foot]:
                active[[K.R_FRICTION + foot, K.R_COP + 2 * foot, K.R_COP + 2 * foot + 1]] = False
        margin = min(margin, float(np.min(np.abs(pre[:K.N_INEQ][active]))))
    K.terminal_residual_pre(ev.states[-1], cp, qmin, qmax, pre_f)
    return min(margin, float(np.min(np.abs(pre_f))))


def random_instance(rng, horizon=20, dyn: DynParams = None, constraints=None,
                    margin=KINK_MARGIN, max_tries=200):
    """Random (theta, s, segment) whose rollout keeps every inequality ``margin`` from its kink.

    Phases follow a walking-like pattern and some actions violate the friction
    and CoP limits, so penalty gradients are exercised too.
    """
    dyn = dyn or DynParams()
    for _ in range(max_tries):
        cost = CostParams(theta_q=rng.uniform(0.1, 10, 18), theta_r=rng.uniform(1e-4, 1e-2, 18),
                          theta_qf=rng.uniform(0.1, 10, 18), theta_base=rng.uniform(0.1, 5, 6),
                          theta_com=rng.uniform(0.1, 10, 2), theta_sw=rng.uniform(0.1, 10, 12),
                          theta_torq=rng.uniform(1e-4, 1e-2, 3))
        theta = ParamVector(rng.uniform(0.7, 1.3, 3), rng.uniform(0.7, 1.3, 3), cost)
        s = standing_state(0.75, 0.08)
        s[0:6] += rng.normal(0, 0.5, 6)
        s[6:9] += rng.normal(0, 0.01, 3)
        s[9:12] += rng.normal(0, 0.03, 3)
        swing_foot = int(rng.integers(0, 2))
        k_sw = int(rng.integers(0, horizon))
        phases = np.ones((horizon, 2), dtype=bool)
        phases[k_sw:min(horizon, k_sw + 8), swing_foot] = False
        U = np.zeros((horizon, 18))
        weight = dyn.mass * 9.81
        for i in range(horizon):
            n = phases[i].sum()
            for foot in (0, 1):
                o = 6 * foot
                if phases[i][foot]:
                    U[i, o + 2] = weight / n + rng.normal(0, 10)
                    U[i, o:o + 2] = rng.normal(0, 0.3 * U[i, o + 2], 2)
                    U[i, o + 3:o + 6] = rng.normal(0, 0.03 * U[i, o + 2], 3)
                    U[i, 12 + 3 * foot:15 + 3 * foot] = rng.normal(0, 0.05, 3)
                else:
                    U[i, 12 + 3 * foot:15 + 3 * foot] = rng.normal(0, 0.3, 3)
                    U[i, o:o + 6] = rng.normal(0, 1.0, 6)
        XR = np.tile(standing_state(0.75, 0.08), (horizon + 1, 1)) + rng.normal(0, 0.01, (horizon + 1, 18))
        UR = np.zeros((horizon, 18))
        UR[:, [2, 8]] = weight / 2
        UR[:, 12:] = rng.normal(0, 0.2, (horizon, 6))
        seg = Segment(U, phases, XR, UR)
        if pre_residual_margin(theta, s, seg, dyn, constraints) > margin:
            return theta, s, seg
    raise RuntimeError("could not sample a kink-free instance")


def audit(theta: ParamVector, s, segment: Segment, dyn=None, constraints=None):
    """(max relative error, analytic gradient, finite-difference gradient)."""
    g, _ = q_mpc_gradient(theta, s, segment, dyn, constraints)
    fd = fd_theta_gradient(lambda th: q_mpc(th, s, segment, dyn, constraints).value, theta)
    return float(np.max(relative_error(g, fd))), g, fd
