"""Constraint residuals, quadratic violation penalties and the input projection.

Residual layout (39 stage entries): friction cone per foot, CoP box per foot,
workspace box per foot (upper then lower bounds in the yaw-aligned base frame),
inter-foot distance, then the equality block: swing wrench, stance foot
velocity, swing normal-velocity tracking. Entries that do not apply in the
current phase are 0. The terminal set keeps the state-only entries (13).
"""

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import _kernels as K
from .exceptions import ConfigError
from .model import as_phase, as_vector


def _entry_names():
    names = [f"friction_{f}" for f in "LR"]
    names += [f"cop_{ax}_{f}" for f in "LR" for ax in ("x", "y")]
    for f in "LR":
        names += [f"workspace_max_{ax}_{f}" for ax in "xyz"]
        names += [f"workspace_min_{ax}_{f}" for ax in "xyz"]
    names += ["foot_distance"]
    names += [f"swing_wrench_{c}_{f}" for f in "LR" for c in ("fx", "fy", "fz", "mx", "my", "mz")]
    names += [f"stance_velocity_{ax}_{f}" for f in "LR" for ax in "xyz"]
    names += [f"swing_vz_{f}" for f in "LR"]
    return names


RESIDUAL_NAMES = _entry_names()
TERMINAL_RESIDUAL_NAMES = RESIDUAL_NAMES[K.R_WORKSPACE:K.R_DSAFE + 1]
INPUT_ONLY_ENTRIES = np.r_[K.R_FRICTION:K.R_WORKSPACE, K.R_SWING_WRENCH:K.R_SWING_VZ]
STATE_ENTRIES = np.r_[K.R_WORKSPACE:K.R_DSAFE + 1]
TRACKING_ENTRIES = np.r_[K.R_SWING_VZ:K.NRES]


def _default_qmin():
    return np.array([[-0.45, -0.05, -1.0], [-0.45, -0.35, -1.0]])


def _default_qmax():
    return np.array([[0.45, 0.35, -0.45], [0.45, 0.05, -0.45]])


@dataclass
class ConstraintConfig:
    mu: float = 0.7
    d_x: float = 0.10
    d_y: float = 0.05
    d_safe: float = 0.12
    q_min: np.ndarray = field(default_factory=_default_qmin)
    q_max: np.ndarray = field(default_factory=_default_qmax)
    f_z_min: float = 0.0

    def __post_init__(self):
        self.q_min = np.asarray(self.q_min, dtype=np.float64).reshape(2, 3)
        self.q_max = np.asarray(self.q_max, dtype=np.float64).reshape(2, 3)
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        if not (self.d_x > 0 and self.d_y > 0 and self.d_safe > 0):
            raise ConfigError("foot dimensions and d_safe must be positive")
        if np.any(self.q_min >= self.q_max):
            raise ConfigError("q_min must be below q_max elementwise")
        if self.f_z_min < 0:
            raise ConfigError("f_z_min must be nonnegative")

    @property
    def con_par(self):
        return np.array([self.mu, self.d_x, self.d_y, self.d_safe])

    def to_dict(self):
        return {"mu": self.mu, "d_x": self.d_x, "d_y": self.d_y, "d_safe": self.d_safe,
                "q_min": self.q_min.tolist(), "q_max": self.q_max.tolist(), "f_z_min": self.f_z_min}


@dataclass
class ResidualVector:
    values: np.ndarray
    names: List[str]
    n_ineq: int

    @property
    def inequality(self):
        return self.values[:self.n_ineq]

    @property
    def equality(self):
        return self.values[self.n_ineq:]

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))


def default_penalty_weights(inequality=1e3, equality=1e4, terminal=1e3):
    """Stage weights ``W`` (39) and terminal weights ``W_f`` (13)."""
    w = np.empty(K.NRES)
    w[:K.N_INEQ] = inequality
    w[K.N_INEQ:] = equality
    return w, np.full(K.NRES_TERMINAL, float(terminal))


def residuals(x, u, phase, ref, cfg: ConstraintConfig) -> ResidualVector:
    """Stage residuals; ``ref`` supplies the swing normal-velocity reference."""
    x = as_vector(x, name="state")
    u = as_vector(u, name="input")
    pre = np.empty(K.NRES)
    K.residual_pre(x, u, ref.u_ref, as_phase(phase), cfg.con_par, cfg.q_min, cfg.q_max, pre)
    out = np.empty(K.NRES)
    K.clip_residuals(pre, K.N_INEQ, out)
    return ResidualVector(out, RESIDUAL_NAMES, K.N_INEQ)


def terminal_residuals(x, cfg: ConstraintConfig) -> ResidualVector:
    x = as_vector(x, name="state")
    pre = np.empty(K.NRES_TERMINAL)
    K.terminal_residual_pre(x, cfg.con_par, cfg.q_min, cfg.q_max, pre)
    out = np.empty(K.NRES_TERMINAL)
    K.clip_residuals(pre, K.NRES_TERMINAL, out)
    return ResidualVector(out, TERMINAL_RESIDUAL_NAMES, K.NRES_TERMINAL)


def penalty(r, weights):
    """``||r||_W^2`` for a residual vector (or raw array) and positive diagonal weights."""
    values = r.values if isinstance(r, ResidualVector) else np.asarray(r, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != values.shape:
        raise ConfigError("penalty weights must match the residual layout")
    if np.any(weights <= 0):
        raise ConfigError("penalty weights must be positive")
    if not np.all(np.isfinite(values)):
        from .exceptions import NonFinite
        raise NonFinite("non-finite residuals")
    return float(K.weighted_square(values, weights))


def penalty_partials(x, u, phase, ref, cfg: ConstraintConfig, weights):
    """Gradient of ``penalty(residuals(x, u, ...), weights)`` w.r.t. ``x`` and ``u``."""
    x = as_vector(x, name="state")
    u = as_vector(u, name="input")
    gx = np.zeros(18)
    gu = np.zeros(18)
    K.penalty_grad(x, u, ref.u_ref, as_phase(phase), cfg.con_par, cfg.q_min, cfg.q_max,
                   np.asarray(weights, dtype=np.float64), gx, gu)
    return gx, gu


def _cone_scale(fx, fy, limit):
    ft = math.sqrt(fx * fx + fy * fy)
    if ft <= limit:
        return fx, fy
    s = limit / ft
    gx, gy = fx * s, fy * s
    # shave the scale until the rounded result is inside, so a second pass is a no-op
    while math.sqrt(gx * gx + gy * gy) > limit:
        s = math.nextafter(s, 0.0)
        gx, gy = fx * s, fy * s
    return gx, gy


def project_input(u, phase, cfg: ConstraintConfig):
    """Map ``u`` onto the hard input-constraint set.

    Swing wrenches are zeroed; for stance feet the normal force is clamped to
    ``f_z_min``, the tangential force is scaled radially into the cone at that
    normal force, CoP moments are clipped and the foot velocity is zeroed.
    """
    u = np.array(u, dtype=np.float64)
    phase = as_phase(phase)
    for i in range(2):
        o = 6 * i
        if phase[i]:
            fz = u[o + 2] if u[o + 2] > cfg.f_z_min else cfg.f_z_min
            u[o + 2] = fz
            u[o], u[o + 1] = _cone_scale(u[o], u[o + 1], cfg.mu * fz)
            lim = cfg.d_y * fz
            u[o + 3] = min(max(u[o + 3], -lim), lim)
            lim = cfg.d_x * fz
            u[o + 4] = min(max(u[o + 4], -lim), lim)
            u[12 + 3 * i:15 + 3 * i] = 0.0
        else:
            u[o:o + 6] = 0.0
    return u


def project_sequence(U, phases, cfg: ConstraintConfig):
    return np.stack([project_input(u, ph, cfg) for u, ph in zip(U, phases)])


def input_violation(u, phase, cfg: ConstraintConfig):
    """Largest hard input-constraint residual (friction, CoP, swing wrench, stance velocity)."""
    pre = np.empty(K.NRES)
    x = np.zeros(18)
    x[12:15] = [0.0, cfg.d_safe, 0.0]
    K.residual_pre(x, np.asarray(u, dtype=np.float64), np.zeros(18), as_phase(phase),
                   cfg.con_par, cfg.q_min, cfg.q_max, pre)
    vals = np.concatenate([np.maximum(pre[K.R_FRICTION:K.R_WORKSPACE], 0.0),
                           np.abs(pre[K.R_SWING_WRENCH:K.R_SWING_VZ])])
    return float(vals.max())
