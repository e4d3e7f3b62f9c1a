"""Reduced centroidal dynamics of a point-foot biped with learnable momentum gains.

The base frame coincides with the CoM, so the centroidal momentum matrix is
``blockdiag(M*I3, I_diag)`` and limb momentum is neglected. The two feet's
Cartesian positions play the role of joint coordinates and the commanded foot
velocities the role of joint velocities, which keeps ``x`` and ``u`` at 18
entries each.
"""

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from . import _kernels as K
from .exceptions import ConfigError, Diverged, EulerSingular, NonFinite

DT = 0.01

STATE_SLICES = {
    "h_lin": slice(0, 3),
    "h_ang": slice(3, 6),
    "p_b": slice(6, 9),
    "theta_b": slice(9, 12),
    "p_L": slice(12, 15),
    "p_R": slice(15, 18),
}
INPUT_SLICES = {
    "f_L": slice(0, 3),
    "m_L": slice(3, 6),
    "f_R": slice(6, 9),
    "m_R": slice(9, 12),
    "v_L": slice(12, 15),
    "v_R": slice(15, 18),
}
STATE_NAMES = [f"{blk}_{ax}" for blk in STATE_SLICES for ax in
               (("yaw", "pitch", "roll") if blk == "theta_b" else ("x", "y", "z"))]
INPUT_NAMES = [f"{blk}_{ax}" for blk in INPUT_SLICES for ax in "xyz"]

Phase = Tuple[bool, bool]
STANCE = "stance"
SWING = "swing"


def as_vector(v, size=18, name="vector"):
    """Return ``v`` as a float64 vector of ``size`` entries, raising NonFinite on NaN/inf."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (size,):
        raise ConfigError(f"{name} must have shape ({size},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} has non-finite entries")
    return arr


def as_phase(phase) -> np.ndarray:
    arr = np.asarray(phase, dtype=np.bool_)
    if arr.shape != (2,):
        raise ConfigError(f"phase must be a (stance_L, stance_R) pair, got {phase!r}")
    return arr


@dataclass
class ReducedState:
    h_lin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    h_ang: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_L: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_R: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_array(self):
        return np.concatenate([np.asarray(getattr(self, k), dtype=np.float64) for k in STATE_SLICES])

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(**{k: x[s].copy() for k, s in STATE_SLICES.items()})


@dataclass
class ControlInput:
    w_L: np.ndarray = field(default_factory=lambda: np.zeros(6))
    w_R: np.ndarray = field(default_factory=lambda: np.zeros(6))
    v_L: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v_R: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_array(self):
        return np.concatenate([np.asarray(v, dtype=np.float64)
                               for v in (self.w_L, self.w_R, self.v_L, self.v_R)])

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)

    @classmethod
    def from_array(cls, u):
        u = np.asarray(u, dtype=np.float64)
        return cls(w_L=u[0:6].copy(), w_R=u[6:12].copy(), v_L=u[12:15].copy(), v_R=u[15:18].copy())


@dataclass
class DynParams:
    """Predictive-model parameters. Only the two gain vectors are learned."""

    theta_hl: np.ndarray = field(default_factory=lambda: np.ones(3))
    theta_ha: np.ndarray = field(default_factory=lambda: np.ones(3))
    mass: float = 30.0
    inertia: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.2, 0.8]))
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.theta_hl = np.asarray(self.theta_hl, dtype=np.float64)
        self.theta_ha = np.asarray(self.theta_ha, dtype=np.float64)
        self.inertia = np.asarray(self.inertia, dtype=np.float64)
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.theta_hl.shape != (3,) or self.theta_ha.shape != (3,):
            raise ConfigError("momentum gains must be 3-vectors")
        if np.any(self.theta_hl <= 0) or np.any(self.theta_ha <= 0):
            raise ConfigError("momentum gains must be strictly positive")
        if not self.mass > 0 or self.inertia.shape != (3,) or np.any(self.inertia <= 0):
            raise ConfigError("mass and inertia must be strictly positive")

    @property
    def gains(self):
        return np.concatenate([self.theta_hl, self.theta_ha])

    def model_par(self, dt=DT):
        return physical_par(self.mass, self.inertia, self.gravity, dt)


def physical_par(mass, inertia, gravity, dt):
    return np.array([mass, inertia[0], inertia[1], inertia[2],
                     gravity[0], gravity[1], gravity[2], dt], dtype=np.float64)


@dataclass(frozen=True)
class GaitSchedule:
    """Periodic per-foot contact timeline.

    ``left``/``right`` hold ``(start_fraction, end_fraction, mode)`` triples that
    partition ``[0, 1)``. ``swing_vz_profile`` holds ``(swing_fraction, v_z)`` knots
    of the piecewise-linear normal-velocity reference across one swing interval.
    """

    period: float = 1.0
    left: Tuple[Tuple[float, float, str], ...] = ((0.0, 1.0, STANCE),)
    right: Tuple[Tuple[float, float, str], ...] = ((0.0, 1.0, STANCE),)
    swing_vz_profile: Tuple[Tuple[float, float], ...] = ((0.0, 0.0), (1.0, 0.0))

    @classmethod
    def standing(cls):
        return cls()

    @classmethod
    def walking(cls, period=1.0, swing=0.3, clearance=0.05):
        """Alternating single support of ``swing`` seconds separated by double support."""
        f = swing / period
        if not 0 < f < 0.5:
            raise ConfigError("swing must be shorter than half the period")
        vmax = 4.0 * clearance / swing
        left = ((0.0, f, SWING), (f, 1.0, STANCE))
        right = ((0.0, 0.5, STANCE), (0.5, 0.5 + f, SWING), (0.5 + f, 1.0, STANCE))
        profile = ((0.0, 0.0), (0.25, vmax), (0.5, 0.0), (0.75, -vmax), (1.0, 0.0))
        return cls(period=period, left=left, right=right, swing_vz_profile=profile)

    def validate(self, dt=DT):
        if not self.period > 0:
            raise ConfigError("gait period must be positive")
        n = self.steps_per_period(dt)
        for name, ivs in (("left", self.left), ("right", self.right)):
            if not ivs:
                raise ConfigError(f"{name} foot has no intervals")
            edge = 0.0
            for start, end, mode in ivs:
                if mode not in (STANCE, SWING):
                    raise ConfigError(f"unknown contact mode {mode!r}")
                if abs(start - edge) > 1e-12 or not end > start:
                    raise ConfigError(f"{name} foot intervals must partition [0, 1) without overlap")
                edge = end
            if abs(edge - 1.0) > 1e-12:
                raise ConfigError(f"{name} foot intervals must end at 1")
        for k in range(n):
            if not any(self.phase_at_step(k, dt)):
                raise ConfigError("schedule has a flight phase; at least one foot must be in stance")
        xs = [p[0] for p in self.swing_vz_profile]
        if xs[0] != 0.0 or xs[-1] != 1.0 or any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigError("swing profile knots must increase from 0 to 1")

    def steps_per_period(self, dt=DT):
        n = int(round(self.period / dt))
        if n < 1 or abs(n * dt - self.period) > 1e-9:
            raise ConfigError("gait period must be an integer multiple of dt")
        return n

    def _intervals_steps(self, foot, dt):
        n = self.steps_per_period(dt)
        ivs = self.left if foot == 0 else self.right
        return [(int(round(s * n)), int(round(e * n)), m) for s, e, m in ivs]

    def phase_at_step(self, k, dt=DT) -> Phase:
        n = self.steps_per_period(dt)
        kk = k % n
        out = []
        for foot in (0, 1):
            for s, e, m in self._intervals_steps(foot, dt):
                if s <= kk < e:
                    out.append(m == STANCE)
                    break
        return bool(out[0]), bool(out[1])

    def swing_window(self, foot, k, dt=DT):
        """Absolute (liftoff, touchdown) steps of the swing containing step ``k``, or None."""
        n = self.steps_per_period(dt)
        base = (k // n) * n
        kk = k - base
        for s, e, m in self._intervals_steps(foot, dt):
            if m == SWING and s <= kk < e:
                return base + s, base + e
        return None

    def swing_touchdowns(self, foot, k_end, dt=DT):
        """All swing windows of ``foot`` whose liftoff is before ``k_end`` (absolute steps)."""
        n = self.steps_per_period(dt)
        out = []
        cycle = 0
        while cycle * n < k_end:
            for s, e, m in self._intervals_steps(foot, dt):
                if m == SWING and cycle * n + s < k_end:
                    out.append((cycle * n + s, cycle * n + e))
            cycle += 1
        return out

    def vz_profile(self, frac):
        xs = np.array([p[0] for p in self.swing_vz_profile])
        vs = np.array([p[1] for p in self.swing_vz_profile])
        return float(np.interp(frac, xs, vs))

    def vz_integral(self, frac):
        """Exact integral of the piecewise-linear profile over [0, frac], in fraction units."""
        xs = [p[0] for p in self.swing_vz_profile]
        vs = [p[1] for p in self.swing_vz_profile]
        total = 0.0
        for a, b, va, vb in zip(xs, xs[1:], vs, vs[1:]):
            if frac <= a:
                break
            hi = min(frac, b)
            vhi = va + (vb - va) * (hi - a) / (b - a)
            total += 0.5 * (va + vhi) * (hi - a)
        return total

    def to_dict(self):
        return {
            "period": self.period,
            "left": [list(iv) for iv in self.left],
            "right": [list(iv) for iv in self.right],
            "swing_vz_profile": [list(p) for p in self.swing_vz_profile],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            period=float(d["period"]),
            left=tuple((float(a), float(b), str(m)) for a, b, m in d["left"]),
            right=tuple((float(a), float(b), str(m)) for a, b, m in d["right"]),
            swing_vz_profile=tuple((float(a), float(v)) for a, v in d["swing_vz_profile"]),
        )


def _raise_for_status(status, stage=None):
    if status == K.SINGULAR:
        raise EulerSingular("pitch too close to +-pi/2 for the ZYX Euler-rate map", stage)
    if status == K.NONFINITE:
        raise NonFinite("non-finite state", stage)
    if status == K.DIVERGED:
        raise Diverged(f"state magnitude exceeded {K.DIVERGENCE_BOUND:g}", stage)


def check_state(x, stage=None):
    _raise_for_status(K._check_state(x), stage)


def continuous_derivative(x, u, phase, p: DynParams, ext=None):
    """Time derivative ``[dh_lin, dh_ang, dq]`` of the reduced centroidal model."""
    x = as_vector(x, name="state")
    u = as_vector(u, name="input")
    check_state(x)
    ext = np.zeros(6) if ext is None else as_vector(ext, 6, "external wrench")
    out = np.empty(18)
    K.deriv(x, u, as_phase(phase), p.gains, p.model_par(), ext, out)
    return out


def step(x, u, phase, p: DynParams, dt=DT):
    """One explicit RK4 step with the contact phase held fixed."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    x = as_vector(x, name="state")
    u = as_vector(u, name="input")
    check_state(x)
    out = K.rk4(x, u, as_phase(phase), p.gains, p.model_par(dt), np.zeros(6))
    check_state(out)
    return out


def step_partials(x, u, phase, p: DynParams, dt=DT):
    """Exact Jacobians of the RK4 map w.r.t. state, input and the six momentum gains.

    Returns ``(d_x, d_u, d_gains)`` with shapes (18, 18), (18, 18), (18, 6); the
    gain columns are ordered ``theta_hl`` then ``theta_ha``.
    """
    x_next = step(x, u, phase, p, dt)
    del x_next
    return K.rk4_jacobians(np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64),
                           as_phase(phase), p.gains, p.model_par(dt), np.zeros(6))


def standing_state(height=0.75, half_width=0.09, x0: Sequence[float] = (0.0, 0.0)):
    """Rest state with the CoM centred over two feet on the ground."""
    x = np.zeros(18)
    x[6:9] = [x0[0], x0[1], height]
    x[12:15] = [x0[0], x0[1] + half_width, 0.0]
    x[15:18] = [x0[0], x0[1] - half_width, 0.0]
    return x


def equilibrium_input(p: DynParams, phase: Phase = (True, True)):
    """Vertical forces balancing gravity, shared equally by the stance feet."""
    u = np.zeros(18)
    n = int(phase[0]) + int(phase[1])
    weight = -p.mass * p.gravity[2]
    for foot, on in enumerate(phase):
        if on:
            u[6 * foot + 2] = weight / n
    return u
