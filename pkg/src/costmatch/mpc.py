"""Receding-horizon deployment solver and walking reference generation.

The optimal control problem is solved by single shooting over the N inputs.
Input constraints are enforced exactly by ``project_input`` after every step;
state constraints (workspace box, foot distance) enter as quadratic penalties
whose weight escalates over ``penalty_schedule``.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import _kernels as K
from .constraints import ConstraintConfig, project_input
from .exceptions import ConfigError, NumericalError, SolveFailed
from .model import DT, DynParams, GaitSchedule, _raise_for_status, as_vector, check_state
from .valuation import ParamVector

# every call of ``solve`` increments this; the learner must never touch it
SOLVE_CALLS = {"count": 0}


@dataclass
class SolverConfig:
    horizon_N: int = 20
    max_outer_iters: int = 3
    max_inner_iters: int = 12
    penalty_schedule: Tuple[float, ...] = (1e2, 1e3, 1e4)
    convergence_tol: float = 1e-6
    warm_start: bool = True
    # diagonal preconditioner per input group, roughly the inverse curvature of the
    # objective in that group (the swing normal velocity uses the top penalty weight)
    precond_force_xy: float = 100.0
    precond_force_z: float = 400.0
    precond_moment: float = 25.0
    precond_velocity: float = 0.4
    fail_residual: float = 1e-2

    def __post_init__(self):
        self.penalty_schedule = tuple(float(v) for v in self.penalty_schedule)
        if self.horizon_N < 1 or self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ConfigError("horizon and iteration caps must be positive")
        if not self.penalty_schedule or any(b <= a for a, b in
                                            zip(self.penalty_schedule, self.penalty_schedule[1:])):
            raise ConfigError("penalty_schedule must be strictly increasing")
        if not self.convergence_tol > 0:
            raise ConfigError("convergence_tol must be positive")

    def variable_scale(self):
        """Per-entry scale ``d`` with the preconditioner ``d**2``."""
        d2 = np.empty(18)
        d2[[0, 1, 6, 7]] = self.precond_force_xy
        d2[[2, 8]] = self.precond_force_z
        d2[[3, 4, 5, 9, 10, 11]] = self.precond_moment
        d2[12:] = self.precond_velocity
        d2[[14, 17]] = 1.0 / (2.0 * self.penalty_schedule[-1] + 1.0 / self.precond_velocity)
        return np.sqrt(d2)


@dataclass
class ReferenceConfig:
    """Nominal walking pose; foot targets sit ``half_width`` either side of the CoM path."""

    height: float = 0.75
    half_width: float = 0.08
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.height > 0 and self.half_width > 0):
            raise ConfigError("height and half_width must be positive")


@dataclass
class ReferencePlan:
    """Per-stage references: ``x_refs`` (N+1, 18), ``u_refs`` (N, 18), ``phases`` (N, 2)."""

    x_refs: np.ndarray
    u_refs: np.ndarray
    phases: np.ndarray
    k0: int = 0

    @property
    def horizon(self):
        return self.u_refs.shape[0]


class ReferenceGenerator:
    """Deterministic reference as a pure function of the absolute step index.

    The CoM integrates the planar command ``(v_x, v_y, yaw_rate)`` from the
    origin. Each stance foot is pinned at the CoM reference at the middle of its
    stance interval offset laterally by ``half_width``, so the placement ahead of
    touchdown grows with commanded speed. Swing feet move linearly between
    consecutive targets in the plane and follow the integrated normal-velocity
    profile vertically.
    """

    def __init__(self, command, schedule: GaitSchedule, dyn: DynParams = None,
                 ref: ReferenceConfig = None, dt=DT):
        self.command = np.asarray(command, dtype=np.float64).reshape(3)
        self.schedule = schedule
        self.dyn = dyn or DynParams()
        self.ref = ref or ReferenceConfig()
        self.dt = float(dt)
        schedule.validate(dt)
        self.n_period = schedule.steps_per_period(dt)
        self._cache = {}

    # planar CoM path and heading at continuous time t
    def com_xy(self, t):
        vx, vy, wz = self.command
        ox, oy = self.ref.origin
        if wz == 0.0:
            return np.array([ox + vx * t, oy + vy * t]), 0.0
        psi = wz * t
        s, c = math.sin(psi), math.cos(psi)
        x = (vx * s + vy * (c - 1.0)) / wz
        y = (vx * (1.0 - c) + vy * s) / wz
        return np.array([ox + x, oy + y]), psi

    def _run(self, foot, k):
        """Maximal run [a, b) of steps with the same contact mode as step k (None if unbounded)."""
        mode = self.schedule.phase_at_step(k, self.dt)[foot]
        a = k
        while self.schedule.phase_at_step(a - 1, self.dt)[foot] == mode:
            a -= 1
            if k - a > self.n_period:
                return None
        b = k + 1
        while self.schedule.phase_at_step(b, self.dt)[foot] == mode:
            b += 1
        return a, b

    def _stance_target(self, foot, a, b):
        side = 1.0 if foot == 0 else -1.0
        mid = 0.5 * (a + b) * self.dt
        c, psi = self.com_xy(mid)
        w = side * self.ref.half_width
        return np.array([c[0] - math.sin(psi) * w, c[1] + math.cos(psi) * w, 0.0])

    def foot_position(self, foot, k):
        run = self._run(foot, k)
        if run is None:
            side = 1.0 if foot == 0 else -1.0
            ox, oy = self.ref.origin
            return np.array([ox, oy + side * self.ref.half_width, 0.0])
        a, b = run
        if self.schedule.phase_at_step(k, self.dt)[foot]:
            return self._stance_target(foot, a, b)
        prev = self._stance_target(foot, *self._run(foot, a - 1))
        nxt = self._stance_target(foot, *self._run(foot, b))
        frac = (k - a) / (b - a)
        p = prev + (nxt - prev) * frac
        p[2] = (b - a) * self.dt * self.schedule.vz_integral(frac)
        return p

    def at_step(self, k):
        """(x_ref, u_ref, phase) for absolute step ``k``."""
        hit = self._cache.get(k)
        if hit is not None:
            return hit
        dyn = self.dyn
        t = k * self.dt
        phase = self.schedule.phase_at_step(k, self.dt)
        vx, vy, wz = self.command
        c, psi = self.com_xy(t)
        s, co = math.sin(psi), math.cos(psi)
        x = np.zeros(18)
        x[0] = dyn.mass * (co * vx - s * vy)
        x[1] = dyn.mass * (s * vx + co * vy)
        x[5] = dyn.inertia[2] * wz
        x[6:9] = [c[0], c[1], self.ref.height]
        x[9] = psi
        x[12:15] = self.foot_position(0, k)
        x[15:18] = self.foot_position(1, k)
        u = np.zeros(18)
        n = int(phase[0]) + int(phase[1])
        for foot in (0, 1):
            if phase[foot]:
                u[6 * foot + 2] = -dyn.mass * dyn.gravity[2] / n
            else:
                u[12 + 3 * foot:15 + 3 * foot] = (self.foot_position(foot, k + 1)
                                                  - x[12 + 3 * foot:15 + 3 * foot]) / self.dt
        out = (x, u, phase)
        if len(self._cache) > 100000:
            self._cache.clear()
        self._cache[k] = out
        return out

    def plan(self, k0, n) -> ReferencePlan:
        xs = np.empty((n + 1, 18))
        us = np.empty((n, 18))
        ph = np.empty((n, 2), dtype=np.bool_)
        for i in range(n + 1):
            x, u, p = self.at_step(k0 + i)
            xs[i] = x
            if i < n:
                us[i] = u
                ph[i] = p
        return ReferencePlan(xs, us, ph, k0)

    def initial_state(self):
        return self.at_step(0)[0].copy()


def generate_references(command, schedule: GaitSchedule, t0, N, dt=DT, dyn: DynParams = None,
                        ref: ReferenceConfig = None) -> ReferencePlan:
    """Reference plan over ``N`` stages starting at time ``t0``."""
    if N < 1:
        raise ConfigError("N must be >= 1")
    gen = ReferenceGenerator(command, schedule, dyn, ref, dt)
    return gen.plan(int(round(t0 / dt)), int(N))


@dataclass
class SolveReport:
    cost: float
    max_state_residual: float
    iterations: int
    outer_iterations: int
    converged: bool
    stage_residuals: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    wall_time: float = 0.0


def _solver_weights(theta: ParamVector, level, top):
    w = np.zeros(K.NRES)
    w[K.R_WORKSPACE:K.R_DSAFE + 1] = level
    w[K.R_SWING_VZ:] = top
    wf = np.full(K.NRES_TERMINAL, level)
    return w, wf


def _state_residual(X, cp, qmin, qmax):
    pre = np.empty(K.NRES_TERMINAL)
    worst = 0.0
    for i in range(1, X.shape[0]):
        K.terminal_residual_pre(X[i], cp, qmin, qmax, pre)
        worst = max(worst, float(pre.max()))
    return max(worst, 0.0)


def _project_all(U, phases, cfg):
    out = np.empty_like(U)
    for i in range(U.shape[0]):
        out[i] = project_input(U[i], phases[i], cfg)
    return out


def solve(theta: ParamVector, s, plan: ReferencePlan, schedule: GaitSchedule = None,
          cfg: SolverConfig = None, warm: Optional[np.ndarray] = None, dyn: DynParams = None,
          constraints: ConstraintConfig = None, dt=DT):
    """Solve the horizon-N problem from state ``s``; returns ``(U, report)``.

    ``schedule`` is accepted for interface symmetry; the phases come from ``plan``.
    Raises SolveFailed (with the report attached) if the best iterate still
    violates the state constraints by more than ``cfg.fail_residual``.
    """
    SOLVE_CALLS["count"] += 1
    t_start = time.perf_counter()
    cfg = cfg or SolverConfig()
    dyn = dyn or DynParams()
    constraints = constraints or ConstraintConfig()
    s = as_vector(s, name="state")
    check_state(s)
    n = plan.horizon
    th = theta.to_array()
    mp = dyn.model_par(dt)
    cp, qmin, qmax = constraints.con_par, constraints.q_min, constraints.q_max
    phases = np.ascontiguousarray(plan.phases)
    XR, UR = np.ascontiguousarray(plan.x_refs), np.ascontiguousarray(plan.u_refs)
    if warm is None:
        warm = UR
    U = _project_all(np.asarray(warm, dtype=np.float64).reshape(n, 18), phases, constraints)
    D2 = cfg.variable_scale() ** 2
    Dinv = 1.0 / cfg.variable_scale()
    top = cfg.penalty_schedule[-1]

    iterations = 0
    history = []
    stage_res = []
    converged = False
    best = None
    for outer, level in enumerate(cfg.penalty_schedule[:cfg.max_outer_iters]):
        w, wf = _solver_weights(theta, level, top)
        status, fail, X, sc, sp, term, tpen, _, G = K.rollout(th, s, U, phases, XR, UR, mp, cp,
                                                              qmin, qmax, w, wf, True)
        if status != K.OK:
            _raise_for_status(status, int(fail))
        f = term + tpen + sc.sum() + sp.sum()
        history.append(f)
        alpha = 1.0 / max(np.max(np.abs(G * D2 * Dinv)), 1e-12)
        stalled = False
        for _ in range(cfg.max_inner_iters):
            iterations += 1
            while True:
                U_new = _project_all(U - alpha * D2 * G, phases, constraints)
                step = np.max(np.abs((U_new - U) * Dinv)) / alpha
                if step < cfg.convergence_tol:
                    converged = True
                    break
                st, f_new = K.rollout_value(th, s, U_new, phases, XR, UR, mp, cp, qmin, qmax, w, wf)
                if st == K.OK and f_new < f:
                    break
                alpha *= 0.5
                if alpha < 1e-12:
                    stalled = True
                    break
            if converged or stalled:
                break
            status, fail, X, sc, sp, term, tpen, _, G_new = K.rollout(
                th, s, U_new, phases, XR, UR, mp, cp, qmin, qmax, w, wf, True)
            f_new = term + tpen + sc.sum() + sp.sum()
            ds = (U_new - U) * Dinv
            dy = (G_new - G) / Dinv
            sy = float(np.sum(ds * dy))
            alpha = float(np.sum(ds * ds)) / sy if sy > 0 else 2.0 * alpha
            U, G, f = U_new, G_new, f_new
            history.append(f)
        resid = _state_residual(X, cp, qmin, qmax)
        stage_res.append(resid)
        best = (U.copy(), f, resid)
        if converged and resid == 0.0:
            # no state constraint is violated, so heavier penalties change nothing
            break
        if outer < cfg.max_outer_iters - 1:
            converged = False
    U, f, resid = best
    report = SolveReport(float(f), resid, iterations, len(stage_res), converged, stage_res,
                         history, time.perf_counter() - t_start)
    if resid > cfg.fail_residual:
        raise SolveFailed(f"state-constraint residual {resid:.3g} after the penalty schedule", report)
    return U, report


class MPCController:
    """Receding-horizon policy with a warm-start store.

    ``policy_step(s, t)`` solves from ``s`` and returns the first input. On
    SolveFailed it applies the shifted previous sequence instead.
    """

    def __init__(self, theta: ParamVector, schedule: GaitSchedule, command=(0.0, 0.0, 0.0),
                 solver: SolverConfig = None, dyn: DynParams = None,
                 constraints: ConstraintConfig = None, ref: ReferenceConfig = None, dt=DT):
        self.theta = theta
        self.schedule = schedule
        self.solver = solver or SolverConfig()
        self.dyn = dyn or DynParams()
        self.constraints = constraints or ConstraintConfig()
        self.dt = dt
        self.references = ReferenceGenerator(command, schedule, self.dyn, ref, dt)
        self.warm = None
        self.failures = 0
        self.reports = []
        self.keep_reports = False

    def reset(self):
        self.warm = None
        self.failures = 0
        self.reports = []

    def _shifted(self):
        if self.warm is None:
            return None
        return np.vstack([self.warm[1:], self.warm[-1:]])

    def policy_step(self, s, t):
        k = int(round(t / self.dt))
        plan = self.references.plan(k, self.solver.horizon_N)
        guess = self._shifted() if self.solver.warm_start else None
        try:
            U, report = solve(self.theta, s, plan, self.schedule, self.solver, guess,
                              self.dyn, self.constraints, self.dt)
        except (SolveFailed, NumericalError) as exc:
            self.failures += 1
            report = getattr(exc, "report", None)
            base = guess if guess is not None else plan.u_refs
            U = _project_all(base, plan.phases, self.constraints)
        if self.keep_reports:
            self.reports.append(report)
        self.warm = U
        return U[0].copy()

    __call__ = policy_step
