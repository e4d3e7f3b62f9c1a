"""The execution environment: mismatched dynamics, command lag, pushes and data collection.

The plant integrates the same reduced model as the predictor but with its own
wrench-realization gains, a first-order lag on commanded contact wrenches,
optional Gaussian process noise on the momentum rates and scripted external
pushes that bypass the realization gains.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import _kernels as K
from .constraints import ConstraintConfig
from .exceptions import ConfigError, Diverged, NumericalError
from .model import DT, DynParams, GaitSchedule, as_vector, check_state
from .objective import CostParams, ReferencePoint, stage_cost
from .valuation import Trajectory

FALL_HEIGHT = 0.3
FALL_TILT = 0.6
TRAJECTORY_FORMAT = "costmatch-trajectory"
TRAJECTORY_VERSION = 1


@dataclass
class PlantConfig:
    true_gain_lin: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.85, 0.92]))
    true_gain_ang: np.ndarray = field(default_factory=lambda: np.array([0.80, 0.80, 0.88]))
    actuator_tau: float = 0.05
    process_noise_std: np.ndarray = field(default_factory=lambda: np.zeros(6))
    rng_seed: int = 0

    def __post_init__(self):
        self.true_gain_lin = np.asarray(self.true_gain_lin, dtype=np.float64).reshape(3)
        self.true_gain_ang = np.asarray(self.true_gain_ang, dtype=np.float64).reshape(3)
        std = np.asarray(self.process_noise_std, dtype=np.float64)
        self.process_noise_std = np.full(6, float(std)) if std.ndim == 0 else std.reshape(6)
        if np.any(self.true_gain_lin <= 0) or np.any(self.true_gain_ang <= 0):
            raise ConfigError("plant gains must be positive")
        if self.actuator_tau < 0 or np.any(self.process_noise_std < 0):
            raise ConfigError("actuator_tau and noise std must be nonnegative")

    @classmethod
    def exact(cls, rng_seed=0):
        return cls(np.ones(3), np.ones(3), 0.0, np.zeros(6), rng_seed)

    @property
    def gains(self):
        return np.concatenate([self.true_gain_lin, self.true_gain_ang])

    def lag_beta(self, dt=DT):
        return math.exp(-dt / self.actuator_tau) if self.actuator_tau > 0 else 0.0


@dataclass(frozen=True)
class Pulse:
    t_start: float
    duration: float
    f_ext: tuple = (0.0, 0.0, 0.0)
    m_ext: tuple = (0.0, 0.0, 0.0)

    @property
    def t_end(self):
        return self.t_start + self.duration

    def wrench(self):
        return np.array(list(self.f_ext) + list(self.m_ext), dtype=np.float64)


@dataclass
class DisturbanceProfile:
    pulses: List[Pulse] = field(default_factory=list)

    def __post_init__(self):
        self.pulses = sorted(self.pulses, key=lambda p: p.t_start)
        for p in self.pulses:
            if not p.duration > 0:
                raise ConfigError("pulse durations must be positive")
        for a, b in zip(self.pulses, self.pulses[1:]):
            if b.t_start < a.t_end - 1e-12:
                raise ConfigError("disturbance pulses overlap")

    def wrench_at_step(self, k, dt=DT):
        """External wrench held over step k (pulses snap to step boundaries)."""
        out = np.zeros(6)
        for p in self.pulses:
            k0 = int(round(p.t_start / dt))
            k1 = k0 + int(round(p.duration / dt))
            if k0 <= k < k1:
                out += p.wrench()
        return out

    def shifted(self, offset):
        return DisturbanceProfile([Pulse(p.t_start + offset, p.duration, p.f_ext, p.m_ext)
                                   for p in self.pulses])

    def to_dict(self):
        return {"pulses": [{"t_start": p.t_start, "duration": p.duration,
                            "f_ext": list(p.f_ext), "m_ext": list(p.m_ext)} for p in self.pulses]}

    @classmethod
    def from_dict(cls, d):
        return cls([Pulse(float(p["t_start"]), float(p["duration"]),
                          tuple(map(float, p.get("f_ext", (0, 0, 0)))),
                          tuple(map(float, p.get("m_ext", (0, 0, 0))))) for p in d.get("pulses", [])])


def schedule_benchmark_disturbances(offset=0.0) -> DisturbanceProfile:
    """Three 18 N lateral pushes of 0.10 s and one 8 N m yaw pulse of 0.06 s."""
    push = (0.0, 18.0, 0.0)
    twist = (0.0, 0.0, 8.0)
    pulses = [Pulse(12.00, 0.10, f_ext=push), Pulse(12.75, 0.10, f_ext=push),
              Pulse(13.05, 0.06, m_ext=twist), Pulse(13.55, 0.10, f_ext=push)]
    return DisturbanceProfile(pulses).shifted(offset) if offset else DisturbanceProfile(pulses)


class Fell(Diverged):
    """The plant left the upright envelope; carries the reached state and the step cost."""

    def __init__(self, message, stage=None, state=None, cost=None):
        super().__init__(message, stage)
        self.state = state
        self.cost = cost


class Plant:
    """Stateful plant instance owning its lag filter and noise stream."""

    def __init__(self, cfg: PlantConfig, x0, dyn: DynParams = None, task_cost: CostParams = None,
                 disturbances: DisturbanceProfile = None, wrench0=None, dt=DT):
        self.cfg = cfg
        self.dyn = dyn or DynParams()
        self.task_cost = task_cost if task_cost is not None else CostParams()
        self.disturbances = disturbances or DisturbanceProfile()
        self.dt = dt
        self.x = as_vector(x0, name="initial state").copy()
        self.beta = cfg.lag_beta(dt)
        self.filtered = None if wrench0 is None else as_vector(wrench0, 12, "wrench0").copy()
        self.rng = np.random.default_rng(cfg.rng_seed)
        self._gains = cfg.gains
        self._model_par = self.dyn.model_par(dt)
        self.k = 0

    def realize(self, u_cmd, phase):
        """Lagged contact wrench.

        Swing feet have no contact to lag against: their filter is reset to the
        command (zero for any projected input), so a touchdown ramps up from 0.
        """
        w_cmd = u_cmd[:12]
        if self.filtered is None or self.beta == 0.0:
            self.filtered = w_cmd.copy()
        else:
            self.filtered = self.beta * self.filtered + (1.0 - self.beta) * w_cmd
        for foot in (0, 1):
            if not phase[foot]:
                self.filtered[6 * foot:6 * foot + 6] = w_cmd[6 * foot:6 * foot + 6]
        u = u_cmd.copy()
        u[:12] = self.filtered
        return u

    def step(self, u_cmd, phase, ref: ReferencePoint):
        """Advance one step; returns ``(x_next, l)`` with ``l`` the task cost of (x, u_cmd)."""
        u_cmd = as_vector(u_cmd, name="command")
        phase = np.asarray(phase, dtype=np.bool_)
        x = self.x
        cost = stage_cost(x, u_cmd, ref, phase, self.task_cost, self.dyn)
        u = self.realize(u_cmd, phase)
        ext = self.disturbances.wrench_at_step(self.k, self.dt)
        if np.any(self.cfg.process_noise_std > 0):
            ext = ext + self.cfg.process_noise_std * self.rng.standard_normal(6)
        x_next = K.rk4(x, u, phase, self._gains, self._model_par, ext)
        check_state(x_next, self.k)
        self.x = x_next
        self.k += 1
        if x_next[8] < FALL_HEIGHT or abs(x_next[10]) > FALL_TILT or abs(x_next[11]) > FALL_TILT:
            raise Fell(f"fall detected at step {self.k - 1}", self.k - 1, x_next, cost)
        return x_next, cost


def plant_step(plant: Plant, u_cmd, phase, ref: ReferencePoint):
    return plant.step(u_cmd, phase, ref)


def collect_rollout(controller, plant_cfg: PlantConfig, schedule: GaitSchedule = None,
                    command=None, steps=300, disturbances: DisturbanceProfile = None,
                    x0=None, task_cost: CostParams = None, dyn: DynParams = None,
                    references=None, meta: Optional[dict] = None, on_step: Callable = None,
                    dt=DT) -> Trajectory:
    """Run ``controller(s, t)`` against a fresh plant for ``steps`` steps.

    ``references`` defaults to ``controller.references`` (a ReferenceGenerator);
    ``schedule`` and ``command`` are only used to build one when the controller
    has none. On a fall the trajectory is truncated after the falling step and
    flagged.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if references is None:
        references = getattr(controller, "references", None)
    if references is None:
        from .mpc import ReferenceGenerator
        references = ReferenceGenerator(command if command is not None else (0, 0, 0),
                                        schedule or GaitSchedule.standing(), dyn, dt=dt)
    dyn = dyn or references.dyn
    if x0 is None:
        x0 = references.initial_state()
    plant = Plant(plant_cfg, x0, dyn, task_cost, disturbances, dt=dt)
    S, A, L, T, PH, XR, UR = [plant.x.copy()], [], [], [], [], [], []
    fell = False
    for k in range(steps):
        x_ref, u_ref, phase = references.at_step(k)
        t = k * dt
        try:
            u = np.asarray(controller(plant.x, t), dtype=np.float64)
        except NumericalError as exc:
            exc.stage = k
            raise
        A.append(u)
        T.append(t)
        PH.append(phase)
        XR.append(x_ref)
        UR.append(u_ref)
        try:
            x_next, cost = plant.step(u, phase, ReferencePoint(x_ref, u_ref))
        except Fell as exc:
            S.append(exc.state.copy())
            L.append(exc.cost)
            fell = True
            break
        S.append(x_next.copy())
        L.append(cost)
        if on_step is not None:
            on_step(k, x_next, u)
    XR.append(references.at_step(len(A))[0])
    info = {"plant_seed": plant_cfg.rng_seed, "fell": fell}
    info.update(meta or {})
    return Trajectory(np.array(S), np.array(A), np.array(L), np.array(T), np.array(PH),
                      np.array(XR), np.array(UR), dt=dt, fell=fell, meta=info)


# ---------------------------------------------------------------- persistence

def _hash_payload(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def save_trajectory(traj: Trajectory, path, config_hash=None):
    """Newline-delimited records: a header line then one record per step.

    Floats are written with ``repr`` precision, so reloading is bit-exact.
    """
    header = {
        "format": TRAJECTORY_FORMAT,
        "version": TRAJECTORY_VERSION,
        "fields": ["k", "t", "phase", "s", "a", "l", "x_ref", "u_ref"],
        "dt": traj.dt,
        "steps": len(traj),
        "fell": bool(traj.fell),
        "meta": traj.meta,
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for k in range(len(traj)):
            rec = {"k": k, "t": float(traj.times[k]), "phase": [bool(v) for v in traj.phases[k]],
                   "s": traj.states[k].tolist(), "a": traj.actions[k].tolist(),
                   "l": float(traj.costs[k]), "x_ref": traj.x_refs[k].tolist(),
                   "u_ref": traj.u_refs[k].tolist()}
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"k": len(traj), "s": traj.states[-1].tolist(),
                             "x_ref": traj.x_refs[-1].tolist()}) + "\n")


def load_trajectory(path) -> Trajectory:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != TRAJECTORY_FORMAT:
        raise ConfigError(f"{path} is not a trajectory file")
    if header.get("version") != TRAJECTORY_VERSION:
        raise ConfigError(f"unsupported trajectory version {header.get('version')}")
    recs = [json.loads(line) for line in lines[1:]]
    steps = header["steps"]
    if len(recs) != steps + 1:
        raise ConfigError(f"{path} is truncated")
    body, last = recs[:steps], recs[steps]
    S = [r["s"] for r in body] + [last["s"]]
    XR = [r["x_ref"] for r in body] + [last["x_ref"]]
    return Trajectory(np.array(S, dtype=np.float64).reshape(steps + 1, 18),
                      np.array([r["a"] for r in body], dtype=np.float64).reshape(steps, 18),
                      np.array([r["l"] for r in body], dtype=np.float64),
                      np.array([r["t"] for r in body], dtype=np.float64),
                      np.array([r["phase"] for r in body], dtype=np.bool_).reshape(steps, 2),
                      np.array(XR, dtype=np.float64).reshape(steps + 1, 18),
                      np.array([r["u_ref"] for r in body], dtype=np.float64).reshape(steps, 18),
                      dt=header["dt"], fell=header["fell"], meta=header.get("meta", {}))
