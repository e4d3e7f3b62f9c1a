"""Run configuration: one YAML file, dotted-path overrides, a content hash."""

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .constraints import ConstraintConfig, default_penalty_weights
from .exceptions import ConfigError
from .learner import LearnConfig
from .model import DynParams, GaitSchedule
from .mpc import ReferenceConfig, SolverConfig
from .objective import CostParams
from .plant import PlantConfig, schedule_benchmark_disturbances
from .valuation import ParamVector


def nominal_task_weights():
    """Frozen task-cost weights used for the logged stage costs (and as theta_0)."""
    q = np.r_[np.full(3, 0.5), np.full(3, 20.0), 100.0, 300.0, 1000.0, 20.0, 100.0, 200.0,
              np.full(6, 300.0)]
    r = np.r_[np.full(3, 1e-4), np.full(3, 1e-2), np.full(3, 1e-4), np.full(3, 1e-2),
              np.full(6, 1e-2)]
    sw = np.r_[np.full(3, 200.0), np.full(3, 1.0), np.full(3, 200.0), np.full(3, 1.0)]
    return CostParams(theta_q=q, theta_r=r, theta_qf=q.copy(), theta_base=[10, 10, 10, 1, 1, 1],
                      theta_com=50.0, theta_sw=sw, theta_torq=1e-3)


def default_config():
    task = nominal_task_weights().to_dict()
    return {
        "run_id": "default",
        "output_dir": "runs",
        "seed": 0,
        "dt": 0.01,
        "model": {"mass": 30.0, "inertia": [1.5, 1.2, 0.8], "gravity": [0.0, 0.0, -9.81]},
        "gait": {"kind": "walking", "period": 1.0, "swing": 0.3, "clearance": 0.05,
                 "schedule": None},
        "reference": {"height": 0.75, "half_width": 0.065, "command": [0.2, 0.0, 0.0]},
        "constraints": ConstraintConfig().to_dict(),
        "penalty": {"inequality": 1e3, "equality": 1e4, "terminal": 1e3},
        "task_cost": task,
        "theta0": {"theta_hl": [1.0, 1.0, 1.0], "theta_ha": [1.0, 1.0, 1.0], **copy.deepcopy(task)},
        "learn": {"gamma": 0.985, "alpha": "auto", "batch_size": 32, "updates_per_round": 300,
                  "rounds": 5, "horizon": 20, "validation_fraction": 0.2,
                  "smoothness_probes": 6, "smoothness_radius": 1e-3, "smoothness_batches": 8,
                  # one step size cannot serve blocks whose curvatures differ by ~1e4
                  "trainable": ["theta_hl", "theta_ha"]},
        "solver": {"horizon_N": 20, "max_outer_iters": 3, "max_inner_iters": 12,
                   "penalty_schedule": [1e2, 1e3, 1e4], "convergence_tol": 1e-6,
                   "warm_start": True},
        "plant": {"true_gain_lin": [0.85, 0.85, 0.92], "true_gain_ang": [0.80, 0.80, 0.88],
                  "actuator_tau": 0.05, "process_noise_std": 0.0},
        "collect": {"trajectories": 8, "steps": 300, "command_jitter": 0.1,
                    "init_momentum_std": 1.0, "push_count": 2, "push_force": 15.0,
                    "push_duration": 0.1},
        "bench": {"seeds": [0, 1, 2, 3, 4, 5], "offset": -9.0, "steps": 700,
                  "post_window": 1.5, "hold": 0.5, "init_momentum_std": 0.3},
        "diagnose": {"trajectories": 2, "steps": 120, "fd_instances": 3, "gate": 1e-4},
    }


def _merge(base, over, path=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def apply_override(cfg, dotted, value):
    """Set ``a.b.c = value`` where ``value`` is parsed as YAML."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
    return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(cfg):
    payload = json.dumps(_plain(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class RunConfig:
    """Validated, resolved run configuration with typed accessors."""

    raw: dict

    def __post_init__(self):
        self.raw = _plain(self.raw)
        self.validate()

    @classmethod
    def from_sources(cls, path=None, overrides=(), seed=None):
        cfg = default_config()
        if path is not None:
            text = Path(path).read_text()
            loaded = yaml.safe_load(text) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path} must contain a mapping")
            _merge(cfg, loaded)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key.path=value")
            k, v = item.split("=", 1)
            apply_override(cfg, k.strip(), v)
        if seed is not None:
            cfg["seed"] = int(seed)
        return cls(cfg)

    @property
    def hash(self):
        return config_hash(self.raw)

    def to_yaml(self):
        return yaml.safe_dump(self.raw, sort_keys=True)

    def validate(self):
        # building every typed object runs its invariant checks
        self.dyn, self.schedule, self.reference, self.constraints
        self.task_cost, self.theta0, self.learn, self.solver, self.plant
        if float(self.raw["dt"]) <= 0:
            raise ConfigError("dt must be positive")
        if not isinstance(self.raw["seed"], int):
            raise ConfigError("seed must be an integer")
        self.schedule.validate(self.dt)
        if self.learn.horizon != self.solver.horizon_N:
            raise ConfigError("learn.horizon must equal solver.horizon_N")
        col = self.raw["collect"]
        if col["trajectories"] < 1 or col["steps"] < 1:
            raise ConfigError("collect.trajectories and collect.steps must be positive")
        bench = self.raw["bench"]
        if len(bench["seeds"]) < 1:
            raise ConfigError("bench.seeds must not be empty")
        lb = self.learn.theta_lower_bounds
        if np.any(lb > self.theta0.to_array()):
            raise ConfigError("theta_lower_bounds exceed theta0")

    @property
    def dt(self):
        return float(self.raw["dt"])

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def dyn(self):
        m = self.raw["model"]
        return DynParams(mass=float(m["mass"]), inertia=m["inertia"], gravity=m["gravity"])

    @property
    def schedule(self):
        g = self.raw["gait"]
        kind = g.get("kind", "walking")
        if kind == "walking":
            return GaitSchedule.walking(g["period"], g["swing"], g["clearance"])
        if kind == "standing":
            return GaitSchedule.standing()
        if kind == "custom":
            if not isinstance(g.get("schedule"), dict):
                raise ConfigError("gait.kind custom needs a gait.schedule mapping")
            return GaitSchedule.from_dict(g["schedule"])
        raise ConfigError(f"unknown gait kind {kind!r}")

    @property
    def reference(self):
        r = self.raw["reference"]
        return ReferenceConfig(height=float(r["height"]), half_width=float(r["half_width"]))

    @property
    def command(self):
        return np.asarray(self.raw["reference"]["command"], dtype=np.float64)

    @property
    def constraints(self):
        return ConstraintConfig(**self.raw["constraints"])

    @property
    def penalty_weights(self):
        p = self.raw["penalty"]
        return default_penalty_weights(p["inequality"], p["equality"], p["terminal"])

    @property
    def task_cost(self):
        return CostParams.from_dict(self.raw["task_cost"])

    @property
    def theta0(self):
        w, wf = self.penalty_weights
        d = dict(self.raw["theta0"])
        return ParamVector(d.pop("theta_hl"), d.pop("theta_ha"), CostParams.from_dict(d), w, wf)

    @property
    def learn(self):
        d = dict(self.raw["learn"])
        if d.get("alpha") != "auto":
            d["alpha"] = float(d["alpha"])
        return LearnConfig(rng_seed=self.seed, **d)

    @property
    def solver(self):
        d = dict(self.raw["solver"])
        d["penalty_schedule"] = tuple(d["penalty_schedule"])
        return SolverConfig(**d)

    @property
    def plant(self):
        return PlantConfig(rng_seed=self.seed, **self.raw["plant"])

    @property
    def benchmark_profile(self):
        return schedule_benchmark_disturbances(float(self.raw["bench"]["offset"]))
