"""Seeded experiment orchestration: on-policy collection, training rounds, benchmark episodes."""

from dataclasses import dataclass
from typing import List

import numpy as np

from .bench import compare_controllers
from .learner import Context, LearnConfig, TrainDiagnostics, train_round
from .mpc import MPCController, ReferenceGenerator
from .plant import DisturbanceProfile, PlantConfig, Pulse, collect_rollout
from .valuation import ParamVector, Trajectory


def derive_seed(*parts):
    """Stable 63-bit seed from integer parts."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))


@dataclass
class EpisodeSpec:
    """Everything that varies between seeded episodes."""

    command: np.ndarray
    x0: np.ndarray
    disturbances: DisturbanceProfile
    plant_seed: int


def random_pushes(rng, count, force, duration, t_lo, t_hi):
    """``count`` non-overlapping horizontal pushes of magnitude ``force`` in [t_lo, t_hi]."""
    if count <= 0 or t_hi - t_lo < count * duration:
        return DisturbanceProfile()
    slot = (t_hi - t_lo) / count
    pulses = []
    for j in range(count):
        t = t_lo + j * slot + rng.uniform(0.0, slot - duration)
        ang = rng.uniform(0.0, 2 * np.pi)
        pulses.append(Pulse(round(t, 2), duration,
                            f_ext=(float(force * np.cos(ang)), float(force * np.sin(ang)), 0.0)))
    return DisturbanceProfile(pulses)


class Experiment:
    """Builds controllers, plants and seeded episodes from a RunConfig."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.ctx = Context(cfg.dyn, cfg.constraints, cfg.dt)
        self.schedule = cfg.schedule
        self.task_cost = cfg.task_cost

    def controller(self, theta: ParamVector, command=None) -> MPCController:
        cmd = self.cfg.command if command is None else command
        return MPCController(theta, self.schedule, cmd, self.cfg.solver, self.ctx.dyn,
                             self.ctx.constraints, self.cfg.reference, self.ctx.dt)

    def plant_config(self, seed) -> PlantConfig:
        p = self.cfg.plant
        return PlantConfig(p.true_gain_lin, p.true_gain_ang, p.actuator_tau, p.process_noise_std, seed)

    def _episode(self, rng, command, momentum_std, pushes, plant_seed):
        x0 = ReferenceGenerator(command, self.schedule, self.ctx.dyn, self.cfg.reference,
                                self.ctx.dt).initial_state()
        x0[0:2] += rng.normal(0.0, momentum_std, 2)
        return EpisodeSpec(np.asarray(command, dtype=np.float64), x0, pushes, plant_seed)

    def training_episode(self, round_idx, episode) -> EpisodeSpec:
        col = self.cfg.raw["collect"]
        seed = derive_seed(self.cfg.seed, 1, round_idx, episode)
        rng = np.random.default_rng(seed)
        command = self.cfg.command.copy()
        j = float(col["command_jitter"])
        command[0] += rng.uniform(-j, j)
        command[1] += rng.uniform(-j, j) * 0.5
        horizon_t = col["steps"] * self.ctx.dt
        pushes = random_pushes(rng, int(col["push_count"]), float(col["push_force"]),
                               float(col["push_duration"]), 0.5, horizon_t - 0.5)
        return self._episode(rng, command, float(col["init_momentum_std"]), pushes,
                             derive_seed(self.cfg.seed, 2, round_idx, episode))

    def rollout(self, theta: ParamVector, spec: EpisodeSpec, steps, meta=None) -> Trajectory:
        ctrl = self.controller(theta, spec.command)
        return collect_rollout(ctrl, self.plant_config(spec.plant_seed), steps=steps,
                               disturbances=spec.disturbances, x0=spec.x0,
                               task_cost=self.task_cost, dyn=self.ctx.dyn,
                               meta=meta, dt=self.ctx.dt)

    def collect_round(self, theta: ParamVector, round_idx) -> List[Trajectory]:
        col = self.cfg.raw["collect"]
        out = []
        for e in range(int(col["trajectories"])):
            spec = self.training_episode(round_idx, e)
            out.append(self.rollout(theta, spec, int(col["steps"]),
                                    {"round": int(round_idx), "episode": e,
                                     "command": spec.command.tolist()}))
        return out

    def learn_config(self, round_idx) -> LearnConfig:
        lc = self.cfg.learn
        lc.rng_seed = derive_seed(self.cfg.seed, 3, round_idx)
        return lc

    def train_round(self, theta: ParamVector, trajectories, round_idx):
        return train_round(theta, trajectories, self.learn_config(round_idx), self.ctx)

    def train(self, theta: ParamVector = None, rounds=None, on_round=None):
        """Run the full on-policy loop in memory; returns (theta, per-round diagnostics)."""
        theta = self.cfg.theta0 if theta is None else theta
        rounds = self.cfg.learn.rounds if rounds is None else rounds
        history = []
        for j in range(rounds):
            trajs = self.collect_round(theta, j)
            theta, diag = self.train_round(theta, trajs, j)
            history.append(diag)
            if on_round is not None:
                on_round(j, theta, trajs, diag)
        return theta, history

    # ------------------------------------------------------------ benchmark

    def bench_episode(self, theta: ParamVector, seed, profile: DisturbanceProfile) -> Trajectory:
        b = self.cfg.raw["bench"]
        rng = np.random.default_rng(derive_seed(self.cfg.seed, 4, seed))
        spec = self._episode(rng, self.cfg.command, float(b["init_momentum_std"]), profile,
                             derive_seed(self.cfg.seed, 5, seed))
        return self.rollout(theta, spec, int(b["steps"]), {"bench_seed": int(seed)})

    def benchmark(self, theta0: ParamVector, theta_star: ParamVector, on_trial=None):
        b = self.cfg.raw["bench"]
        return compare_controllers(theta0, theta_star, b["seeds"], self.cfg.benchmark_profile,
                                   self.bench_episode, float(b["post_window"]), float(b["hold"]),
                                   on_trial)


def merged_diagnostics(history: List[TrainDiagnostics]) -> TrainDiagnostics:
    out = TrainDiagnostics()
    for d in history:
        out.extend(d)
    return out
