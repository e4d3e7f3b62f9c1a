"""Rollout-based MPC action values, measured returns and the reverse-pass gradient.

``q_mpc`` rolls the parameterized model along *recorded* actions and sums
parameterized stage costs, violation penalties and the terminal cost. Nothing
here solves an optimization problem.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _kernels as K
from .constraints import ConstraintConfig, default_penalty_weights
from .exceptions import ConfigError, InsufficientData, NonFinite
from .model import DT, DynParams, _raise_for_status, as_vector
from .objective import CostParams

PARAM_LAYOUT = K.THETA_BLOCKS
P = K.NTHETA
GAIN_SLICE = slice(0, 6)
WEIGHT_SLICE = slice(6, P)

# rollouts performed by this module; read by tests to bound the work per evaluation
ROLLOUT_STATS = {"rollouts": 0, "model_steps": 0}


def param_names():
    names = []
    for block, size in PARAM_LAYOUT:
        names += [f"{block}[{j}]" for j in range(size)]
    return names


@dataclass
class ParamVector:
    """Learnable parameters (momentum gains and cost weights) plus fixed penalty weights.

    Flattening order follows ``PARAM_LAYOUT``: theta_hl, theta_ha, then the cost
    blocks theta_q, theta_r, theta_qf, theta_base, theta_com, theta_sw, theta_torq.
    """

    theta_hl: np.ndarray = field(default_factory=lambda: np.ones(3))
    theta_ha: np.ndarray = field(default_factory=lambda: np.ones(3))
    cost: CostParams = field(default_factory=CostParams)
    w: Optional[np.ndarray] = None
    w_f: Optional[np.ndarray] = None

    def __post_init__(self):
        self.theta_hl = np.asarray(self.theta_hl, dtype=np.float64).reshape(3)
        self.theta_ha = np.asarray(self.theta_ha, dtype=np.float64).reshape(3)
        if np.any(self.theta_hl <= 0) or np.any(self.theta_ha <= 0):
            raise ConfigError("momentum gains must be strictly positive")
        w, w_f = default_penalty_weights()
        self.w = w if self.w is None else np.asarray(self.w, dtype=np.float64)
        self.w_f = w_f if self.w_f is None else np.asarray(self.w_f, dtype=np.float64)
        if self.w.shape != (K.NRES,) or self.w_f.shape != (K.NRES_TERMINAL,):
            raise ConfigError("penalty weights do not match the residual layout")
        if np.any(self.w <= 0) or np.any(self.w_f <= 0):
            raise ConfigError("penalty weights must be positive")

    def to_array(self):
        return np.concatenate([self.theta_hl, self.theta_ha, self.cost.to_array()])

    @classmethod
    def from_array(cls, arr, w=None, w_f=None):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (P,):
            raise ConfigError(f"parameter vector must have {P} entries")
        return cls(arr[0:3].copy(), arr[3:6].copy(), CostParams.from_array(arr[6:]), w, w_f)

    def with_array(self, arr):
        return ParamVector.from_array(arr, self.w, self.w_f)

    def dyn_params(self, base: DynParams = None) -> DynParams:
        base = base or DynParams()
        return DynParams(self.theta_hl.copy(), self.theta_ha.copy(), base.mass,
                         base.inertia, base.gravity)

    def to_dict(self):
        d = {"theta_hl": self.theta_hl.tolist(), "theta_ha": self.theta_ha.tolist()}
        d.update(self.cost.to_dict())
        d["w"] = self.w.tolist()
        d["w_f"] = self.w_f.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        w = d.pop("w", None)
        w_f = d.pop("w_f", None)
        hl = d.pop("theta_hl", np.ones(3))
        ha = d.pop("theta_ha", np.ones(3))
        return cls(hl, ha, CostParams.from_dict(d), w, w_f)


@dataclass
class Segment:
    """N recorded actions with their phases and references (N+1 state references)."""

    actions: np.ndarray
    phases: np.ndarray
    x_refs: np.ndarray
    u_refs: np.ndarray

    def __post_init__(self):
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        self.phases = np.ascontiguousarray(self.phases, dtype=np.bool_)
        self.x_refs = np.ascontiguousarray(self.x_refs, dtype=np.float64)
        self.u_refs = np.ascontiguousarray(self.u_refs, dtype=np.float64)
        n = self.actions.shape[0]
        if n < 1 or self.actions.shape != (n, 18) or self.u_refs.shape != (n, 18):
            raise ConfigError("segment needs N >= 1 actions of 18 entries")
        if self.phases.shape != (n, 2) or self.x_refs.shape != (n + 1, 18):
            raise ConfigError("segment phases/x_refs do not match the action count")
        for name in ("actions", "x_refs", "u_refs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFinite(f"segment {name} has non-finite entries")

    @property
    def horizon(self):
        return self.actions.shape[0]


@dataclass
class Trajectory:
    """Closed-loop record of M steps.

    ``states`` and ``x_refs`` carry M+1 rows (the last row is the state reached
    after the final action and its reference); actions, costs, times, phases and
    ``u_refs`` carry M rows.
    """

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    times: np.ndarray
    phases: np.ndarray
    x_refs: np.ndarray
    u_refs: np.ndarray
    dt: float = DT
    fell: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        self.costs = np.ascontiguousarray(self.costs, dtype=np.float64)
        self.times = np.ascontiguousarray(self.times, dtype=np.float64)
        self.phases = np.ascontiguousarray(self.phases, dtype=np.bool_)
        self.x_refs = np.ascontiguousarray(self.x_refs, dtype=np.float64)
        self.u_refs = np.ascontiguousarray(self.u_refs, dtype=np.float64)
        m = self.actions.shape[0]
        shapes = {"states": (m + 1, 18), "actions": (m, 18), "costs": (m,), "times": (m,),
                  "phases": (m, 2), "x_refs": (m + 1, 18), "u_refs": (m, 18)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"trajectory {name} has shape {getattr(self, name).shape}, expected {shape}")
        if m > 1 and np.max(np.abs(np.diff(self.times) - self.dt)) > 1e-9:
            raise ConfigError("trajectory times must be uniformly spaced by dt")
        if np.any(self.costs < 0):
            raise ConfigError("stage costs must be nonnegative")

    def __len__(self):
        return self.actions.shape[0]

    def valid_anchors(self, horizon):
        """Anchors k with a full segment of ``horizon`` actions (k + N <= M)."""
        return np.arange(max(len(self) - horizon + 1, 0))

    def segment(self, k, horizon) -> Segment:
        if k < 0 or k + horizon > len(self):
            raise ConfigError(f"anchor {k} has no full {horizon}-step segment")
        return Segment(self.actions[k:k + horizon], self.phases[k:k + horizon],
                       self.x_refs[k:k + horizon + 1], self.u_refs[k:k + horizon])

    def window(self, k, length) -> "Trajectory":
        """Sub-trajectory of ``length`` steps starting at step ``k``."""
        if k < 0 or length < 1 or k + length > len(self):
            raise ConfigError(f"window [{k}, {k + length}) lies outside the trajectory")
        sl, sl1 = slice(k, k + length), slice(k, k + length + 1)
        return Trajectory(self.states[sl1], self.actions[sl], self.costs[sl], self.times[sl],
                          self.phases[sl], self.x_refs[sl1], self.u_refs[sl], self.dt,
                          False, dict(self.meta, window_start=int(k)))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        arrays = ("states", "actions", "costs", "times", "phases", "x_refs", "u_refs")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.dt == other.dt and self.fell == other.fell)


@dataclass
class QEvaluation:
    value: float
    stage_costs: np.ndarray
    stage_penalties: np.ndarray
    terminal_cost: float
    terminal_penalty: float
    states: np.ndarray

    def breakdown_sum(self):
        return float(self.terminal_cost + self.terminal_penalty
                     + np.sum(self.stage_costs) + np.sum(self.stage_penalties))

    def records(self):
        """Per-stage rows for tabular export."""
        rows = [{"stage": i, "cost": float(c), "penalty": float(p)}
                for i, (c, p) in enumerate(zip(self.stage_costs, self.stage_penalties))]
        rows.append({"stage": len(rows), "cost": float(self.terminal_cost),
                     "penalty": float(self.terminal_penalty)})
        return rows


def _context(theta: ParamVector, dyn: DynParams, constraints: ConstraintConfig, dt):
    dyn = dyn or DynParams()
    constraints = constraints or ConstraintConfig()
    return (dyn.model_par(dt), constraints.con_par, constraints.q_min, constraints.q_max,
            theta.w, theta.w_f)


def _rollout(theta, s, segment, dyn, constraints, dt, want_grad):
    s = as_vector(s, name="state")
    mp, cp, qmin, qmax, w, wf = _context(theta, dyn, constraints, dt)
    out = K.rollout(theta.to_array(), s, segment.actions, segment.phases, segment.x_refs,
                    segment.u_refs, mp, cp, qmin, qmax, w, wf, want_grad)
    ROLLOUT_STATS["rollouts"] += 1
    ROLLOUT_STATS["model_steps"] += segment.horizon
    status, fail = out[0], out[1]
    if status != K.OK:
        _raise_for_status(status, int(fail))
    _, _, X, sc, sp, term, tpen, gth, gu = out
    value = term + tpen
    for i in range(segment.horizon):
        value += sc[i] + sp[i]
    return QEvaluation(float(value), sc, sp, float(term), float(tpen), X), gth, gu


def q_mpc(theta: ParamVector, s, segment: Segment, dyn: DynParams = None,
          constraints: ConstraintConfig = None, dt=DT) -> QEvaluation:
    """Undiscounted N-stage value of the recorded actions under the parameterized model.

    ``dyn`` supplies the fixed physical constants (mass, inertia, gravity); the
    momentum gains always come from ``theta``.
    """
    ev, _, _ = _rollout(theta, s, segment, dyn, constraints, dt, False)
    return ev


def q_mpc_gradient(theta: ParamVector, s, segment: Segment, dyn: DynParams = None,
                   constraints: ConstraintConfig = None, dt=DT):
    """``(grad, QEvaluation)`` with ``grad`` over the flattened parameter layout."""
    ev, gth, _ = _rollout(theta, s, segment, dyn, constraints, dt, True)
    return gth, ev


def q_meas_all(traj, gamma):
    """Discounted return-to-go at every step via ``Q(k) = l_k + gamma Q(k+1)``."""
    if not 0 < gamma <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    costs = traj.costs if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)
    if costs.shape[0] == 0:
        raise InsufficientData("empty trajectory")
    out = np.empty(costs.shape[0])
    acc = 0.0
    for k in range(costs.shape[0] - 1, -1, -1):
        acc = costs[k] + gamma * acc
        out[k] = acc
    return out


class Dataset:
    """Trajectories packed into contiguous arrays for batched rollouts.

    Row ``offsets[t] + k`` holds step ``k`` of trajectory ``t``. Each trajectory
    contributes ``M + 1`` rows so its terminal state and reference are present;
    the extra action row is zero padding and never read by a valid anchor.
    """

    def __init__(self, trajectories: List[Trajectory], horizon, gamma):
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        self.trajectories = list(trajectories)
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        S, A, ST, XR, UR, targets, anchors, owner = [], [], [], [], [], [], [], []
        offset = 0
        self.offsets = []
        for t, tr in enumerate(self.trajectories):
            m = len(tr)
            self.offsets.append(offset)
            S.append(tr.states)
            XR.append(tr.x_refs)
            A.append(np.vstack([tr.actions, np.zeros((1, 18))]))
            UR.append(np.vstack([tr.u_refs, np.zeros((1, 18))]))
            ST.append(np.vstack([tr.phases, np.ones((1, 2), dtype=bool)]))
            q = np.zeros(m + 1)
            if m > 0:
                q[:m] = q_meas_all(tr, gamma)
            targets.append(q)
            k = tr.valid_anchors(self.horizon)
            anchors.append(offset + k)
            owner.append(np.full(k.shape[0], t))
            offset += m + 1
        if not self.trajectories:
            raise InsufficientData("no trajectories")
        self.S = np.ascontiguousarray(np.vstack(S))
        self.A = np.ascontiguousarray(np.vstack(A))
        self.ST = np.ascontiguousarray(np.vstack(ST))
        self.XR = np.ascontiguousarray(np.vstack(XR))
        self.UR = np.ascontiguousarray(np.vstack(UR))
        self.targets_by_row = np.concatenate(targets)
        self.anchors = np.concatenate(anchors).astype(np.int64)
        self.anchor_owner = np.concatenate(owner).astype(np.int64)

    def __len__(self):
        return self.anchors.shape[0]

    def targets(self, anchors):
        return self.targets_by_row[anchors]

    def locate(self, anchor):
        """(trajectory index, step index) of a packed anchor row."""
        t = int(np.searchsorted(self.offsets, anchor, side="right") - 1)
        return t, int(anchor - self.offsets[t])

    def evaluate(self, theta: ParamVector, anchors, dyn: DynParams = None,
                 constraints: ConstraintConfig = None, want_grad=False, dt=DT):
        """Q^MPC values (and gradients) at packed anchor rows."""
        anchors = np.ascontiguousarray(anchors, dtype=np.int64)
        mp, cp, qmin, qmax, w, wf = _context(theta, dyn, constraints, dt)
        status, fail, values, grads = K.batch_rollouts(
            theta.to_array(), self.S, self.A, self.ST, self.XR, self.UR, anchors, self.horizon,
            mp, cp, qmin, qmax, w, wf, want_grad)
        ROLLOUT_STATS["rollouts"] += anchors.shape[0]
        ROLLOUT_STATS["model_steps"] += anchors.shape[0] * self.horizon
        bad = np.flatnonzero(status != K.OK)
        if bad.size:
            t, k = self.locate(anchors[bad[0]])
            try:
                _raise_for_status(status[bad[0]], int(fail[bad[0]]))
            except Exception as exc:
                exc.args = (f"{exc.args[0]} (trajectory {t}, anchor {k})",)
                raise
        return values, grads
