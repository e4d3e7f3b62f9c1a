"""Cost-matching loss, projected SGD and convergence diagnostics.

The loss is the mean squared gap between the rollout value ``Q^MPC_theta`` at
recorded anchors and the measured discounted return from the same anchors.
Training only ever rolls the model along recorded actions; it never calls the
deployment solver.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import _kernels as K
from .constraints import ConstraintConfig
from .exceptions import ConfigError, InsufficientData
from .model import DT, DynParams
from .valuation import (P, Dataset, ParamVector, Segment, Trajectory, param_names,
                        q_mpc, q_mpc_gradient)

GAIN_FLOOR = 1e-3


def default_lower_bounds():
    lb = np.zeros(P)
    lb[:6] = GAIN_FLOOR
    return lb


def block_mask(blocks):
    """Boolean mask over the flat layout selecting whole blocks (or ``block[j]`` entries)."""
    names = param_names()
    mask = np.zeros(P, dtype=bool)
    for b in blocks:
        hits = [i for i, n in enumerate(names) if n == b or n.startswith(b + "[")]
        if not hits:
            raise ConfigError(f"unknown parameter block {b!r}")
        mask[hits] = True
    return mask


@dataclass
class LearnConfig:
    gamma: float = 0.985
    alpha: Union[float, str] = "auto"
    batch_size: Optional[int] = 32
    updates_per_round: int = 300
    rounds: int = 5
    theta_lower_bounds: Optional[np.ndarray] = None
    rng_seed: int = 0
    horizon: int = 20
    trainable: Optional[Sequence[str]] = None
    validation_fraction: float = 0.2
    smoothness_probes: int = 6
    smoothness_radius: float = 1e-3
    smoothness_batches: int = 8

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.alpha != "auto" and not float(self.alpha) > 0:
            raise ConfigError("alpha must be positive or 'auto'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive (or None for full batch)")
        if self.updates_per_round < 0 or self.rounds < 0 or self.horizon < 1:
            raise ConfigError("updates_per_round, rounds >= 0 and horizon >= 1 required")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.smoothness_probes < 2:
            raise ConfigError("smoothness_probes must be >= 2")
        if self.smoothness_batches < 0:
            raise ConfigError("smoothness_batches must be >= 0")
        lb = default_lower_bounds() if self.theta_lower_bounds is None else \
            np.asarray(self.theta_lower_bounds, dtype=np.float64)
        if lb.shape != (P,) or np.any(lb < 0):
            raise ConfigError(f"theta_lower_bounds must be {P} nonnegative entries")
        self.theta_lower_bounds = np.maximum(lb, default_lower_bounds())

    @property
    def mask(self):
        if self.trainable is None:
            return np.ones(P, dtype=bool)
        return block_mask(self.trainable)


@dataclass
class TrainDiagnostics:
    losses: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    step_norms: List[float] = field(default_factory=list)
    val_mse_before: List[float] = field(default_factory=list)
    val_mse_after: List[float] = field(default_factory=list)
    theta_snapshots: List[np.ndarray] = field(default_factory=list)
    smoothness: List[float] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    solve_calls: int = 0

    def extend(self, other: "TrainDiagnostics"):
        for name in ("losses", "grad_norms", "step_norms", "val_mse_before", "val_mse_after",
                     "theta_snapshots", "smoothness", "alphas"):
            getattr(self, name).extend(getattr(other, name))
        self.solve_calls += other.solve_calls

    def records(self):
        return [{"update": i, "loss": l, "grad_norm": g, "step_norm": s}
                for i, (l, g, s) in enumerate(zip(self.losses, self.grad_norms, self.step_norms))]


class Sample(NamedTuple):
    state: np.ndarray
    segment: Segment
    target: float


class AnchorBatch(NamedTuple):
    dataset: Dataset
    anchors: np.ndarray


@dataclass
class Context:
    """Fixed physical constants and constraint geometry shared by every evaluation."""

    dyn: DynParams = field(default_factory=DynParams)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    dt: float = DT


def _ctx(ctx):
    return ctx if ctx is not None else Context()


def batch_values(theta: ParamVector, batch, ctx: Context = None, want_grad=False):
    """(values, targets, grads) for an AnchorBatch or a sequence of Samples."""
    ctx = _ctx(ctx)
    if isinstance(batch, AnchorBatch):
        values, grads = batch.dataset.evaluate(theta, batch.anchors, ctx.dyn, ctx.constraints,
                                               want_grad, ctx.dt)
        return values, batch.dataset.targets(batch.anchors), grads
    samples = list(batch)
    if not samples:
        raise InsufficientData("empty batch")
    values = np.empty(len(samples))
    grads = np.zeros((len(samples), P))
    for i, smp in enumerate(samples):
        if want_grad:
            g, ev = q_mpc_gradient(theta, smp.state, smp.segment, ctx.dyn, ctx.constraints, ctx.dt)
            grads[i] = g
        else:
            ev = q_mpc(theta, smp.state, smp.segment, ctx.dyn, ctx.constraints, ctx.dt)
        values[i] = ev.value
    return values, np.array([s.target for s in samples], dtype=np.float64), grads


def matching_loss(theta: ParamVector, batch, ctx: Context = None):
    values, targets, _ = batch_values(theta, batch, ctx)
    if values.shape[0] == 0:
        raise InsufficientData("empty batch")
    r = values - targets
    return float(np.mean(r * r))


def loss_and_gradient(theta: ParamVector, batch, ctx: Context = None):
    values, targets, grads = batch_values(theta, batch, ctx, want_grad=True)
    if values.shape[0] == 0:
        raise InsufficientData("empty batch")
    r = values - targets
    g = (2.0 * r) @ grads / r.shape[0]
    return float(np.mean(r * r)), g


def loss_gradient(theta: ParamVector, batch, ctx: Context = None):
    """Mean over the batch of ``2 (Q^MPC - Q^meas) grad Q^MPC``."""
    return loss_and_gradient(theta, batch, ctx)[1]


def sgd_step(theta, grad, cfg: LearnConfig, alpha=None, mask=None):
    """Projected step ``clamp(theta - alpha grad, lower, inf)``; frozen entries never move."""
    arr = theta.to_array() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    alpha = float(cfg.alpha if alpha is None else alpha)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (P,):
        raise ConfigError(f"gradient must have {P} entries")
    step = alpha * grad
    if mask is not None:
        step = np.where(mask, step, 0.0)
    new = np.maximum(arr - step, cfg.theta_lower_bounds)
    if mask is not None:
        new = np.where(mask, new, arr)
    return theta.with_array(new) if isinstance(theta, ParamVector) else new


def estimate_smoothness(theta: ParamVector, dataset: Dataset, probes=6, seed=0, anchors=None,
                        ctx: Context = None, mask=None, radius=1e-3, lower=None):
    """Empirical Lipschitz constant of the full-batch loss gradient, times 2.

    The first probe direction is random; each later one is the previous gradient
    difference, i.e. a power iteration on the local Hessian, so the estimate
    approaches the largest curvature rather than an average one.
    """
    if probes < 2:
        raise ConfigError("probes must be >= 2")
    anchors = dataset.anchors if anchors is None else anchors
    batch = AnchorBatch(dataset, anchors)
    rng = np.random.default_rng(seed)
    lower = default_lower_bounds() if lower is None else lower
    base = theta.to_array()
    scale = radius
    _, g0 = loss_and_gradient(theta, batch, ctx)
    direction = rng.standard_normal(P)
    best = 0.0
    for _ in range(probes):
        if mask is not None:
            direction = np.where(mask, direction, 0.0)
        nrm = np.linalg.norm(direction)
        if nrm == 0:
            break
        probe = np.maximum(base + scale * direction / nrm, lower)
        delta = probe - base
        dn = np.linalg.norm(delta)
        if dn == 0:
            direction = rng.standard_normal(P)
            continue
        _, g1 = loss_and_gradient(theta.with_array(probe), batch, ctx)
        diff = g1 - g0
        if mask is not None:
            diff = np.where(mask, diff, 0.0)
        best = max(best, float(np.linalg.norm(diff)) / dn)
        direction = diff if np.linalg.norm(diff) > 0 else rng.standard_normal(P)
    return 2.0 * best


def split_anchors(dataset: Dataset, fraction, seed):
    """Fixed (train, validation) split of the packed anchors."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_val = int(round(fraction * len(dataset)))
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return dataset.anchors[train], dataset.anchors[val]


def sample_batch(rng, anchors, batch_size):
    """Uniform draw with replacement, so the batch gradient is unbiased; None means all."""
    if batch_size is None:
        return anchors
    return anchors[rng.integers(0, anchors.shape[0], batch_size)]


def train_round(theta: ParamVector, trajectories: List[Trajectory], cfg: LearnConfig,
                ctx: Context = None):
    """One learning half of an on-policy round: ``updates_per_round`` projected SGD steps."""
    from . import mpc

    ctx = _ctx(ctx)
    calls_before = mpc.SOLVE_CALLS["count"]
    if np.any(cfg.theta_lower_bounds > theta.to_array() + 1e-15):
        raise ConfigError("theta_lower_bounds must not exceed the initial parameters")
    dataset = Dataset(trajectories, cfg.horizon, cfg.gamma)
    if len(dataset) == 0:
        raise InsufficientData(f"no trajectory has a full {cfg.horizon}-step segment")
    train, val = split_anchors(dataset, cfg.validation_fraction, cfg.rng_seed)
    if train.shape[0] == 0:
        raise InsufficientData("no training anchors after the validation split")
    rng = np.random.default_rng([cfg.rng_seed, 1])
    mask = cfg.mask
    diag = TrainDiagnostics()
    if val.shape[0]:
        diag.val_mse_before.append(matching_loss(theta, AnchorBatch(dataset, val), ctx))
    if cfg.alpha == "auto":
        sub = train if train.shape[0] <= 512 else np.sort(rng.choice(train, 512, replace=False))
        l_hat = estimate_smoothness(theta, dataset, cfg.smoothness_probes, cfg.rng_seed, sub, ctx,
                                    mask, cfg.smoothness_radius, cfg.theta_lower_bounds)
        if cfg.batch_size is not None:
            # single mini-batches can be several times stiffer than the whole set;
            # a step sized for the average one overshoots on the stiff ones
            for _ in range(cfg.smoothness_batches):
                idx = sample_batch(rng, train, cfg.batch_size)
                l_hat = max(l_hat, estimate_smoothness(
                    theta, dataset, cfg.smoothness_probes, cfg.rng_seed, idx, ctx, mask,
                    cfg.smoothness_radius, cfg.theta_lower_bounds))
        diag.smoothness.append(l_hat)
        alpha = 1.0 / l_hat if l_hat > 0 else 0.0
    else:
        alpha = float(cfg.alpha)
    diag.alphas.append(alpha)
    for _ in range(cfg.updates_per_round):
        idx = sample_batch(rng, train, cfg.batch_size)
        loss, g = loss_and_gradient(theta, AnchorBatch(dataset, idx), ctx)
        new = sgd_step(theta, g, cfg, alpha, mask)
        diag.losses.append(loss)
        diag.grad_norms.append(float(np.linalg.norm(np.where(mask, g, 0.0))))
        diag.step_norms.append(float(np.linalg.norm(new.to_array() - theta.to_array())))
        theta = new
    if val.shape[0]:
        diag.val_mse_after.append(matching_loss(theta, AnchorBatch(dataset, val), ctx))
    diag.theta_snapshots.append(theta.to_array())
    diag.solve_calls = mpc.SOLVE_CALLS["count"] - calls_before
    return theta, diag


def full_batch_descent(theta: ParamVector, dataset: Dataset, alpha, iterations, cfg: LearnConfig,
                       ctx: Context = None, anchors=None):
    """Deterministic projected gradient descent on the full-batch loss.

    Returns (theta, losses, grad_norms, mapping_norms) where ``losses[j]`` is the
    loss at the j-th iterate (``iterations + 1`` entries) and ``mapping_norms``
    is ``||theta_j - theta_{j+1}|| / alpha``, equal to the gradient norm when no
    bound is active.
    """
    batch = AnchorBatch(dataset, dataset.anchors if anchors is None else anchors)
    mask = cfg.mask
    losses, grads, maps = [], [], []
    for _ in range(iterations):
        loss, g = loss_and_gradient(theta, batch, ctx)
        g = np.where(mask, g, 0.0)
        new = sgd_step(theta, g, cfg, alpha, mask)
        losses.append(loss)
        grads.append(float(np.linalg.norm(g)))
        maps.append(float(np.linalg.norm(theta.to_array() - new.to_array())) / alpha)
        theta = new
    losses.append(matching_loss(theta, batch, ctx))
    return theta, np.array(losses), np.array(grads), np.array(maps)
