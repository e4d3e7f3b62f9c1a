"""Parameterized stage and terminal costs with exact partials.

The stage cost is the sum of five diagonal quadratic forms: state/input tracking,
base posture and rate, CoM-over-feet, swing-foot tracking and a stance torque
proxy ``(p_i - p_b) x f_i + m_i``.
"""

from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .exceptions import ConfigError
from .model import DynParams, as_phase, as_vector

COST_BLOCKS = {name: size for name, size in K.THETA_BLOCKS[2:]}
TERM_NAMES = ("trac", "base", "com", "swing", "torq")


def _block(values, size, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ConfigError(f"{name} must have {size} entries, got shape {arr.shape}")
    return arr


@dataclass
class CostParams:
    """Diagonal weights of every cost block (all entries >= 0)."""

    theta_q: np.ndarray = field(default_factory=lambda: np.zeros(18))
    theta_r: np.ndarray = field(default_factory=lambda: np.zeros(18))
    theta_qf: np.ndarray = field(default_factory=lambda: np.zeros(18))
    theta_base: np.ndarray = field(default_factory=lambda: np.zeros(6))
    theta_com: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_sw: np.ndarray = field(default_factory=lambda: np.zeros(12))
    theta_torq: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _block(getattr(self, f.name), COST_BLOCKS[f.name], f.name))
            if np.any(getattr(self, f.name) < 0):
                raise ConfigError(f"{f.name} must be nonnegative")

    def to_array(self):
        return np.concatenate([getattr(self, name) for name in COST_BLOCKS])

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        out, o = {}, 0
        for name, size in COST_BLOCKS.items():
            out[name] = arr[o:o + size].copy()
            o += size
        return cls(**out)

    def scaled(self, factor):
        return CostParams.from_array(self.to_array() * factor)

    def to_dict(self):
        return {name: getattr(self, name).tolist() for name in COST_BLOCKS}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(COST_BLOCKS)
        if unknown:
            raise ConfigError(f"unknown cost blocks: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items()})


@dataclass
class ReferencePoint:
    """Per-stage references.

    The swing-foot pose reference is the foot part of ``x_ref`` and the swing-foot
    velocity reference (including the normal-velocity profile) the foot part of
    ``u_ref``.
    """

    x_ref: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        self.x_ref = as_vector(self.x_ref, name="x_ref")
        self.u_ref = as_vector(self.u_ref, name="u_ref")


def _theta_with_costs(c: CostParams):
    th = np.zeros(K.NTHETA)
    th[K.O_Q:] = c.to_array()
    return th


def stage_cost_terms(x, u, ref: ReferencePoint, phase, c: CostParams, dyn: DynParams = None):
    """The five cost terms as a dict keyed by ``TERM_NAMES``."""
    dyn = dyn or DynParams()
    x = as_vector(x, name="state")
    u = as_vector(u, name="input")
    terms = np.empty(5)
    K.stage_cost_terms(x, u, ref.x_ref, ref.u_ref, as_phase(phase), _theta_with_costs(c),
                       dyn.model_par(), terms)
    return dict(zip(TERM_NAMES, terms.tolist()))


def stage_cost(x, u, ref: ReferencePoint, phase, c: CostParams, dyn: DynParams = None):
    terms = stage_cost_terms(x, u, ref, phase, c, dyn)
    return float(sum(terms.values()))


def terminal_cost(x_n, x_ref_n, c: CostParams):
    x_n = as_vector(x_n, name="terminal state")
    x_ref_n = as_vector(x_ref_n, name="terminal reference")
    return float(K.terminal_cost(x_n, x_ref_n, _theta_with_costs(c)))


class CostPartials(NamedTuple):
    d_x: np.ndarray
    d_u: np.ndarray
    d_params: CostParams


def cost_partials(x, u, ref: ReferencePoint, phase, c: CostParams, dyn: DynParams = None):
    """Gradient of ``stage_cost`` w.r.t. state, input and each weight block."""
    dyn = dyn or DynParams()
    x = as_vector(x, name="state")
    u = as_vector(u, name="input")
    gx = np.zeros(18)
    gu = np.zeros(18)
    gth = np.zeros(K.NTHETA)
    K.stage_cost_grad(x, u, ref.x_ref, ref.u_ref, as_phase(phase), _theta_with_costs(c),
                      dyn.model_par(), gx, gu, gth)
    # d/d theta_qf of the stage cost is zero; the terminal cost owns that block
    return CostPartials(gx, gu, CostParams.from_array(gth[K.O_Q:]))
