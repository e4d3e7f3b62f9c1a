import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costmatch import _kernels as K
from costmatch.constraints import (RESIDUAL_NAMES, ConstraintConfig, default_penalty_weights,
                                   input_violation, penalty, penalty_partials, project_input,
                                   residuals, terminal_residuals)
from costmatch.exceptions import ConfigError
from costmatch.model import standing_state
from costmatch.objective import ReferencePoint

from conftest import PHASES, random_input, random_state

CFG = ConstraintConfig()
W, WF = default_penalty_weights()


def ref_zero():
    return ReferencePoint(standing_state(0.75, 0.08), np.zeros(18))


def standing_input(fz=147.15):
    u = np.zeros(18)
    u[[2, 8]] = fz
    return u


def naive_pre(x, u, phase, ur, cfg):
    """Unclipped residuals from their geometric definitions."""
    out = np.zeros(K.NRES)
    com = x[6:9]
    yaw = x[9]
    rot = np.array([[math.cos(yaw), math.sin(yaw), 0], [-math.sin(yaw), math.cos(yaw), 0], [0, 0, 1]])
    for i in range(2):
        w = u[6 * i:6 * i + 6]
        if phase[i]:
            out[i] = math.hypot(w[0], w[1]) - cfg.mu * w[2]
            out[2 + 2 * i] = abs(w[3]) - cfg.d_y * w[2]
            out[3 + 2 * i] = abs(w[4]) - cfg.d_x * w[2]
            out[31 + 3 * i:34 + 3 * i] = u[12 + 3 * i:15 + 3 * i]
        else:
            out[19 + 6 * i:25 + 6 * i] = w
            out[37 + i] = u[14 + 3 * i] - ur[14 + 3 * i]
        d = rot @ (x[12 + 3 * i:15 + 3 * i] - com)
        out[6 + 6 * i:9 + 6 * i] = d - cfg.q_max[i]
        out[9 + 6 * i:12 + 6 * i] = cfg.q_min[i] - d
    out[18] = cfg.d_safe - np.linalg.norm(x[12:15] - x[15:18])
    return out


def test_layout():
    assert len(RESIDUAL_NAMES) == K.NRES == 39
    assert K.NRES_TERMINAL == 13
    assert np.all(W[:K.N_INEQ] == 1e3) and np.all(W[K.N_INEQ:] == 1e4)


def test_feasible_standing_has_zero_residuals():
    x = standing_state(0.75, 0.08)
    for fz in (0.0, 50.0, 147.15):
        r = residuals(x, standing_input(fz), (True, True), ref_zero(), CFG)
        assert np.array_equal(r.values, np.zeros(K.NRES))
    assert np.array_equal(terminal_residuals(x, CFG).values, np.zeros(K.NRES_TERMINAL))


def test_friction_violation_value():
    u = standing_input(100.0)
    u[0] = CFG.mu * 100 * 1.01
    r = residuals(standing_state(0.75, 0.08), u, (True, True), ref_zero(), CFG)
    assert r.values[K.R_FRICTION] == pytest.approx(0.01 * CFG.mu * 100, rel=1e-12)
    assert np.count_nonzero(r.values) == 1


def test_swing_force_gives_single_equality_entry():
    u = standing_input(147.15)
    u[6:12] = 0.0
    u[6] = 1.0
    r = residuals(standing_state(0.75, 0.08), u, (True, False), ref_zero(), CFG)
    assert np.count_nonzero(r.values) == 1
    assert r.as_dict()["swing_wrench_fx_R"] == 1.0


def test_residuals_match_naive_geometry():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        phase = PHASES[seed % 3]
        x = random_state(rng)
        x[12:18] += rng.normal(0, 0.3, 6)
        u = random_input(rng, phase, spread=60.0)
        ur = random_input(rng, phase)
        pre = naive_pre(x, u, phase, ur, CFG)
        clipped = np.r_[np.maximum(pre[:K.N_INEQ], 0), pre[K.N_INEQ:]]
        got = residuals(x, u, phase, ReferencePoint(x, ur), CFG).values
        assert np.allclose(got, clipped, rtol=1e-12, atol=1e-12)
        term = terminal_residuals(x, CFG).values
        assert np.allclose(term, np.maximum(pre[K.R_WORKSPACE:K.R_DSAFE + 1], 0), rtol=1e-12, atol=1e-12)


def test_penalty_homogeneity_and_naive_sum(rng):
    x = random_state(rng)
    u = random_input(rng, (True, False), spread=80.0)
    r = residuals(x, u, (True, False), ref_zero(), CFG)
    base = penalty(r, W)
    assert base > 0
    assert penalty(2 * r.values, W) == pytest.approx(4 * base, rel=1e-14)
    assert base == pytest.approx(sum(w * v * v for w, v in zip(W, r.values)), rel=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1.0, 10.0))
def test_penalty_monotone_in_violation(seed, scale):
    rng = np.random.default_rng(seed)
    r = np.abs(rng.normal(0, 1, K.NRES))
    assert penalty(scale * r, W) >= penalty(r, W)
    assert penalty(np.zeros(K.NRES), W) == 0.0


def test_penalty_rejects_bad_weights():
    with pytest.raises(ConfigError):
        penalty(np.zeros(K.NRES), np.zeros(K.NRES))
    with pytest.raises(ConfigError):
        penalty(np.zeros(K.NRES), np.ones(5))


def test_projection_examples():
    u = standing_input(100.0)
    u[0] = 3 * CFG.mu * 100
    p = project_input(u, (True, True), CFG)
    assert p[0] == pytest.approx(CFG.mu * 100, rel=1e-15)
    assert p[1] == 0.0 and p[2] == 100.0
    u = standing_input(100.0)
    u[6:12] = [5, -3, 40, 1, 2, 3]
    u[15:18] = 0.4
    p = project_input(u, (True, False), CFG)
    assert np.array_equal(p[6:12], np.zeros(6))
    assert np.array_equal(p[15:18], u[15:18])
    u = standing_input(-20.0)
    u[0] = 4.0
    p = project_input(u, (True, True), CFG)
    assert p[2] == 0.0 and p[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_projection_idempotent_and_feasible(seed):
    rng = np.random.default_rng(seed)
    phase = PHASES[seed % 3]
    u = random_input(rng, phase, spread=200.0)
    p = project_input(u, phase, CFG)
    assert np.array_equal(project_input(p, phase, CFG), p)
    assert input_violation(p, phase, CFG) == 0.0
    r = residuals(standing_state(0.75, 0.08), p, phase, ReferencePoint(standing_state(), p), CFG)
    assert np.all(r.values[K.R_FRICTION:K.R_WORKSPACE] == 0)
    assert np.all(r.values[K.R_SWING_WRENCH:K.R_SWING_VZ] == 0)


def test_penalty_partials_match_finite_differences():
    h = 1e-6
    worst = 0.0
    checked = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        phase = PHASES[seed % 3]
        x = random_state(rng)
        x[12:18] += rng.normal(0, 0.3, 6)
        u = random_input(rng, phase, spread=60.0)
        ref = ReferencePoint(x, random_input(rng, phase))
        pre = naive_pre(x, u, phase, ref.u_ref, CFG)
        if np.min(np.abs(pre[:K.N_INEQ][pre[:K.N_INEQ] != 0])) < 1e-3:
            continue
        checked += 1
        gx, gu = penalty_partials(x, u, phase, ref, CFG, W)

        def f(xx, uu):
            return penalty(residuals(xx, uu, phase, ref, CFG), W)

        fx = np.empty(18)
        fu = np.empty(18)
        for j in range(18):
            e = np.zeros(18)
            e[j] = h
            fx[j] = (f(x + e, u) - f(x - e, u)) / (2 * h)
            fu[j] = (f(x, u + e) - f(x, u - e)) / (2 * h)
        scale = max(np.max(np.abs(fx)), np.max(np.abs(fu)), 1e-12)
        worst = max(worst, np.max(np.abs(gx - fx)) / scale, np.max(np.abs(gu - fu)) / scale)
    assert checked >= 100
    assert worst < 1e-5


def test_config_validation():
    with pytest.raises(ConfigError):
        ConstraintConfig(mu=0.0)
    with pytest.raises(ConfigError):
        ConstraintConfig(q_min=np.ones((2, 3)), q_max=np.zeros((2, 3)))
