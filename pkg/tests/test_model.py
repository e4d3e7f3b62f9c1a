import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costmatch.exceptions import ConfigError, Diverged, EulerSingular, NonFinite
from costmatch.model import (DT, DynParams, GaitSchedule, continuous_derivative, equilibrium_input,
                             standing_state, step, step_partials)

from conftest import PHASES, max_rel, random_input, random_state

M = 30.0


def test_balanced_rest_has_zero_derivative():
    p = DynParams()
    x = standing_state()
    u = equilibrium_input(p)
    assert np.array_equal(continuous_derivative(x, u, (True, True), p), np.zeros(18))


def test_zero_wrench_is_free_fall():
    p = DynParams()
    d = continuous_derivative(standing_state(), np.zeros(18), (True, True), p)
    expected = np.zeros(18)
    expected[2] = -M * 9.81
    assert np.allclose(d, expected, rtol=0, atol=1e-12)


def test_gain_doubling_scales_contact_part_only(rng):
    for phase in PHASES:
        x = random_state(rng)
        u = random_input(rng, phase)
        one = continuous_derivative(x, u, phase, DynParams())
        two = continuous_derivative(x, u, phase, DynParams(theta_hl=[2, 2, 2]))
        g = np.array([0, 0, -M * 9.81])
        assert np.allclose(two[0:3] - g, 2 * (one[0:3] - g), rtol=1e-13, atol=1e-10)
        assert np.array_equal(two[3:], one[3:])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.2, 3.0), st.floats(0.2, 3.0))
def test_gain_linearity_property(seed, a, b):
    rng = np.random.default_rng(seed)
    phase = PHASES[seed % 3]
    x, u = random_state(rng), random_input(rng, phase)
    g = np.array([0, 0, -M * 9.81])
    da = continuous_derivative(x, u, phase, DynParams(theta_hl=[a] * 3, theta_ha=[b] * 3))
    d1 = continuous_derivative(x, u, phase, DynParams())
    assert np.allclose(da[0:3] - g, a * (d1[0:3] - g), rtol=1e-12, atol=1e-9)
    assert np.allclose(da[3:6], b * d1[3:6], rtol=1e-12, atol=1e-9)


def test_equilibrium_is_fixed_point_of_step():
    p = DynParams()
    x = standing_state()
    for dt in (0.001, 0.01, 0.05):
        assert np.array_equal(step(x, equilibrium_input(p), (True, True), p, dt), x)


def test_free_fall_step_closed_form():
    p = DynParams()
    x = standing_state()
    x1 = step(x, np.zeros(18), (True, True), p, 0.01)
    assert x1[2] == pytest.approx(-30 * 9.81 * 0.01, rel=1e-14)
    assert x1[8] - x[8] == pytest.approx(-9.81 * 0.01 ** 2 / 2, rel=1e-10)


def test_rk4_step_halving_orders(rng):
    p = DynParams()
    x = random_state(rng, tilt=0.1)
    u = random_input(rng, (True, False))
    phase = (True, False)

    def local(dt):
        return np.max(np.abs(step(x, u, phase, p, dt) - step(step(x, u, phase, p, dt / 2), u, phase, p, dt / 2)))

    def rollout(dt, T=0.16):
        y = x
        for _ in range(int(round(T / dt))):
            y = step(y, u, phase, p, dt)
        return y

    # local error O(dt^5): one-step vs two half-steps shrinks ~32x per halving
    assert 26 < local(0.01) / local(0.005) < 38
    # global error O(dt^4) on a fixed interval: ~16x per halving
    ref = rollout(0.00125)
    e1 = np.max(np.abs(rollout(0.04) - ref))
    e2 = np.max(np.abs(rollout(0.02) - ref))
    assert 12 < e1 / e2 < 20


def fd_partials(x, u, phase, p, h=1e-6):
    dx = np.empty((18, 18))
    du = np.empty((18, 18))
    dg = np.empty((18, 6))
    for j in range(18):
        e = np.zeros(18)
        e[j] = h
        dx[:, j] = (step(x + e, u, phase, p) - step(x - e, u, phase, p)) / (2 * h)
        du[:, j] = (step(x, u + e, phase, p) - step(x, u - e, phase, p)) / (2 * h)
    for j in range(6):
        g = p.gains
        gp, gm = g.copy(), g.copy()
        gp[j] += h
        gm[j] -= h
        pp = DynParams(gp[:3], gp[3:])
        pm = DynParams(gm[:3], gm[3:])
        dg[:, j] = (step(x, u, phase, pp) - step(x, u, phase, pm)) / (2 * h)
    return dx, du, dg


def test_step_partials_match_finite_differences():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        phase = PHASES[seed % 3]
        p = DynParams(rng.uniform(0.7, 1.3, 3), rng.uniform(0.7, 1.3, 3))
        x, u = random_state(rng), random_input(rng, phase)
        analytic = step_partials(x, u, phase, p)
        for a, f in zip(analytic, fd_partials(x, u, phase, p)):
            worst = max(worst, max_rel(a, f))
    assert worst < 1e-5


def test_gain_partial_at_equilibrium_goes_through_force_channel():
    p = DynParams()
    x = standing_state()
    u = equilibrium_input(p)
    _, _, dg = step_partials(x, u, (True, True), p)
    col = dg[:, 2]
    assert col[2] == pytest.approx(u[2] * 2 * DT, rel=1e-12)
    assert col[2] > 0
    _, _, fd = fd_partials(x, u, (True, True), p)
    assert max_rel(dg, fd) < 1e-6


def test_gain_partials_vanish_without_wrench():
    p = DynParams()
    x = standing_state()
    u = np.zeros(18)
    u[12:] = 0.3
    _, _, dg = step_partials(x, u, (False, False), p)
    assert np.array_equal(dg, np.zeros((18, 6)))


def test_stance_feet_never_move(rng):
    p = DynParams()
    x = random_state(rng)
    u = random_input(rng, (True, False))
    u[12:18] = 5.0
    y = step(x, u, (True, False), p)
    assert np.array_equal(y[12:15], x[12:15])
    assert not np.array_equal(y[15:18], x[15:18])


def test_step_is_deterministic(rng):
    p = DynParams()
    x, u = random_state(rng), random_input(rng, (True, True))
    assert np.array_equal(step(x, u, (True, True), p), step(x, u, (True, True), p))


def test_errors():
    p = DynParams()
    x = standing_state()
    bad = x.copy()
    bad[10] = np.pi / 2 - 1e-4
    with pytest.raises(EulerSingular):
        continuous_derivative(bad, np.zeros(18), (True, True), p)
    bad = x.copy()
    bad[3] = np.nan
    with pytest.raises(NonFinite):
        step(bad, np.zeros(18), (True, True), p)
    big = x.copy()
    big[0] = 5e8
    u = np.zeros(18)
    u[0] = 1e12
    with pytest.raises(Diverged):
        step(big, u, (True, True), p, 0.01)
    with pytest.raises(ConfigError):
        DynParams(theta_hl=[1, 0, 1])
    with pytest.raises(ConfigError):
        step(x, u, (True, True), p, 0.0)


def test_gait_schedule_invariants():
    g = GaitSchedule.walking(1.0, 0.3, 0.05)
    g.validate()
    ks = range(g.steps_per_period())
    assert all(any(g.phase_at_step(k)) for k in ks)
    assert GaitSchedule.from_dict(g.to_dict()).to_dict() == g.to_dict()
    flight = dict(g.to_dict(), right=[[0.0, 0.3, "swing"], [0.3, 1.0, "stance"]])
    with pytest.raises(ConfigError, match="flight"):
        GaitSchedule.from_dict(flight).validate()
    overlap = dict(g.to_dict(), left=[[0.0, 0.4, "stance"], [0.3, 1.0, "stance"]])
    with pytest.raises(ConfigError):
        GaitSchedule.from_dict(overlap).validate()


def test_swing_profile_integral_is_trapezoid():
    g = GaitSchedule.walking(1.0, 0.3, 0.05)
    vmax = 4 * 0.05 / 0.3
    assert g.vz_integral(0.5) == pytest.approx(0.5 * 0.5 * vmax, rel=1e-14)
    assert g.vz_integral(1.0) == pytest.approx(0.0, abs=1e-15)
    # lifted height at mid-swing equals the clearance
    assert 0.3 * g.vz_integral(0.5) == pytest.approx(0.05, rel=1e-14)
