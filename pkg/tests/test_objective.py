import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costmatch.exceptions import ConfigError, NonFinite
from costmatch.model import DynParams, standing_state
from costmatch.objective import (COST_BLOCKS, CostParams, ReferencePoint, cost_partials, stage_cost,
                                 stage_cost_terms, terminal_cost)

from conftest import PHASES, random_input, random_state

INERTIA = np.array([1.5, 1.2, 0.8])


def random_costs(rng):
    return CostParams(**{name: rng.uniform(0, 2, size) for name, size in COST_BLOCKS.items()})


def naive_stage_cost(x, u, xr, ur, phase, c):
    """Plain-numpy restatement of the five cost terms."""
    trac = np.sum(c.theta_q * (x - xr) ** 2) + np.sum(c.theta_r * (u - ur) ** 2)
    e_base = np.r_[x[9:12] - xr[9:12], (x[3:6] - xr[3:6]) / INERTIA]
    base = np.sum(c.theta_base * e_base ** 2)
    mid = 0.5 * (x[12:14] + x[15:17])
    com = np.sum(c.theta_com * (x[6:8] - mid) ** 2)
    swing = torq = 0.0
    for i in range(2):
        p, v = x[12 + 3 * i:15 + 3 * i], u[12 + 3 * i:15 + 3 * i]
        if phase[i]:
            f, m = u[6 * i:6 * i + 3], u[6 * i + 3:6 * i + 6]
            tau = np.cross(p - x[6:9], f) + m
            torq += np.sum(c.theta_torq * tau ** 2)
        else:
            e = np.r_[p - xr[12 + 3 * i:15 + 3 * i], v - ur[12 + 3 * i:15 + 3 * i]]
            swing += np.sum(c.theta_sw[6 * i:6 * i + 6] * e ** 2)
    return trac + base + com + swing + torq


def random_case(rng, phase):
    x, u = random_state(rng), random_input(rng, phase)
    xr, ur = random_state(rng), random_input(rng, phase)
    return x, u, ReferencePoint(xr, ur)


def test_zero_at_reference():
    x = standing_state(0.75, 0.08)
    u = np.zeros(18)
    c = CostParams(**{name: np.ones(size) for name, size in COST_BLOCKS.items()})
    for phase in PHASES:
        assert stage_cost(x, u, ReferencePoint(x, u), phase, c) == 0.0


def test_zero_weights_give_zero(rng):
    x, u, ref = random_case(rng, (True, False))
    assert stage_cost(x, u, ref, (True, False), CostParams()) == 0.0


def test_tracking_only_matches_elementwise_sum(rng):
    x, u, ref = random_case(rng, (True, True))
    c = CostParams(theta_q=np.ones(18))
    naive = sum((a - b) ** 2 for a, b in zip(x, ref.x_ref))
    assert stage_cost(x, u, ref, (True, True), c) == pytest.approx(naive, rel=1e-13)


def test_full_cost_matches_naive_oracle():
    for seed in range(60):
        rng = np.random.default_rng(seed)
        phase = PHASES[seed % 3]
        x, u, ref = random_case(rng, phase)
        c = random_costs(rng)
        got = stage_cost(x, u, ref, phase, c)
        assert got == pytest.approx(naive_stage_cost(x, u, ref.x_ref, ref.u_ref, phase, c), rel=1e-12)


def test_terminal_cost(rng):
    x, xr = random_state(rng), random_state(rng)
    c = random_costs(rng)
    assert terminal_cost(xr, xr, c) == 0.0
    base = terminal_cost(x, xr, c)
    doubled = CostParams(**dict(c.to_dict(), theta_qf=2 * c.theta_qf))
    assert terminal_cost(x, xr, doubled) == 2 * base
    naive = np.sum(c.theta_qf * (x - xr) ** 2)
    assert abs(base - naive) / naive < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_costs_are_nonnegative_and_blockwise_linear(seed):
    rng = np.random.default_rng(seed)
    phase = PHASES[seed % 3]
    x, u, ref = random_case(rng, phase)
    c = random_costs(rng)
    total = stage_cost(x, u, ref, phase, c)
    assert total >= 0
    block = list(COST_BLOCKS)[seed % len(COST_BLOCKS)]
    scaled = CostParams(**dict(c.to_dict(), **{block: 3.0 * getattr(c, block)}))
    zeroed = CostParams(**dict(c.to_dict(), **{block: 0.0 * getattr(c, block)}))
    part = total - stage_cost(x, u, ref, phase, zeroed)
    assert stage_cost(x, u, ref, phase, scaled) == pytest.approx(total + 2 * part, rel=1e-11, abs=1e-9)


def test_partials_vanish_at_reference():
    x = standing_state(0.75, 0.08)
    u = np.zeros(18)
    c = CostParams(**{name: np.ones(size) for name, size in COST_BLOCKS.items()})
    g = cost_partials(x, u, ReferencePoint(x, u), (True, True), c)
    assert np.array_equal(g.d_x, np.zeros(18))
    assert np.array_equal(g.d_u, np.zeros(18))
    assert np.array_equal(g.d_params.to_array(), np.zeros(c.to_array().size))


def test_partials_match_finite_differences():
    h = 1e-6
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        phase = PHASES[seed % 3]
        x, u, ref = random_case(rng, phase)
        c = random_costs(rng)
        g = cost_partials(x, u, ref, phase, c)
        fx = np.empty(18)
        fu = np.empty(18)
        for j in range(18):
            e = np.zeros(18)
            e[j] = h
            fx[j] = (stage_cost(x + e, u, ref, phase, c) - stage_cost(x - e, u, ref, phase, c)) / (2 * h)
            fu[j] = (stage_cost(x, u + e, ref, phase, c) - stage_cost(x, u - e, ref, phase, c)) / (2 * h)
        # the cost is linear in each weight: the unit-weight cost is the exact partial
        arr = c.to_array()
        fth = np.empty(arr.size)
        for j in range(arr.size):
            unit = np.zeros(arr.size)
            unit[j] = 1.0
            fth[j] = stage_cost(x, u, ref, phase, CostParams.from_array(unit))
        for a, b in ((g.d_x, fx), (g.d_u, fu), (g.d_params.to_array(), fth)):
            worst = max(worst, np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
    assert worst < 1e-6


def test_tracking_weight_partials_nonnegative(rng):
    for phase in PHASES:
        x, u, ref = random_case(rng, phase)
        g = cost_partials(x, u, ref, phase, random_costs(rng))
        assert np.all(g.d_params.theta_q >= 0)
        assert np.allclose(g.d_params.theta_q, (x - ref.x_ref) ** 2, rtol=1e-15)


def test_validation_errors(rng):
    with pytest.raises(ConfigError):
        CostParams(theta_q=-np.ones(18))
    with pytest.raises(ConfigError):
        CostParams(theta_com=np.ones(3))
    x, u, ref = random_case(rng, (True, True))
    x[0] = np.inf
    with pytest.raises(NonFinite):
        stage_cost(x, u, ref, (True, True), CostParams(theta_q=np.ones(18)))


def test_term_breakdown_sums_to_total(rng):
    x, u, ref = random_case(rng, (False, True))
    c = random_costs(rng)
    terms = stage_cost_terms(x, u, ref, (False, True), c, DynParams())
    assert set(terms) == {"trac", "base", "com", "swing", "torq"}
    assert sum(terms.values()) == pytest.approx(stage_cost(x, u, ref, (False, True), c), rel=1e-15)
