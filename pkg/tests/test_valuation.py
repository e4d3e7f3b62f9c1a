import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costmatch.constraints import ConstraintConfig, penalty, residuals, terminal_residuals
from costmatch.exceptions import ConfigError, InsufficientData
from costmatch.gradcheck import audit, random_instance
from costmatch.model import DT, standing_state, step
from costmatch.objective import CostParams, ReferencePoint, stage_cost, terminal_cost
from costmatch.valuation import (P, ROLLOUT_STATS, Dataset, ParamVector, Segment, Trajectory,
                                 param_names, q_meas_all, q_mpc, q_mpc_gradient)

CFG = ConstraintConfig()


def naive_q(theta, s, seg):
    """Python-level rollout built from the public step, cost and residual functions."""
    dyn = theta.dyn_params()
    x = np.array(s)
    total = 0.0
    for i in range(seg.horizon):
        u, ph = seg.actions[i], tuple(seg.phases[i])
        ref = ReferencePoint(seg.x_refs[i], seg.u_refs[i])
        total += stage_cost(x, u, ref, ph, theta.cost)
        total += penalty(residuals(x, u, ph, ref, CFG), theta.w)
        x = step(x, u, ph, dyn)
    total += terminal_cost(x, seg.x_refs[-1], theta.cost)
    total += penalty(terminal_residuals(x, CFG), theta.w_f)
    return total


def make_trajectory(costs, rng=None):
    m = len(costs)
    x = standing_state(0.75, 0.08)
    states = np.tile(x, (m + 1, 1))
    actions = np.zeros((m, 18))
    actions[:, [2, 8]] = 147.15
    return Trajectory(states, actions, np.asarray(costs, dtype=float), np.arange(m) * DT,
                      np.ones((m, 2), bool), states.copy(), actions.copy())


def test_param_layout():
    assert P == 83
    names = param_names()
    assert len(names) == P and names[0] == "theta_hl[0]" and names[-1] == "theta_torq[2]"
    th = ParamVector(cost=CostParams(theta_q=np.arange(18.0)))
    assert np.array_equal(ParamVector.from_array(th.to_array()).to_array(), th.to_array())
    assert np.array_equal(ParamVector.from_dict(th.to_dict()).to_array(), th.to_array())
    with pytest.raises(ConfigError):
        ParamVector(theta_hl=[1, -1, 1])


def test_single_stage_with_zero_weights_is_zero():
    x = standing_state(0.75, 0.08)
    u = np.zeros(18)
    u[[2, 8]] = 147.15
    seg = Segment(u[None], np.ones((1, 2), bool), np.tile(x, (2, 1)), u[None])
    assert q_mpc(ParamVector(), x, seg).value == 0.0


def test_three_stage_tracking_only_hand_loop(rng):
    theta = ParamVector(cost=CostParams(theta_q=np.ones(18)))
    x0 = standing_state(0.75, 0.08)
    U = np.zeros((3, 18))
    U[:, [2, 8]] = 150.0
    XR = np.tile(x0, (4, 1))
    seg = Segment(U, np.ones((3, 2), bool), XR, U)
    x = x0.copy()
    expected = 0.0
    for i in range(3):
        expected += np.sum((x - XR[i]) ** 2)
        x = step(x, U[i], (True, True), theta.dyn_params())
    ev = q_mpc(theta, x0, seg)
    assert ev.value == pytest.approx(expected, rel=1e-12)
    assert ev.terminal_cost == 0.0 and ev.terminal_penalty == 0.0


def test_matches_naive_rollout_on_random_instances():
    for seed in range(20):
        theta, s, seg = random_instance(np.random.default_rng(seed), horizon=12)
        ev = q_mpc(theta, s, seg)
        assert ev.value == pytest.approx(naive_q(theta, s, seg), rel=1e-11)
        assert ev.value == pytest.approx(ev.breakdown_sum(), rel=1e-14)
        assert len(ev.records()) == seg.horizon + 1


def test_penalty_weight_doubling_on_friction_violation():
    x0 = standing_state(0.75, 0.08)
    U = np.zeros((2, 18))
    U[:, [2, 8]] = 147.15
    U[:, 0] = 0.7 * 147.15 + 5.0
    seg = Segment(U, np.ones((2, 2), bool), np.tile(x0, (3, 1)), U)
    th = ParamVector()
    one = q_mpc(th, x0, seg)
    two = q_mpc(ParamVector(w=2 * th.w, w_f=th.w_f), x0, seg)
    assert np.sum(one.stage_penalties) > 0
    assert two.value - one.value == pytest.approx(np.sum(one.stage_penalties), rel=1e-12)


def test_weight_gradient_equals_unit_weight_values():
    theta, s, seg = random_instance(np.random.default_rng(7), horizon=10)
    g, ev = q_mpc_gradient(theta, s, seg)
    assert ev.value == q_mpc(theta, s, seg).value
    w_only = q_mpc(theta.with_array(np.r_[theta.to_array()[:6], np.zeros(P - 6)]), s, seg).value
    for j in range(6, P, 7):
        arr = np.r_[theta.to_array()[:6], np.zeros(P - 6)]
        arr[j] = 1.0
        expected = q_mpc(theta.with_array(arr), s, seg).value - w_only
        # differencing two full values loses digits relative to the penalty-only part
        assert g[j] == pytest.approx(expected, rel=1e-9, abs=1e-12 * w_only)


def test_gain_gradient_vanishes_without_contact_forces():
    x0 = standing_state(0.75, 0.08)
    U = np.zeros((5, 18))
    U[:, 12:] = 0.1
    seg = Segment(U, np.zeros((5, 2), bool) | np.array([True, False]), np.tile(x0, (6, 1)), U)
    theta = ParamVector(cost=CostParams(theta_q=np.ones(18), theta_qf=np.ones(18)))
    g, _ = q_mpc_gradient(theta, x0, seg)
    assert np.array_equal(g[:6], np.zeros(6))


def test_gradient_matches_finite_differences():
    worst = 0.0
    for seed in range(8):
        theta, s, seg = random_instance(np.random.default_rng(100 + seed), horizon=15)
        err, _, _ = audit(theta, s, seg)
        worst = max(worst, err)
    assert worst < 1e-4


def test_q_meas_examples():
    assert np.allclose(q_meas_all(np.ones(3), 0.5), [1.75, 1.5, 1.0], rtol=0, atol=0)
    assert np.array_equal(q_meas_all(np.array([2.0, 3.0]), 1.0), [5.0, 3.0])
    with pytest.raises(ConfigError):
        q_meas_all(np.ones(3), 0.0)
    with pytest.raises(InsufficientData):
        q_meas_all(np.zeros(0), 0.9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.5, 1.0))
def test_q_meas_recursion_matches_direct_sum(seed, gamma):
    costs = np.random.default_rng(seed).uniform(0, 10, 600)
    q = q_meas_all(costs, gamma)
    for k in (0, 1, 300, 599):
        direct = sum(gamma ** (j - k) * costs[j] for j in range(k, 600))
        assert q[k] == pytest.approx(direct, rel=1e-12)
    assert np.all(q >= 0)
    assert np.allclose(q[:-1], costs[:-1] + gamma * q[1:], rtol=1e-14)


def test_rollout_count_is_linear_in_anchors():
    traj = make_trajectory(np.ones(60))
    ds = Dataset([traj], horizon=10, gamma=0.9)
    assert len(ds) == 51
    before = dict(ROLLOUT_STATS)
    ds.evaluate(ParamVector(), ds.anchors)
    assert ROLLOUT_STATS["rollouts"] - before["rollouts"] == 51
    assert ROLLOUT_STATS["model_steps"] - before["model_steps"] == 510


def test_dataset_matches_single_rollouts(rng):
    costs = rng.uniform(0, 1, 40)
    tr = make_trajectory(costs)
    tr.states[:, 0:3] += rng.normal(0, 0.5, (41, 3))
    ds = Dataset([make_trajectory(costs[:20]), tr], horizon=8, gamma=0.95)
    theta = ParamVector(cost=CostParams(theta_q=np.ones(18), theta_qf=np.ones(18)))
    vals, grads = ds.evaluate(theta, ds.anchors, want_grad=True)
    for a, v, g in zip(ds.anchors, vals, grads):
        t, k = ds.locate(a)
        tj = ds.trajectories[t]
        g1, ev = q_mpc_gradient(theta, tj.states[k], tj.segment(k, 8))
        assert v == ev.value
        assert np.array_equal(g, g1)
    t, k = ds.locate(ds.anchors[-1])
    assert ds.targets(ds.anchors[-1:])[0] == pytest.approx(q_meas_all(tr, 0.95)[k], rel=1e-15)


def test_trajectory_window_and_validation():
    tr = make_trajectory(np.arange(10.0))
    w = tr.window(3, 4)
    assert len(w) == 4 and w.meta["window_start"] == 3
    assert np.array_equal(w.costs, [3, 4, 5, 6])
    with pytest.raises(ConfigError):
        tr.window(8, 4)
    with pytest.raises(ConfigError):
        tr.segment(8, 4)
    with pytest.raises(ConfigError):
        make_trajectory(-np.ones(3))
