import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from vibe.behavior import (
    DistributionGrid,
    ReportConfig,
    GridAxis,
    evaluate_policy,
    evaluate_windows,
    expert_policy,
    jsd,
    kde,
    zero_policy,
)
from vibe.errors import EmptySamples, GridMismatch, WindowOutOfRange


def grid(values):
    p = np.asarray(values, dtype=float)
    return DistributionGrid((GridAxis(0.0, 1.0, len(p)),), p / p.sum())


def test_jsd_unit_values():
    p = grid([1, 0])
    q = grid([0.5, 0.5])
    assert jsd(p, p) == 0.0
    assert abs(jsd(grid([1, 0, 0, 0]), grid([0, 0, 1, 1])) - math.log(2)) < 1e-12
    # m = (0.75, 0.25): 0.5 ln(4/3) + 0.5 (0.5 ln(2/3) + 0.5 ln 2)
    expected = 0.5 * math.log(1 / 0.75) + 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))
    assert abs(jsd(p, q) - expected) < 1e-12
    assert abs(jsd(p, q) - 0.2158) < 1e-3


def test_jsd_grid_mismatch():
    a = grid([1, 1])
    b = DistributionGrid((GridAxis(0.0, 2.0, 2),), np.array([0.5, 0.5]))
    with pytest.raises(GridMismatch):
        jsd(a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.integers(0, 10_000))
def test_jsd_properties(raw, seed):
    p = np.asarray(raw) + 1e-12
    q = np.random.default_rng(seed).random(len(p))
    p, q = grid(p), grid(q)
    d = jsd(p, q)
    assert 0.0 <= d <= math.log(2)
    assert abs(d - jsd(q, p)) < 1e-12
    assert jsd(p, p) == 0.0


def test_kde_delta_samples_peak_in_their_cell():
    axes = (GridAxis(-5, 5, 20), GridAxis(-5, 5, 20))
    g = kde(np.tile([1.2, -3.1], (10, 1)), axes)
    assert abs(g.prob.sum() - 1) < 1e-9 and np.all(g.prob >= 0)
    i, j = np.unravel_index(np.argmax(g.prob), g.prob.shape)
    assert (i, j) == (12, 3)


def test_kde_matches_analytic_gaussian():
    rng = np.random.default_rng(0)
    axis = GridAxis(-5, 5, 100)
    g = kde(rng.normal(0.5, 1.2, size=100_000), (axis,))
    exact = norm.pdf(axis.centers, 0.5, 1.2)
    exact /= exact.sum()
    assert np.abs(g.prob - exact).sum() < 0.05


def test_kde_symmetric_data_gives_symmetric_grid():
    rng = np.random.default_rng(1)
    x = rng.normal(size=5000)
    g = kde(np.r_[x, -x], (GridAxis(-4, 4, 40),))
    assert np.allclose(g.prob, g.prob[::-1], atol=1e-12)


def test_kde_four_dimensional_matches_direct_sum():
    rng = np.random.default_rng(2)
    axes = tuple(GridAxis(-2, 2, n) for n in (4, 3, 3, 2))
    x = rng.uniform(-2, 2, size=(50, 4))
    h = np.array([0.5, 0.7, 0.9, 1.1])
    g = kde(x, axes, h)
    mesh = np.stack(np.meshgrid(*(a.centers for a in axes), indexing="ij"), axis=-1)
    z = (mesh[..., None, :] - x) / h
    dens = np.exp(-0.5 * (z * z).sum(axis=-1)).sum(axis=-1)
    assert np.allclose(g.prob, dens / dens.sum(), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_kde_order_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(200, 2))
    axes = (GridAxis(-3, 3, 12), GridAxis(-3, 3, 12))
    a = kde(x, axes).prob
    b = kde(x[rng.permutation(200)], axes).prob
    assert np.allclose(a, b, atol=1e-14)


def test_kde_errors():
    with pytest.raises(EmptySamples):
        kde(np.zeros((1, 1)), (GridAxis(0, 1, 4),))
    with pytest.raises(GridMismatch):
        kde(np.zeros((5, 2)), (GridAxis(0, 1, 4),))


@pytest.fixture
def traffic(small_traffic):
    return small_traffic


def test_expert_replay_reproduces_data(traffic):
    data, env = traffic
    lo, hi = data.splits["test"]
    rep = evaluate_policy(expert_policy(env), env, lo, hi - lo, split=(lo, hi))
    assert rep.agents > 0
    assert max(rep.jsd_speed, rep.jsd_occupancy, rep.jsd_joint) < 0.01
    assert rep.collision_probability == 0.0
    assert rep.exit_failure_probability == 0.0


def test_stationary_policy_is_worse(traffic):
    data, env = traffic
    lo, hi = data.splits["test"]
    expert = evaluate_policy(expert_policy(env), env, lo, hi - lo, split=(lo, hi))
    still = evaluate_policy(zero_policy, env, lo, hi - lo, split=(lo, hi))
    assert still.jsd_occupancy > expert.jsd_occupancy
    assert still.exit_failure_probability == 1.0
    for v in (still.jsd_speed, still.jsd_occupancy, still.jsd_joint):
        assert 0 <= v <= math.log(2)


def test_evaluation_is_deterministic_and_traces(traffic):
    data, env = traffic
    lo, hi = data.splits["val"]
    t1, t2 = [], []
    a = evaluate_policy(expert_policy(env), env, lo, 700, split=(lo, hi), traces=t1)
    b = evaluate_policy(expert_policy(env), env, lo, 700, split=(lo, hi), traces=t2)
    assert a == b and t1 == t2 and len(t1) > 0


def test_window_checks(traffic):
    data, env = traffic
    lo, hi = data.splits["test"]
    with pytest.raises(WindowOutOfRange):
        evaluate_policy(zero_policy, env, hi - 100, 500, split=(lo, hi))
    with pytest.raises(WindowOutOfRange):
        evaluate_windows(zero_policy, env, [lo, lo + 500], 1000, split=(lo, hi))
    avg = evaluate_windows(expert_policy(env), env, [lo, lo + 1000], 1000, split=(lo, hi))
    assert avg.windows == 2 and avg.exit_failure_probability == 0.0


def test_deadline_recorded_penalizes_late_arrival(traffic):
    data, env = traffic
    lo, hi = data.splits["test"]
    rep = env.replay
    start = dict(zip(rep.ids.tolist(), rep.start.tolist()))
    lag = 30
    expert = expert_policy(env)

    def late(x, batch, tick):  # waits, then drives the recorded path exactly `lag` ticks behind
        act = np.zeros((len(x), 2))
        go = np.array([tick - start[int(i)] >= lag for i in batch.ids])
        if go.any():
            act[go] = expert(x[go], batch.take(np.nonzero(go)[0]), tick - lag)
        return act

    window = evaluate_policy(late, env, lo, hi - lo, ReportConfig(deadline="window"), split=(lo, hi))
    recorded = evaluate_policy(late, env, lo, hi - lo, ReportConfig(deadline="recorded"), split=(lo, hi))
    assert recorded.exit_failure_probability == 1.0
    assert window.exit_failure_probability < 0.5
    with pytest.raises(ValueError):
        ReportConfig(deadline="soon")
