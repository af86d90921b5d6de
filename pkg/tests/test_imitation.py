import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from vibe.errors import EmptyDataset, NonFiniteLoss
from vibe.imitation.algorithms import (
    BcConfig,
    HorizonSchedule,
    PpoConfig,
    PpoState,
    RewardFloor,
    bc_train,
    compute_advantages,
    discriminator_loss,
    discriminator_prob,
    discriminator_step,
    gail_reward,
    gaussian_nll,
    ppo_policy_grad,
    ppo_update,
)
from vibe.imitation.demos import DemonstrationSet, build_demonstrations
from vibe.imitation.env import GaussianPolicy, collect, gaussian_logp
from vibe.imitation.training import CurriculumSampler, GailConfig, train_gail, train_horizon_gail
from vibe.tinynet import AdamConfig, AdamState, NetworkSpec, forward, init_params

LOGIT = NetworkSpec(scalar_inputs=1, lidar_beams=0, mix_layers=(), dense_layers=(), head="scalar")


def logit_reward(z, floor=RewardFloor()):
    """Reward of a discriminator whose logit equals the input."""
    return gail_reward(LOGIT, np.array([1.0, 0.0]), np.asarray(z, dtype=float)[:, None], floor)


# -- schedule -----------------------------------------------------------------

def test_horizon_schedule_values():
    h = HorizonSchedule()
    assert [h(0), h(99), h(100), h(150), h(250)] == [1, 1, 2, 2, 3]
    assert HorizonSchedule(cap=2)(1000) == 2


@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(1, 300))
def test_horizon_schedule_non_decreasing(a, b, k):
    h = HorizonSchedule(epochs_per_increment=k)
    lo, hi = sorted((a, b))
    assert h(lo) <= h(hi)
    assert h(hi) == 1 + hi // k


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=1.0)
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        RewardFloor(0.5)


# -- reward and discriminator -------------------------------------------------

def test_gail_reward_values():
    r = logit_reward([0.0, 800.0, -100.0])
    assert abs(r[0] - math.log(2)) < 1e-12
    assert r[1] == 0.0
    assert abs(r[2] - (-math.log(1e-6))) < 1e-12
    assert abs(r[2] - 13.8155) < 1e-4


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_gail_reward_bounds(z):
    r = logit_reward(z)
    assert np.all(r >= 0) and np.all(r <= -math.log(1e-6) + 1e-12)
    d = expit(np.asarray(z))
    direct = -np.log(np.maximum(d, 1e-6))
    assert np.allclose(r, direct, atol=1e-9, rtol=1e-9)


def disc_spec():
    return NetworkSpec(scalar_inputs=3, lidar_beams=2, lidar_channels=2, mix_layers=(3,), dense_layers=(8,),
                       head="scalar")


def test_discriminator_loss_matches_cross_entropy():
    rng = np.random.default_rng(0)
    spec = disc_spec()
    params = init_params(spec, rng)
    agent, expert = rng.normal(size=(7, spec.input_dim)), rng.normal(size=(5, spec.input_dim))
    loss, _ = discriminator_loss(spec, params, agent, expert)
    da = 1 / (1 + np.exp(-forward(spec, params, agent)[0][:, 0]))
    de = 1 / (1 + np.exp(-forward(spec, params, expert)[0][:, 0]))
    reference = -np.mean(np.log(da)) - np.mean(np.log(1 - de))
    assert abs(loss - reference) < 1e-12


def test_discriminator_gradient():
    rng = np.random.default_rng(1)
    spec = disc_spec()
    params = init_params(spec, rng)
    agent, expert = rng.normal(size=(6, spec.input_dim)), rng.normal(size=(6, spec.input_dim))
    _, g = discriminator_loss(spec, params, agent, expert)
    for _ in range(10):
        d = rng.normal(size=len(params))
        eps = 1e-5
        num = (discriminator_loss(spec, params + eps * d, agent, expert)[0]
               - discriminator_loss(spec, params - eps * d, agent, expert)[0]) / (2 * eps)
        assert abs(num - g @ d) <= 1e-6 * max(1.0, abs(num))


def test_discriminator_identical_batches_drifts_to_half():
    rng = np.random.default_rng(2)
    spec = disc_spec()
    params = init_params(spec, rng)
    params[-1] = 2.0  # start biased towards "agent"
    adam = AdamState.zeros(len(params))
    data = rng.normal(size=(64, spec.input_dim))
    for _ in range(1500):
        params, adam, _ = discriminator_step(spec, params, adam, data, data, AdamConfig(lr=1e-2))
    _, g = discriminator_loss(spec, params, data, data)
    assert abs(discriminator_prob(spec, params, data).mean() - 0.5) < 0.05
    assert np.linalg.norm(g) < 1e-3


def test_discriminator_separates_linear_classes():
    rng = np.random.default_rng(3)
    spec = disc_spec()
    params = init_params(spec, rng)
    adam = AdamState.zeros(len(params))
    w = rng.normal(size=spec.input_dim)

    def draw(sign, n=64):
        x = rng.normal(size=(4 * n, spec.input_dim))
        s = x @ w
        return x[sign * s > 0.5][:n]

    for _ in range(500):
        params, adam, _ = discriminator_step(spec, params, adam, draw(+1), draw(-1), AdamConfig(lr=3e-3))
    a, e = draw(+1, 500), draw(-1, 500)
    acc = 0.5 * (np.mean(discriminator_prob(spec, params, a) > 0.5) + np.mean(discriminator_prob(spec, params, e) < 0.5))
    assert acc > 0.95


# -- advantages -----------------------------------------------------------------

def test_advantage_single_truncated_step():
    adv, ret = compute_advantages(np.array([0.7]), np.array([0.2]), np.array([0.5]), np.array([False]),
                                  np.array([True]), np.array([0]), 0.9, 0.95)
    assert adv[0] == pytest.approx(0.7 + 0.9 * 0.5 - 0.2, abs=1e-15)
    assert ret[0] == pytest.approx(0.7 + 0.9 * 0.5, abs=1e-15)


def test_advantage_terminal_step_has_no_bootstrap():
    adv, _ = compute_advantages(np.array([0.7]), np.array([0.2]), np.array([99.0]), np.array([True]),
                                np.array([False]), np.array([0]), 0.9, 0.95)
    assert adv[0] == pytest.approx(0.5, abs=1e-15)


def test_advantage_lambda_one_is_n_step_return():
    h, r, gamma = 6, 0.3, 0.97
    trunc = np.zeros(h, dtype=bool)
    trunc[-1] = True
    adv, _ = compute_advantages(np.full(h, r), np.zeros(h), np.zeros(h), np.zeros(h, dtype=bool), trunc,
                                np.zeros(h, dtype=int), gamma, 1.0)
    expected = [sum(gamma**k * r for k in range(h - t)) for t in range(h)]
    assert np.allclose(adv, expected, atol=1e-14)


def gae_oracle(r, v, boot, last_terminal, gamma, lam):
    """Per-episode GAE from explicit TD residuals (no recursion)."""
    n = len(r)
    v_next = np.r_[v[1:], 0.0 if last_terminal else boot]
    delta = r + gamma * v_next - v
    return np.array([sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, n)) for t in range(n)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_advantages_interleaved_episodes_match_oracle(seed):
    rng = np.random.default_rng(seed)
    gamma, lam = 0.99, float(rng.uniform(0, 1))
    episodes = []
    for e in range(int(rng.integers(1, 5))):
        n = int(rng.integers(1, 8))
        episodes.append(dict(ep=e, r=rng.normal(size=n), v=rng.normal(size=n), boot=float(rng.normal()),
                             terminal=bool(rng.integers(2))))
    # interleave rows in time order per episode, random across episodes
    cursors = [0] * len(episodes)
    order = []
    while any(c < len(e["r"]) for c, e in zip(cursors, episodes)):
        e = int(rng.choice([i for i, ep in enumerate(episodes) if cursors[i] < len(ep["r"])]))
        order.append((e, cursors[e]))
        cursors[e] += 1
    rows = dict(r=[], v=[], b=[], term=[], trunc=[], ep=[])
    for e, k in order:
        ep = episodes[e]
        last = k == len(ep["r"]) - 1
        rows["r"].append(ep["r"][k])
        rows["v"].append(ep["v"][k])
        rows["b"].append(ep["boot"] if last else 0.0)
        rows["term"].append(last and ep["terminal"])
        rows["trunc"].append(last and not ep["terminal"])
        rows["ep"].append(e)
    rows = {k: np.array(v) for k, v in rows.items()}
    adv, ret = compute_advantages(rows["r"], rows["v"], rows["b"], rows["term"], rows["trunc"], rows["ep"], gamma, lam)
    assert np.allclose(ret, adv + rows["v"])
    for e, ep in enumerate(episodes):
        mine = adv[[i for i, (ee, _) in enumerate(order) if ee == e]]
        assert np.allclose(mine, gae_oracle(ep["r"], ep["v"], ep["boot"], ep["terminal"], gamma, lam), atol=1e-12)


# -- PPO ----------------------------------------------------------------------

def small_policy(rng, scalar_inputs=3):
    spec = NetworkSpec(scalar_inputs=scalar_inputs, lidar_beams=2, lidar_channels=2, mix_layers=(2,),
                       dense_layers=(6,))
    return spec, init_params(spec, rng)


def test_ppo_unit_ratio_is_vanilla_policy_gradient():
    rng = np.random.default_rng(4)
    spec, params = small_policy(rng)
    x = rng.normal(size=(9, spec.input_dim))
    mu, _ = forward(spec, params, x)
    a = mu + 0.3 * rng.normal(size=mu.shape)
    logp = gaussian_logp(a, mu, params[-2:])
    adv = rng.normal(size=9)
    _, g = ppo_policy_grad(spec, params, x, a, logp, adv, 0.2, 0.0)

    def objective(p):
        m, _ = forward(spec, p, x)
        return -np.mean(adv * gaussian_logp(a, m, p[-2:]))

    for _ in range(10):
        d = rng.normal(size=len(params))
        num = (objective(params + 1e-6 * d) - objective(params - 1e-6 * d)) / 2e-6
        assert abs(num - g @ d) < 1e-6 * max(1.0, abs(num))


def test_ppo_clipped_ratio_has_no_gradient():
    rng = np.random.default_rng(5)
    spec, params = small_policy(rng)
    x = rng.normal(size=(5, spec.input_dim))
    mu, _ = forward(spec, params, x)
    a = mu + 0.1
    logp_new = gaussian_logp(a, mu, params[-2:])
    eps = 0.2
    logp_old = logp_new - math.log(1 + 2 * eps)  # ratio = 1 + 2 eps
    _, g = ppo_policy_grad(spec, params, x, a, logp_old, np.ones(5), eps, 0.0)
    assert np.all(g == 0)


def test_ppo_zero_advantages_move_only_log_std():
    rng = np.random.default_rng(6)
    spec, params = small_policy(rng)
    c_spec = NetworkSpec(scalar_inputs=3, lidar_beams=2, lidar_channels=2, mix_layers=(2,), dense_layers=(6,),
                         head="scalar")
    critic = init_params(c_spec, rng)
    x = rng.normal(size=(32, spec.input_dim))
    a, logp, _ = GaussianPolicy(spec, params).act(x, rng)
    state = PpoState(AdamState.zeros(len(params)), AdamState.zeros(len(critic)))
    cfg = PpoConfig(entropy=0.01, minibatch=8)
    new, _, _, _ = ppo_update(spec, params, c_spec, critic, x, a, logp, np.zeros(32), np.zeros(32), cfg, state, rng)
    assert np.array_equal(new[:-2], params[:-2])
    assert np.all(new[-2:] > params[-2:])
    state = PpoState(AdamState.zeros(len(params)), AdamState.zeros(len(critic)))
    same, _, _, _ = ppo_update(spec, params, c_spec, critic, x, a, logp, np.zeros(32), np.zeros(32),
                               PpoConfig(minibatch=8), state, rng)
    assert np.array_equal(same, params)


def test_ppo_bandit_converges():
    rng = np.random.default_rng(7)
    spec = NetworkSpec(scalar_inputs=1, lidar_beams=0, mix_layers=(), dense_layers=(8,))
    c_spec = NetworkSpec(scalar_inputs=1, lidar_beams=0, mix_layers=(), dense_layers=(8,), head="scalar")
    params, critic = init_params(spec, rng), init_params(c_spec, rng)
    target = np.array([0.7, -0.4])
    state = PpoState(AdamState.zeros(len(params)), AdamState.zeros(len(critic)))
    cfg = PpoConfig(epochs_per_batch=1, minibatch=64, policy_lr=3e-3, critic_lr=3e-3)
    x = np.ones((64, 1))
    for _ in range(2000):
        a, logp, _ = GaussianPolicy(spec, params).act(x, rng)
        r = -np.abs(a - target).sum(axis=1)
        v = forward(c_spec, critic, x)[0][:, 0]
        params, critic, _, _ = ppo_update(spec, params, c_spec, critic, x, a, logp, r - v, r, cfg, state, rng)
    mean = forward(spec, params, np.ones((1, 1)))[0][0]
    assert np.all(np.abs(mean - target) < 0.05)


def test_ppo_non_finite_reports_batch():
    rng = np.random.default_rng(8)
    spec, params = small_policy(rng)
    c_spec = NetworkSpec(scalar_inputs=3, lidar_beams=2, lidar_channels=2, mix_layers=(2,), dense_layers=(6,),
                         head="scalar")
    critic = init_params(c_spec, rng)
    x = rng.normal(size=(16, spec.input_dim))
    a, logp, _ = GaussianPolicy(spec, params).act(x, rng)
    targets = np.zeros(16)
    targets[3] = np.nan
    state = PpoState(AdamState.zeros(len(params)), AdamState.zeros(len(critic)))
    with pytest.raises(NonFiniteLoss) as info:
        ppo_update(spec, params, c_spec, critic, x, a, logp, rng.normal(size=16), targets, PpoConfig(minibatch=16),
                   state, rng, epoch=4)
    assert info.value.batch == 0 and info.value.epoch == 4


# -- behavioural cloning ------------------------------------------------------

def demo_set(obs, actions):
    return SimpleNamespace(obs=obs, actions=actions)


def test_bc_repeated_pair():
    rng = np.random.default_rng(9)
    spec, params = small_policy(rng)
    s = rng.normal(size=(1, spec.input_dim))
    target = np.array([[0.4, -0.2]])
    data = demo_set(np.repeat(s, 64, axis=0), np.repeat(target, 64, axis=0))
    best, _ = bc_train(data, data, spec, params, BcConfig(epochs=400, minibatch=64, lr=3e-3), rng)
    assert np.all(np.abs(forward(spec, best, s)[0] - target) < 1e-3)


def test_bc_linear_mapping_and_model_selection():
    rng = np.random.default_rng(10)
    spec = NetworkSpec(scalar_inputs=4, lidar_beams=0, mix_layers=(), dense_layers=(16,))
    params = init_params(spec, rng)
    w = rng.normal(size=(4, 2)) * 0.3
    x = rng.uniform(-1, 1, size=(3000, 4))
    a = x @ w
    train, val, test = demo_set(x[:2000], a[:2000]), demo_set(x[2000:2500], a[2000:2500]), x[2500:]
    best, hist = bc_train(train, val, spec, params, BcConfig(epochs=150, minibatch=64, lr=3e-3), rng)
    mse = np.mean((forward(spec, best, test)[0] - test @ w) ** 2)
    assert mse < 1e-3
    chosen = gaussian_nll(spec, best, val.obs, val.actions)[0]
    assert chosen <= hist[0][2]
    assert chosen == pytest.approx(min(h[2] for h in hist), abs=1e-12)


def test_bc_empty_dataset():
    rng = np.random.default_rng(11)
    spec, params = small_policy(rng)
    with pytest.raises(EmptyDataset):
        bc_train(demo_set(np.zeros((0, spec.input_dim)), np.zeros((0, 2))), None, spec, params, BcConfig(), rng)


# -- rollouts and training loops ------------------------------------------------

@pytest.fixture
def small_demos(small_traffic):
    data, env = small_traffic
    ids = data.split_ids("train")[:12]
    return data, env, ids, build_demonstrations(env, ids)


def test_demonstration_invariants(small_demos):
    data, env, ids, demos = small_demos
    assert isinstance(demos, DemonstrationSet) and demos.split == "train"
    assert set(demos.ids) <= set(int(i) for i in ids)
    disp = np.hypot(*(demos.actions * env.action_scale).T)
    assert np.all(disp <= env.sim.max_step)
    with pytest.raises(EmptyDataset):
        build_demonstrations(env, [])


def test_curriculum_episode_lengths_and_flags(small_demos):
    data, env, ids, _ = small_demos
    rng = np.random.default_rng(12)
    spec = env.policy_spec((16,))
    policy = GaussianPolicy(spec, init_params(spec, rng))
    for epoch, bound in ((0, 1), (150, 2)):
        h = HorizonSchedule()(epoch)
        batch = collect(env, policy, CurriculumSampler(env, ids, rng, h), 300, 8, rng)
        assert len(batch) == 300
        lengths = np.bincount(batch.episode)
        assert lengths.max() <= bound
        # every horizon cut is a truncation, never a terminal
        assert not np.any(batch.terminal & batch.truncated)
        last = np.r_[[np.nonzero(batch.episode == e)[0].max() for e in np.unique(batch.episode)]]
        assert np.all(batch.terminal[last] | batch.truncated[last])
        inner = np.setdiff1d(np.arange(len(batch)), last)
        assert not np.any(batch.terminal[inner] | batch.truncated[inner])


def tiny_config(**kw):
    base = dict(epochs=3, ppo=PpoConfig(interactions=128, minibatch=64, epochs_per_batch=2), dense_layers=(16,),
                discriminator_batch=64, slots=4, val_every=2, seed=3)
    base.update(kw)
    return GailConfig(**base)


def test_training_is_deterministic(small_demos):
    data, env, ids, demos = small_demos
    lo, hi = data.splits["val"]
    a = train_horizon_gail(env, demos, ids, tiny_config(), val_window=(lo, 300))
    b = train_horizon_gail(env, demos, ids, tiny_config(), val_window=(lo, 300))
    assert a.log == b.log
    assert np.array_equal(a.policy_params, b.policy_params)
    assert "val_jsd_joint" in a.log[0] and a.log[0]["horizon"] == 1
    c = train_gail(env, demos, ids, tiny_config(), val_window=None)
    d = train_gail(env, demos, ids, tiny_config(), val_window=None)
    assert c.log == d.log


def test_unbounded_horizon_matches_gail(small_demos):
    data, env, ids, demos = small_demos
    cfg = tiny_config(gail_horizon_factor=1.0, schedule=HorizonSchedule(start=10**6))
    hg = train_horizon_gail(env, demos, ids, cfg)
    g = train_gail(env, demos, ids, cfg)
    strip = [{k: v for k, v in e.items() if k != "horizon"} for e in hg.log]
    assert strip == [{k: v for k, v in e.items() if k != "horizon"} for e in g.log]
    assert np.array_equal(hg.final_params, g.final_params)
