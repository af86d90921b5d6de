"""Learning rules: behavioural cloning, the GAIL discriminator and reward,
truncation-aware GAE, and the PPO-clip update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vibe.errors import EmptyDataset, NonFiniteLoss
from vibe.imitation.env import gaussian_logp
from vibe.tinynet import AdamConfig, AdamState, NetworkSpec, adam_step, backward, forward, log_std


@dataclass(frozen=True)
class HorizonSchedule:
    start: int = 1
    increment: int = 1
    epochs_per_increment: int = 100
    cap: int | None = None

    def __post_init__(self):
        if self.start < 1 or self.increment < 0 or self.epochs_per_increment < 1:
            raise ValueError("invalid horizon schedule")

    def __call__(self, epoch: int) -> int:
        h = self.start + self.increment * (int(epoch) // self.epochs_per_increment)
        return h if self.cap is None else min(h, self.cap)


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs_per_batch: int = 4
    minibatch: int = 256
    entropy: float = 0.0
    interactions: int = 1024
    policy_lr: float = 3e-4
    critic_lr: float = 1e-3
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lambda must be in [0, 1]")


@dataclass(frozen=True)
class RewardFloor:
    d_min: float = 1e-6

    def __post_init__(self):
        if not 0 < self.d_min < 0.5:
            raise ValueError("d_min must be in (0, 0.5)")


def _clip_norm(g, max_norm):
    if max_norm is None or max_norm <= 0:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


# -- behavioural cloning ------------------------------------------------------

@dataclass(frozen=True)
class BcConfig:
    epochs: int = 200
    minibatch: int = 256
    lr: float = 1e-3


def gaussian_nll(spec, params, x, a):
    """Mean negative log-likelihood of actions and its parameter gradient."""
    mu, cache = forward(spec, params, x)
    ls = log_std(spec, params)
    inv = np.exp(-2 * ls)
    diff = a - mu
    b = len(x)
    loss = -float(np.mean(gaussian_logp(a, mu, ls)))
    g_mu = -diff * inv / b
    g_ls = np.mean(1.0 - diff * diff * inv, axis=0)
    return loss, backward(spec, params, cache, g_mu, g_ls)


def bc_train(train, val, spec: NetworkSpec, params, cfg: BcConfig, rng):
    """Maximize expert-action likelihood; return the parameters with the best validation NLL.

    ``train``/``val`` expose ``obs`` and ``actions``. Returns (params, history)
    where history holds ``(epoch, train_nll, val_nll)`` with epoch -1 the initial value.
    """
    if len(train.obs) == 0:
        raise EmptyDataset("behavioural cloning needs a non-empty training split")
    val = val if val is not None and len(val.obs) else train
    best = params.copy()
    best_val = gaussian_nll(spec, params, val.obs, val.actions)[0]
    history = [(-1, None, best_val)]
    adam = AdamState.zeros(len(params))
    hyper = AdamConfig(lr=cfg.lr)
    n = len(train.obs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            loss, g = gaussian_nll(spec, params, train.obs[idx], train.actions[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss("behavioural cloning loss is not finite", batch=s // cfg.minibatch, epoch=epoch)
            params, adam = adam_step(params, g, adam, hyper)
            losses.append(loss)
        v = gaussian_nll(spec, params, val.obs, val.actions)[0]
        history.append((epoch, float(np.mean(losses)), v))
        if v < best_val:
            best, best_val = params.copy(), v
    return best, history


# -- discriminator ------------------------------------------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def discriminator_loss(spec, params, agent_in, expert_in):
    """Cross-entropy with D = P(agent): -E_agent[log D] - E_expert[log(1 - D)].

    Returns the loss and its gradient; descending it ascends the GAIL objective.
    """
    x = np.vstack([agent_in, expert_in])
    z, cache = forward(spec, params, x)
    z = z[:, 0]
    na, ne = len(agent_in), len(expert_in)
    za, ze = z[:na], z[na:]
    loss = float(np.mean(_softplus(-za)) + np.mean(_softplus(ze)))
    d = 1.0 / (1.0 + np.exp(-z))
    g = np.r_[(d[:na] - 1.0) / na, d[na:] / ne]
    return loss, backward(spec, params, cache, g[:, None])


def discriminator_step(spec, params, adam: AdamState, agent_in, expert_in, hyper=AdamConfig()):
    loss, g = discriminator_loss(spec, params, agent_in, expert_in)
    if not np.isfinite(loss):
        raise NonFiniteLoss("discriminator loss is not finite", batch=0, epoch=None)
    params, adam = adam_step(params, g, adam, hyper)
    return params, adam, loss


def discriminator_prob(spec, params, x):
    z = forward(spec, params, x)[0][:, 0]
    return 1.0 / (1.0 + np.exp(-z))


def gail_reward(spec, params, x, floor: RewardFloor = RewardFloor()):
    """-log(max(D, d_min)), computed from the logit to avoid underflow."""
    z = forward(spec, params, x)[0][:, 0]
    return np.minimum(_softplus(-z), -math.log(floor.d_min))


# -- advantages ---------------------------------------------------------------

def compute_advantages(rewards, values, bootstrap, terminal, truncated, episode, gamma, lam):
    """Truncated GAE(lambda) over interleaved episodes.

    ``bootstrap[i]`` is V(s_{i+1}) and is used only where ``truncated[i]``;
    terminal steps bootstrap with 0; other steps use the value of the next row
    of the same episode. Rows of each episode must appear in time order.
    """
    n = len(rewards)
    adv = np.zeros(n)
    nxt = {}  # episode -> (value, advantage) of its following step
    for i in range(n - 1, -1, -1):
        ep = int(episode[i])
        if terminal[i]:
            delta, carry = rewards[i] - values[i], 0.0
        elif truncated[i]:
            delta, carry = rewards[i] + gamma * bootstrap[i] - values[i], 0.0
        else:
            v_next, a_next = nxt[ep]
            delta, carry = rewards[i] + gamma * v_next - values[i], gamma * lam * a_next
        adv[i] = delta + carry
        nxt[ep] = (values[i], adv[i])
    return adv, adv + values


# -- PPO ----------------------------------------------------------------------

def ppo_policy_grad(spec, params, x, actions, logp_old, adv, clip, entropy):
    """Clipped-surrogate loss (negated, to minimize) and gradient for one minibatch."""
    mu, cache = forward(spec, params, x)
    ls = log_std(spec, params)
    logp = gaussian_logp(actions, mu, ls)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1 - clip, 1 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    ent = float(np.sum(ls)) + math.log(2 * math.pi * math.e)  # per-sample differential entropy
    b = len(x)
    loss = -float(np.mean(surr)) - entropy * ent
    active = np.where(adv >= 0, ratio < 1 + clip, ratio > 1 - clip)
    w = np.where(active, ratio * adv, 0.0) / b  # d(mean surr)/d logp
    inv = np.exp(-2 * ls)
    diff = actions - mu
    g_mu = -(w[:, None] * diff * inv)
    g_ls = -(w[:, None] * (diff * diff * inv - 1.0)).sum(axis=0) - entropy
    return loss, backward(spec, params, cache, g_mu, g_ls)


def value_grad(spec, params, x, targets):
    v, cache = forward(spec, params, x)
    err = v[:, 0] - targets
    loss = 0.5 * float(np.mean(err * err))
    return loss, backward(spec, params, cache, (err / len(x))[:, None])


@dataclass
class PpoState:
    policy: AdamState
    critic: AdamState


def normalize_advantages(adv):
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def ppo_update(policy_spec, policy_params, critic_spec, critic_params, x, actions, logp_old, adv, targets,
               cfg: PpoConfig, state: PpoState, rng, epoch=None):
    """Several epochs of minibatch PPO-clip on the policy and squared-error regression on the critic."""
    adv = normalize_advantages(np.asarray(adv, dtype=float))
    n = len(x)
    p_hyper, c_hyper = AdamConfig(lr=cfg.policy_lr), AdamConfig(lr=cfg.critic_lr)
    p_losses, v_losses = [], []
    k = 0
    for _ in range(cfg.epochs_per_batch):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = order[s:s + cfg.minibatch]
            pl, pg = ppo_policy_grad(policy_spec, policy_params, x[idx], actions[idx], logp_old[idx], adv[idx],
                                     cfg.clip, cfg.entropy)
            vl, vg = value_grad(critic_spec, critic_params, x[idx], targets[idx])
            if not (np.isfinite(pl) and np.isfinite(vl) and np.all(np.isfinite(pg)) and np.all(np.isfinite(vg))):
                raise NonFiniteLoss("PPO loss is not finite", batch=k, epoch=epoch)
            policy_params, state.policy = adam_step(policy_params, _clip_norm(pg, cfg.max_grad_norm), state.policy,
                                                    p_hyper)
            critic_params, state.critic = adam_step(critic_params, _clip_norm(vg, cfg.max_grad_norm), state.critic,
                                                    c_hyper)
            p_losses.append(pl)
            v_losses.append(vl)
            k += 1
    return policy_params, critic_params, float(np.mean(p_losses)), float(np.mean(v_losses))
