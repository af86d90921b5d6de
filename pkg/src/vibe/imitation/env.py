"""Training-side view of the simulator: network input encoding, ego-frame actions,
and lockstep episode collection for many controlled agents at once."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vibe import CLASSES
from vibe.sim.batch import (
    AgentBatch,
    OthersBatch,
    clip_actions,
    collision_batch,
    observe_batch,
    step_batch,
)
from vibe.sim.scene import SceneLayout
from vibe.sim.world import ReplayData, SimConfig
from vibe.tinynet import NetworkSpec, forward, log_std

LIDAR_RANGE_CHANNELS = 3  # wall, zebra and agent ranges are divided by max_range
RADIAL_SPEED_SCALE = 10.0


def encode(lidar, scalars, max_range):
    """Flat network input: scaled lidar (beam-major) followed by the scalars."""
    lid = np.array(lidar, dtype=float, copy=True)
    lid[..., :LIDAR_RANGE_CHANNELS] /= max_range
    lid[..., 3] /= RADIAL_SPEED_SCALE
    return np.concatenate([lid.reshape(len(lid), -1), scalars], axis=1)


def to_ego(disp, heading, scale):
    """World displacement -> normalized action in the agent frame (forward, left)."""
    c, s = np.cos(heading), np.sin(heading)
    return np.c_[c * disp[:, 0] + s * disp[:, 1], -s * disp[:, 0] + c * disp[:, 1]] / scale


def to_world(action, heading, scale):
    c, s = np.cos(heading), np.sin(heading)
    a = action * scale
    return np.c_[c * a[:, 0] - s * a[:, 1], s * a[:, 0] + c * a[:, 1]]


def gaussian_logp(actions, mean, log_sigma):
    z = (actions - mean) / np.exp(log_sigma)
    return -0.5 * np.sum(z * z, axis=1) - np.sum(log_sigma) - np.log(2 * np.pi)


@dataclass
class Env:
    scene: SceneLayout
    replay: ReplayData
    sim: SimConfig = field(default_factory=SimConfig)
    action_scale: float = 0.5

    def __post_init__(self):
        self.n_exits = max(len(self.scene.exits), 1)
        self.radius_by_code = np.array([self.sim.footprints[c] for c in CLASSES])

    @property
    def n_scalars(self):
        return 6 + self.n_exits

    def policy_spec(self, dense_layers=(128, 64)):
        return NetworkSpec(self.n_scalars, self.sim.beams, 5, (15, 3), tuple(dense_layers), "gaussian_policy")

    def critic_spec(self, dense_layers=(128, 64)):
        return NetworkSpec(self.n_scalars, self.sim.beams, 5, (15, 3), tuple(dense_layers), "scalar")

    def discriminator_spec(self, dense_layers=(128, 64)):
        return NetworkSpec(self.n_scalars + 2, self.sim.beams, 5, (15, 3), tuple(dense_layers), "scalar")

    def start_state(self, agent_id, tick) -> AgentBatch:
        return AgentBatch.stack([self.replay.state(agent_id, tick, self.scene)])

    def replay_others(self, ticks, exclude_ids):
        fp = self.sim.footprints
        return OthersBatch.from_lists([self.replay.others(int(t), fp, (int(i),)) for t, i in zip(ticks, exclude_ids)])

    def observe(self, batch: AgentBatch, others: OthersBatch):
        cfg = self.sim
        lidar, scalars = observe_batch(batch, others, self.scene, self.n_exits, cfg.beams, cfg.max_range,
                                       cfg.goal_scale)
        return encode(lidar, scalars, cfg.max_range)

    def advance(self, batch: AgentBatch, ego_actions, others_next: OthersBatch):
        """Apply ego actions; returns the new batch, world displacements, collision codes and goal flags."""
        disp = clip_actions(to_world(ego_actions, batch.heading, self.action_scale), self.sim.max_step)
        new = step_batch(batch, disp, self.sim.dt, self.sim.max_step, self.sim.heading_eps)
        codes = collision_batch(new, batch.pos, others_next, self.scene, self.radius_by_code[new.cls])
        goal = np.hypot(*(new.pos - new.goal).T) < self.sim.goal_radius
        return new, disp, codes, goal


class GaussianPolicy:
    """Ego-frame Gaussian policy; ``act`` returns (actions, log-probs, means)."""

    def __init__(self, spec: NetworkSpec, params):
        self.spec, self.params = spec, params

    def mean(self, x):
        return forward(self.spec, self.params, x)[0]

    def act(self, x, rng, deterministic=False):
        mu = self.mean(x)
        ls = log_std(self.spec, self.params)
        a = mu if deterministic else mu + np.exp(ls) * rng.standard_normal(mu.shape)
        return a, gaussian_logp(a, mu, ls), mu


@dataclass
class Batch:
    """Flat transition storage from :func:`collect`."""
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    next_obs: np.ndarray  # rows valid where truncated
    episode: np.ndarray
    collision: np.ndarray
    episodes: int

    def __len__(self):
        return len(self.obs)


def collect(env: Env, policy: GaussianPolicy, sampler, n_interactions, n_slots, rng, training_mode=True):
    """Run episodes from ``sampler`` in parallel slots until ``n_interactions`` steps are logged.

    ``sampler()`` yields ``(agent_id, start_tick, horizon)``. Episodes still running
    when the budget is reached are cut and flagged truncated (bootstrapped, never terminal).
    """
    rows = {k: [] for k in ("obs", "actions", "logp", "terminal", "truncated", "next_obs", "episode", "collision")}
    slots = []  # dicts: ep, tick, left, state (AgentBatch of 1), obs
    n_eps = 0
    total = 0
    while total < n_interactions:
        fresh = []
        while len(slots) + len(fresh) < n_slots:
            item = sampler()
            if item is None:
                break
            aid, tick, horizon = item
            fresh.append({"ep": n_eps, "tick": int(tick), "left": int(horizon), "state": env.start_state(aid, tick)})
            n_eps += 1
        if fresh:
            st = _concat([s["state"] for s in fresh])
            x0 = env.observe(st, env.replay_others([s["tick"] for s in fresh], st.ids))
            for s, x in zip(fresh, x0):
                s["obs"] = x
            slots += fresh
        if not slots:
            break
        batch = _concat([s["state"] for s in slots])
        x = np.array([s["obs"] for s in slots])
        a, logp, _ = policy.act(x, rng)
        ticks = np.array([s["tick"] for s in slots])
        others = env.replay_others(ticks + 1, batch.ids)
        new, _, codes, goal = env.advance(batch, a, others)
        x_next = env.observe(new, others)
        terminal = goal | ((codes != 0) & training_mode)
        left = np.array([s["left"] for s in slots]) - 1
        truncated = ~terminal & (left <= 0)
        keep = []
        for i, s in enumerate(slots):
            if total >= n_interactions:
                keep.append(s)  # not stepped; its previous row gets the truncation flag
                continue
            rows["obs"].append(x[i])
            rows["actions"].append(a[i])
            rows["logp"].append(logp[i])
            rows["terminal"].append(terminal[i])
            rows["truncated"].append(truncated[i])
            rows["next_obs"].append(x_next[i])
            rows["episode"].append(s["ep"])
            rows["collision"].append(codes[i])
            total += 1
            if not (terminal[i] or truncated[i]):
                s.update(tick=s["tick"] + 1, left=int(left[i]), state=new.take([i]), obs=x_next[i],
                         last=total - 1)
                keep.append(s)
        slots = keep
    for s in slots:  # cut by the interaction budget
        if "last" in s:
            rows["truncated"][s["last"]] = True
    out = {k: np.array(v) for k, v in rows.items()}
    return Batch(out["obs"], out["actions"], out["logp"], out["terminal"].astype(bool),
                 out["truncated"].astype(bool), out["next_obs"], out["episode"], out["collision"], n_eps)


def _concat(states):
    fields = ("pos", "vel", "heading", "goal", "target", "cls", "ids")
    return AgentBatch(*(np.concatenate([getattr(s, f) for s in states]) for f in fields))

