"""Expert demonstrations: tracked trajectories replayed through the observation generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vibe.errors import EmptyDataset
from vibe.imitation.env import Env, to_ego
from vibe.sim.batch import AgentBatch


@dataclass
class DemonstrationSet:
    obs: np.ndarray  # (N, input_dim) encoded observations s^E
    actions: np.ndarray  # (N, 2) ego-frame normalized displacements a^E
    agent: np.ndarray  # (N,) trajectory id
    tick: np.ndarray  # (N,)
    split: str = "train"

    def __len__(self):
        return len(self.obs)

    @property
    def ids(self):
        return np.unique(self.agent)

    def sample(self, rng, m):
        if len(self) == 0:
            raise EmptyDataset(f"{self.split} demonstrations are empty")
        idx = rng.integers(len(self), size=m)
        return self.obs[idx], self.actions[idx]


def build_demonstrations(env: Env, agent_ids, split="train") -> DemonstrationSet:
    """Observation/action pairs for every tick of each trajectory but the last.

    Pairs whose displacement exceeds the simulator's ``max_step`` are dropped.
    """
    rep = env.replay
    obs, acts, agents, ticks = [], [], [], []
    for aid in agent_ids:
        r = rep.row(aid)
        t = np.arange(rep.start[r], rep.end[r])
        if len(t) == 0:
            continue
        disp = rep.pos[r, t + 1] - rep.pos[r, t]
        ok = np.hypot(disp[:, 0], disp[:, 1]) <= env.sim.max_step
        t, disp = t[ok], disp[ok]
        goal = rep.goal(aid)
        target = env.scene.nearest_exit(goal) if env.scene.exits else 0
        n = len(t)
        batch = AgentBatch(rep.pos[r, t], rep.vel[r, t], rep.heading[r, t], np.tile(goal, (n, 1)),
                           np.full(n, target), np.full(n, rep.cls_codes[r]), np.full(n, int(aid)))
        obs.append(env.observe(batch, env.replay_others(t, batch.ids)))
        acts.append(to_ego(disp, batch.heading, env.action_scale))
        agents.append(batch.ids)
        ticks.append(t)
    if not obs:
        raise EmptyDataset(f"no demonstrations for split {split!r}")
    return DemonstrationSet(np.vstack(obs), np.vstack(acts), np.concatenate(agents), np.concatenate(ticks), split)
