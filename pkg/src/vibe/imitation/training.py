"""Training loops: behavioural cloning, vanilla GAIL and the horizon curriculum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vibe.behavior import ReportConfig, evaluate_policy, mean_policy
from vibe.errors import EmptyDataset, NonFiniteLoss
from vibe.imitation.algorithms import (
    BcConfig,
    HorizonSchedule,
    PpoConfig,
    PpoState,
    RewardFloor,
    bc_train,
    compute_advantages,
    discriminator_step,
    gail_reward,
    ppo_update,
)
from vibe.imitation.demos import DemonstrationSet
from vibe.imitation.env import Env, GaussianPolicy, collect
from vibe.tinynet import AdamConfig, AdamState, forward, init_params

INIT_MODES = ("stride", "uniform")


@dataclass(frozen=True)
class GailConfig:
    epochs: int = 500
    ppo: PpoConfig = field(default_factory=PpoConfig)
    schedule: HorizonSchedule = field(default_factory=HorizonSchedule)
    reward_floor: RewardFloor = field(default_factory=RewardFloor)
    reward_scale: float = 0.01  # keeps value targets O(1) at gamma = 0.99; the optimal policy is unchanged
    init_log_std: float | None = None  # overrides the log-std of a warm-started policy
    discriminator_batch: int = 256
    discriminator_steps: int = 1
    discriminator_lr: float = 3e-4
    dense_layers: tuple = (128, 64)
    init: str = "stride"
    slots: int = 16
    gail_horizon_factor: float = 2.0
    val_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if self.epochs < 0 or self.val_every < 1 or self.slots < 1:
            raise ValueError("epochs >= 0, val_every >= 1 and slots >= 1 are required")


@dataclass
class TrainResult:
    policy_params: np.ndarray  # best on validation
    final_params: np.ndarray
    critic_params: np.ndarray
    discriminator_params: np.ndarray
    log: list
    best_epoch: int
    best_jsd: float


class CurriculumSampler:
    """Episode starts for the horizon curriculum and for vanilla GAIL.

    With ``horizon`` set, a random expert trajectory is walked at
    ``t = start, start + h, start + 2h, ...`` (``stride``) or single random
    ticks are drawn (``uniform``); each episode lasts at most h steps and
    never beyond the recorded end. With ``horizon=None`` every episode starts
    at a trajectory's first tick and is capped at ``factor`` times its length.
    """

    def __init__(self, env: Env, agent_ids, rng, horizon=None, mode="stride", factor=2.0):
        rep = env.replay
        self.ids = np.asarray(agent_ids, dtype=int)
        if len(self.ids) == 0:
            raise EmptyDataset("no training trajectories")
        rows = np.array([rep.row(i) for i in self.ids])
        self.start, self.end = rep.start[rows], rep.end[rows]
        self.rng, self.horizon, self.mode, self.factor = rng, horizon, mode, factor
        self._queue = []

    def __call__(self):
        if self.horizon is None:
            k = self.rng.integers(len(self.ids))
            length = int(self.end[k] - self.start[k])
            return int(self.ids[k]), int(self.start[k]), max(1, int(np.ceil(self.factor * length)))
        h = int(self.horizon)
        if self.mode == "uniform":
            k = self.rng.integers(len(self.ids))
            t = int(self.rng.integers(self.start[k], self.end[k]))
            return int(self.ids[k]), t, min(h, int(self.end[k]) - t)
        if not self._queue:
            k = self.rng.integers(len(self.ids))
            self._queue = [(int(self.ids[k]), int(t), min(h, int(self.end[k] - t)))
                           for t in range(int(self.start[k]), int(self.end[k]), h)][::-1]
        return self._queue.pop()


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def validate(env: Env, params, spec, window, report=ReportConfig()):
    start, ticks = window
    return evaluate_policy(mean_policy(GaussianPolicy(spec, params)), env, start, ticks, report,
                           split=(start, start + ticks))


def _train_adversarial(env: Env, demos: DemonstrationSet, agent_ids, cfg: GailConfig, horizon_fn, val_window,
                       init_policy=None, report=ReportConfig(), progress=None):
    r_init, r_collect, r_disc, r_ppo, r_sched = _streams(cfg.seed)
    p_spec, c_spec, d_spec = (env.policy_spec(cfg.dense_layers), env.critic_spec(cfg.dense_layers),
                              env.discriminator_spec(cfg.dense_layers))
    policy = init_params(p_spec, r_init) if init_policy is None else np.array(init_policy, dtype=float)
    if cfg.init_log_std is not None:
        policy[-2:] = cfg.init_log_std
    critic = init_params(c_spec, r_init)
    disc = init_params(d_spec, r_init)
    state = PpoState(AdamState.zeros(len(policy)), AdamState.zeros(len(critic)))
    d_adam = AdamState.zeros(len(disc))
    d_hyper = AdamConfig(lr=cfg.discriminator_lr)
    expert_in = np.c_[demos.obs, demos.actions]
    log, best, best_jsd, best_epoch = [], policy.copy(), np.inf, -1

    def run_validation(epoch, entry):
        nonlocal best, best_jsd, best_epoch
        rep = validate(env, policy, p_spec, val_window, report)
        entry.update(val_jsd_speed=rep.jsd_speed, val_jsd_occupancy=rep.jsd_occupancy, val_jsd_joint=rep.jsd_joint,
                     val_collision=rep.collision_probability, val_exit_failure=rep.exit_failure_probability)
        if rep.jsd_joint < best_jsd:
            best, best_jsd, best_epoch = policy.copy(), rep.jsd_joint, epoch

    for epoch in range(cfg.epochs):
        h = horizon_fn(epoch)
        entry = {"epoch": epoch, "horizon": h if h is not None else "inf"}
        if val_window is not None and epoch % cfg.val_every == 0:
            run_validation(epoch, entry)
        sampler = CurriculumSampler(env, agent_ids, r_sched, h, cfg.init, cfg.gail_horizon_factor)
        batch = collect(env, GaussianPolicy(p_spec, policy), sampler, cfg.ppo.interactions, cfg.slots, r_collect)
        agent_in = np.c_[batch.obs, batch.actions]
        try:
            for _ in range(cfg.discriminator_steps):
                ia = r_disc.integers(len(agent_in), size=cfg.discriminator_batch)
                ie = r_disc.integers(len(expert_in), size=cfg.discriminator_batch)
                disc, d_adam, d_loss = discriminator_step(d_spec, disc, d_adam, agent_in[ia], expert_in[ie], d_hyper)
            rewards = gail_reward(d_spec, disc, agent_in, cfg.reward_floor)
            scaled = cfg.reward_scale * rewards
            values = forward(c_spec, critic, batch.obs)[0][:, 0]
            boot = np.zeros(len(batch))
            if batch.truncated.any():
                boot[batch.truncated] = forward(c_spec, critic, batch.next_obs[batch.truncated])[0][:, 0]
            adv, targets = compute_advantages(scaled, values, boot, batch.terminal, batch.truncated, batch.episode,
                                              cfg.ppo.gamma, cfg.ppo.lam)
            policy, critic, p_loss, v_loss = ppo_update(p_spec, policy, c_spec, critic, batch.obs, batch.actions,
                                                        batch.logp, adv, targets, cfg.ppo, state, r_ppo, epoch)
        except NonFiniteLoss as err:
            err.epoch = epoch
            raise
        entry.update(disc_loss=float(d_loss), policy_loss=p_loss, value_loss=v_loss, episodes=int(batch.episodes),
                     mean_reward=float(rewards.mean()), collisions=int(np.count_nonzero(batch.collision)),
                     log_std=[float(v) for v in policy[-2:]])
        log.append(entry)
        if progress is not None:
            progress(entry)
    if val_window is not None:
        entry = {"epoch": cfg.epochs, "horizon": None}
        run_validation(cfg.epochs, entry)
        log.append(entry)
    if best_epoch < 0:
        best = policy.copy()
    return TrainResult(best, policy, critic, disc, log, best_epoch, float(best_jsd))


def train_horizon_gail(env: Env, demos: DemonstrationSet, agent_ids, cfg: GailConfig = GailConfig(), val_window=None,
                       init_policy=None, report=ReportConfig(), progress=None) -> TrainResult:
    """Adversarial imitation with episodes started at expert states and a growing horizon."""
    return _train_adversarial(env, demos, agent_ids, cfg, cfg.schedule, val_window, init_policy, report, progress)


def train_gail(env: Env, demos: DemonstrationSet, agent_ids, cfg: GailConfig = GailConfig(), val_window=None,
               init_policy=None, report=ReportConfig(), progress=None) -> TrainResult:
    """Vanilla GAIL: every episode starts at a trajectory's entry and runs until goal, collision or the cap."""
    return _train_adversarial(env, demos, agent_ids, cfg, lambda e: None, val_window, init_policy, report, progress)


def train_bc(env: Env, train: DemonstrationSet, val: DemonstrationSet, cfg: BcConfig = BcConfig(), seed=0,
             dense_layers=(128, 64)):
    rng = np.random.default_rng(seed)
    spec = env.policy_spec(dense_layers)
    return bc_train(train, val, spec, init_params(spec, rng), cfg, rng)
