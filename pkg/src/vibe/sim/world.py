"""Replay simulator: agent kinematics, collisions, episodes and rollouts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from vibe import CLASSES, FRAME_RATE
from vibe.errors import ActionOutOfRange, NoSuchAgentAtTime
from vibe.sim.lidar import lidar_scan
from vibe.sim.scene import SceneLayout
from vibe.tracker import DEFAULT_FOOTPRINTS

NONE, AGENT_COLLISION, STATIC_COLLISION = "none", "agent_collision", "static_collision"


@dataclass
class SimConfig:
    beams: int = 64
    max_range: float = 30.0
    max_step: float = 2.0
    dt: float = 1.0 / FRAME_RATE
    goal_radius: float = 2.0
    heading_eps: float = 1e-4
    goal_scale: float = 50.0
    footprints: dict = field(default_factory=lambda: dict(DEFAULT_FOOTPRINTS))


def normalize_angle(a):
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a == -math.pi else a


@dataclass
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    heading: float
    cls: str = "car"
    goal: np.ndarray | None = None
    target_exit: int = 0
    alive: bool = True
    id: int = -1

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.heading = normalize_angle(float(self.heading))
        if self.goal is not None:
            self.goal = np.asarray(self.goal, dtype=float)


@dataclass
class Observation:
    lidar: np.ndarray
    heading: np.ndarray  # (sin, cos)
    distance_to_goal: float
    goal_bearing: np.ndarray  # (sin, cos) of the goal direction in the agent frame
    speed: float
    exit_onehot: np.ndarray

    def scalars(self, goal_scale=50.0, speed_scale=10.0):
        return np.concatenate([
            self.heading, [self.distance_to_goal / goal_scale], self.goal_bearing,
            [self.speed / speed_scale], self.exit_onehot,
        ])


def n_scalars(n_exits):
    return 6 + n_exits


def step(state: AgentState, action, dt=1.0 / FRAME_RATE, max_step=2.0, heading_eps=1e-4) -> AgentState:
    d = np.asarray(action, dtype=float)
    norm = float(np.hypot(d[0], d[1]))
    if norm > max_step * (1 + 1e-12):
        raise ActionOutOfRange(f"|displacement| = {norm:.4f} exceeds max_step {max_step}")
    heading = math.atan2(d[1], d[0]) if norm > heading_eps else state.heading
    return replace(state, position=state.position + d, velocity=d / dt, heading=normalize_angle(heading))


def clip_action(action, max_step):
    d = np.asarray(action, dtype=float)
    n = float(np.hypot(d[0], d[1]))
    return d * (max_step / n) if n > max_step else d


def point_segment_distance(p, a, b):
    if len(a) == 0:
        return np.zeros(0)
    e = b - a
    ee = np.sum(e * e, axis=1)
    t = np.clip(np.sum((p - a) * e, axis=1) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
    proj = a + t[:, None] * e
    return np.linalg.norm(p - proj, axis=1)


def segment_segment_distance(p, q, a, b):
    """Distance from segment p->q to each segment a->b (zero where they cross)."""
    if len(a) == 0:
        return np.zeros(0)
    d = np.minimum.reduce([
        point_segment_distance(p, a, b), point_segment_distance(q, a, b),
        _points_to_segment(a, p, q), _points_to_segment(b, p, q),
    ])
    e, f = q - p, b - a
    den = e[0] * f[:, 1] - e[1] * f[:, 0]
    w = a - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * f[:, 1] - w[:, 1] * f[:, 0]) / den
        u = (w[:, 0] * e[1] - w[:, 1] * e[0]) / den
    cross = (np.abs(den) > 1e-15) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    return np.where(cross, 0.0, d)


def _points_to_segment(pts, p, q):
    e = q - p
    ee = float(e @ e)
    t = np.clip(((pts - p) @ e) / ee, 0.0, 1.0) if ee > 0 else np.zeros(len(pts))
    return np.linalg.norm(pts - (p + t[:, None] * e), axis=1)


def detect_collision(agent: AgentState, others, scene: SceneLayout, footprints=None, previous=None) -> str:
    """Disc overlap with other agents, or with wall segments.

    With ``previous`` (the position before the last step) the wall test is swept
    along the motion so a fast agent cannot tunnel through a thin wall.
    """
    footprints = footprints or DEFAULT_FOOTPRINTS
    r = footprints[agent.cls]
    if len(others["pos"]):
        dist = np.linalg.norm(others["pos"] - agent.position, axis=1)
        if np.any(dist < r + others["radius"]):
            return AGENT_COLLISION
    a, b = scene.wall_segments
    if len(a):
        if previous is None:
            d = point_segment_distance(agent.position, a, b)
        else:
            d = segment_segment_distance(np.asarray(previous, dtype=float), agent.position, a, b)
        if np.any(d < r):
            return STATIC_COLLISION
    return NONE


def empty_others():
    return {"pos": np.zeros((0, 2)), "vel": np.zeros((0, 2)), "cls": np.zeros(0, dtype=int),
            "radius": np.zeros(0), "ids": np.zeros(0, dtype=int)}


def agents_to_others(agents, footprints):
    if not agents:
        return empty_others()
    return {
        "pos": np.array([a.position for a in agents]),
        "vel": np.array([a.velocity for a in agents]),
        "cls": np.array([CLASSES.index(a.cls) for a in agents]),
        "radius": np.array([footprints[a.cls] for a in agents]),
        "ids": np.array([a.id for a in agents]),
    }


def merge_others(*groups):
    groups = [g for g in groups if len(g["pos"])]
    if not groups:
        return empty_others()
    return {k: np.concatenate([g[k] for g in groups]) for k in groups[0]}


class ReplayData:
    """Tick-indexed playback of tracked trajectories."""

    def __init__(self, trajectories, frame_rate=FRAME_RATE, heading_eps=1e-4):
        self.trajectories = list(trajectories)
        self.frame_rate = frame_rate
        self.ids = np.array([t.id for t in self.trajectories], dtype=int)
        self.classes = [t.cls for t in self.trajectories]
        self.cls_codes = np.array([CLASSES.index(c) for c in self.classes], dtype=int)
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        frames = [t.frames(frame_rate) for t in self.trajectories]
        self.start = np.array([f[0] for f in frames], dtype=int)
        self.end = np.array([f[-1] for f in frames], dtype=int)
        self.n_ticks = int(self.end.max()) + 2 if len(frames) else 0
        n = len(self.trajectories)
        self.pos = np.full((n, self.n_ticks, 2), np.nan)
        self.vel = np.zeros((n, self.n_ticks, 2))
        self.heading = np.zeros((n, self.n_ticks))
        for r, (t, f) in enumerate(zip(self.trajectories, frames)):
            if np.any(np.diff(f) != 1):
                raise ValueError(f"trajectory {t.id} has gaps; resample at the frame rate first")
            p = t.positions
            self.pos[r, f] = p
            disp = np.diff(p, axis=0)
            back = np.vstack([disp[:1] if len(disp) else np.zeros((1, 2)), disp])
            self.vel[r, f] = back * frame_rate
            h = 0.0
            nz = np.nonzero(np.hypot(disp[:, 0], disp[:, 1]) > heading_eps)[0] if len(disp) else []
            if len(nz):
                h = math.atan2(disp[nz[0], 1], disp[nz[0], 0])
            for k in range(len(f)):
                if np.hypot(*back[k]) > heading_eps:
                    h = math.atan2(back[k, 1], back[k, 0])
                self.heading[r, f[k]] = h

    def row(self, agent_id) -> int:
        return self._row[int(agent_id)]

    def has(self, agent_id, tick) -> bool:
        r = self._row.get(int(agent_id))
        return r is not None and self.start[r] <= tick <= self.end[r]

    def active_rows(self, tick):
        if tick < 0 or tick >= self.n_ticks:
            return np.zeros(0, dtype=int)
        return np.nonzero(~np.isnan(self.pos[:, tick, 0]))[0]

    def goal(self, agent_id):
        r = self.row(agent_id)
        return self.pos[r, self.end[r]].copy()

    def expert_action(self, agent_id, tick):
        r = self.row(agent_id)
        if tick >= self.end[r]:
            return np.zeros(2)
        return self.pos[r, tick + 1] - self.pos[r, tick]

    def state(self, agent_id, tick, scene=None) -> AgentState:
        r = self.row(agent_id)
        if not self.has(agent_id, tick):
            raise NoSuchAgentAtTime(f"agent {agent_id} has no sample at tick {tick}")
        goal = self.goal(agent_id)
        target = scene.nearest_exit(goal) if scene is not None and scene.exits else 0
        return AgentState(self.pos[r, tick].copy(), self.vel[r, tick].copy(), float(self.heading[r, tick]),
                          self.classes[r], goal, target, True, int(self.ids[r]))

    def others(self, tick, footprints, exclude=(), rows=None):
        rows = self.active_rows(tick) if rows is None else rows
        if len(exclude) == 1:
            rows = rows[self.ids[rows] != int(exclude[0])]
        elif len(exclude):
            rows = rows[~np.isin(self.ids[rows], np.asarray(list(exclude)))]
        if len(rows) == 0:
            return empty_others()
        return {
            "pos": self.pos[rows, tick], "vel": self.vel[rows, tick], "cls": self.cls_codes[rows],
            "radius": np.array([footprints[self.classes[r]] for r in rows]), "ids": self.ids[rows],
        }


class Simulator:
    def __init__(self, scene: SceneLayout, replay: ReplayData, config: SimConfig | None = None):
        self.scene = scene
        self.replay = replay
        self.config = config or SimConfig()
        self.n_exits = max(len(scene.exits), 1)

    def observe(self, agent: AgentState, others) -> Observation:
        cfg = self.config
        lidar = lidar_scan(agent.position, agent.heading, agent.velocity, self.scene, others,
                           cfg.beams, cfg.max_range, len(CLASSES))
        to_goal = agent.goal - agent.position
        dist = float(np.hypot(*to_goal))
        rel = math.atan2(to_goal[1], to_goal[0]) - agent.heading if dist > 1e-9 else 0.0
        onehot = np.zeros(self.n_exits)
        onehot[agent.target_exit] = 1.0
        return Observation(lidar, np.array([math.sin(agent.heading), math.cos(agent.heading)]), dist,
                           np.array([math.sin(rel), math.cos(rel)]), float(np.hypot(*agent.velocity)), onehot)

    def others_at(self, tick, exclude=()):
        return self.replay.others(tick, self.config.footprints, exclude)

    def step(self, agent, action):
        return step(agent, action, self.config.dt, self.config.max_step, self.config.heading_eps)

    def collision(self, agent, others, previous=None):
        return detect_collision(agent, others, self.scene, self.config.footprints, previous)

    def reached_goal(self, agent) -> bool:
        return bool(np.linalg.norm(agent.position - agent.goal) < self.config.goal_radius)


@dataclass
class Episode:
    start_tick: int
    agent_id: int
    horizon: int
    agent: AgentState
    terminal_reason: str = "none"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class Transition:
    obs: Observation
    action: np.ndarray
    reward: float
    terminal: bool
    truncated: bool
    next_obs: Observation
    tick: int
    collision: str = NONE
    position: np.ndarray | None = None


def init_episode(sim: Simulator, agent_id, tick, horizon) -> Episode:
    rep = sim.replay
    if not rep.has(agent_id, tick) or tick >= rep.end[rep.row(agent_id)]:
        raise NoSuchAgentAtTime(f"agent {agent_id} cannot start at tick {tick}")
    return Episode(int(tick), int(agent_id), int(horizon), rep.state(agent_id, tick, sim.scene))


def rollout(sim: Simulator, policy, episode: Episode, training_mode=True):
    """Roll one controlled agent forward while everyone else is replayed.

    ``policy(obs, agent, tick)`` returns a world-frame displacement. Training
    mode terminates on collision or goal; evaluation mode only on goal, logging
    collisions. Hitting the horizon sets ``truncated`` (never ``terminal``).
    """
    agent = episode.agent
    exclude = (episode.agent_id,)
    others = sim.others_at(episode.start_tick, exclude)
    obs = sim.observe(agent, others)
    out = []
    for k in range(episode.horizon):
        tick = episode.start_tick + k
        action = clip_action(policy(obs, agent, tick), sim.config.max_step)
        before = agent.position
        agent = sim.step(agent, action)
        others = sim.others_at(tick + 1, exclude)
        hit = sim.collision(agent, others, before)
        goal = sim.reached_goal(agent)
        terminal = goal or (training_mode and hit != NONE)
        truncated = (k == episode.horizon - 1) and not terminal
        next_obs = sim.observe(agent, others)
        out.append(Transition(obs, action, 0.0, terminal, truncated, next_obs, tick, hit, agent.position.copy()))
        if terminal:
            episode.terminal_reason = "goal_reached" if goal else "collision"
            break
        obs = next_obs
    else:
        episode.terminal_reason = "horizon"
    return out


class ExpertReplayPolicy:
    """Emits the recorded displacement of the controlled agent."""

    def __init__(self, replay: ReplayData):
        self.replay = replay

    def __call__(self, obs, agent, tick):
        return self.replay.expert_action(agent.id, tick)
