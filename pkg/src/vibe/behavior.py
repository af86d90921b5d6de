"""Behaviour metrics: KDE grids, Jensen-Shannon divergence, and multi-agent policy evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from vibe.errors import EmptySamples, GridMismatch, WindowOutOfRange
from vibe.imitation.env import Env, to_ego, to_world
from vibe.sim.batch import COLLISION_NAMES, AgentBatch, OthersBatch, clip_actions


@dataclass(frozen=True)
class GridAxis:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (self.hi > self.lo and self.n >= 1):
            raise ValueError("grid axis needs hi > lo and n >= 1")

    @property
    def width(self):
        return (self.hi - self.lo) / self.n

    @property
    def centers(self):
        return self.lo + self.width * (np.arange(self.n) + 0.5)


@dataclass
class DistributionGrid:
    axes: tuple
    prob: np.ndarray

    def __post_init__(self):
        self.axes = tuple(self.axes)
        shape = tuple(a.n for a in self.axes)
        if self.prob.shape != shape:
            raise ValueError(f"probabilities of shape {self.prob.shape} do not match axes {shape}")


def scott_bandwidth(samples):
    """Scott's rule per dimension: sigma * n^(-1/(d+4))."""
    x = np.asarray(samples, dtype=float)
    n, d = x.shape
    return x.std(axis=0, ddof=1) * n ** (-1.0 / (d + 4))


def _kernel_weights(x, axis: GridAxis, h):
    z = (axis.centers[None, :] - x[:, None]) / h
    return np.exp(-0.5 * z * z)


def kde(samples, axes, bandwidth=None) -> DistributionGrid:
    """Product-Gaussian KDE evaluated at cell centres, renormalized to sum 1.

    Samples are clipped into the grid so no mass is lost off its edges. Each
    bandwidth is floored at half a cell width so a degenerate sample cloud
    still covers its cell.
    """
    x = np.asarray(samples, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    axes = tuple(axes)
    if len(x) < 2:
        raise EmptySamples(f"kde needs at least 2 samples, got {len(x)}")
    if x.shape[1] != len(axes):
        raise GridMismatch(f"{x.shape[1]}-D samples on a {len(axes)}-D grid")
    lo = np.array([a.lo for a in axes])
    hi = np.array([a.hi for a in axes])
    x = np.clip(x, lo, hi)
    h = scott_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, dtype=float), (len(axes),))
    h = np.maximum(h, [0.5 * a.width for a in axes])
    w = [_kernel_weights(x[:, k], a, h[k]) for k, a in enumerate(axes)]
    if len(w) == 1:
        dens = w[0].sum(axis=0)
    elif len(w) == 2:
        dens = w[0].T @ w[1]
    else:
        half = len(w) // 2
        left, right = w[0], w[half]
        for m in w[1:half]:
            left = (left[:, :, None] * m[:, None, :]).reshape(len(x), -1)
        for m in w[half + 1:]:
            right = (right[:, :, None] * m[:, None, :]).reshape(len(x), -1)
        dens = (left.T @ right).reshape([a.n for a in axes])
    total = dens.sum()
    if not total > 0:
        raise EmptySamples("kernel mass vanished on the grid")
    return DistributionGrid(axes, dens / total)


def jsd(p: DistributionGrid, q: DistributionGrid) -> float:
    """Jensen-Shannon divergence in nats, with 0 log 0 = 0; bounded by ln 2."""
    if p.axes != q.axes:
        raise GridMismatch("distributions live on different grids")
    a, b = p.prob.ravel(), q.prob.ravel()
    m = 0.5 * (a + b)

    def kl(u):
        nz = u > 0
        return float(np.sum(u[nz] * np.log(u[nz] / m[nz])))

    return float(min(max(0.5 * kl(a) + 0.5 * kl(b), 0.0), math.log(2.0)))


# -- evaluation ---------------------------------------------------------------

DEADLINES = ("window", "recorded")


@dataclass(frozen=True)
class ReportConfig:
    speed_max: float = 16.0
    speed_bins: int = 64
    occupancy_bins: int = 64
    joint_position_bins: int = 16
    joint_velocity_bins: int = 8
    velocity_max: float = 12.0
    margin: float = 2.0
    controlled_classes: tuple = ("car",)
    deadline: str = "window"  # agents stay until their goal or the window end; "recorded": until their data end

    def __post_init__(self):
        if self.deadline not in DEADLINES:
            raise ValueError(f"deadline must be one of {DEADLINES}")


@dataclass
class BehaviorReport:
    jsd_speed: float
    jsd_occupancy: float
    jsd_joint: float
    collision_probability: float
    exit_failure_probability: float
    window_ticks: int
    agents: int = 0
    windows: int = 1

    def to_dict(self):
        return asdict(self)


def grid_axes(scene, cfg: ReportConfig = ReportConfig()):
    """(speed, occupancy, joint) axis tuples over the scene bounds."""
    lo, hi = scene.bounds(cfg.margin)
    speed = (GridAxis(0.0, cfg.speed_max, cfg.speed_bins),)
    occ = tuple(GridAxis(float(lo[k]), float(hi[k]), cfg.occupancy_bins) for k in range(2))
    vmax = cfg.velocity_max
    joint = tuple(GridAxis(float(lo[k]), float(hi[k]), cfg.joint_position_bins) for k in range(2)) + \
        tuple(GridAxis(-vmax, vmax, cfg.joint_velocity_bins) for _ in range(2))
    return speed, occ, joint


def compare_samples(truth, sim, scene, cfg: ReportConfig = ReportConfig()):
    """(speed, occupancy, joint) JSDs between (N, 4) arrays of [x, y, vx, vy] rows.

    Both sides are smoothed with the bandwidth Scott's rule gives for the truth samples.
    """
    speed_ax, occ_ax, joint_ax = grid_axes(scene, cfg)
    out = []
    for cols, axes in (((None,), speed_ax), ((0, 1), occ_ax), ((0, 1, 2, 3), joint_ax)):
        if cols == (None,):
            t = np.hypot(truth[:, 2], truth[:, 3])[:, None]
            s = np.hypot(sim[:, 2], sim[:, 3])[:, None]
        else:
            t, s = truth[:, cols], sim[:, cols]
        h = scott_bandwidth(np.clip(t, [a.lo for a in axes], [a.hi for a in axes]))
        out.append(jsd(kde(t, axes, h), kde(s, axes, h)))
    return tuple(out)


def mean_policy(policy):
    """Deterministic evaluation: the Gaussian policy's mean action."""
    return lambda x, batch, tick: policy.mean(x)


def expert_policy(env: Env):
    """Replays recorded displacements; a sanity reference for the evaluator."""
    rep = env.replay

    def act(x, batch, tick):
        disp = np.array([rep.expert_action(i, tick) for i in batch.ids])
        return to_ego(disp, batch.heading, env.action_scale)

    return act


def zero_policy(x, batch, tick):
    return np.zeros((len(x), 2))


def controlled_rows(env: Env, start, ticks, classes=("car",)):
    rep = env.replay
    codes = [i for i, c in enumerate(rep.classes) if c in classes]
    rows = np.array(codes, dtype=int)
    if len(rows) == 0:
        return rows
    keep = (rep.start[rows] >= start) & (rep.end[rows] < start + ticks)
    return rows[keep]


def evaluate_policy(policy, env: Env, start, ticks, cfg: ReportConfig = ReportConfig(), split=None,
                    traces=None, outcomes=None) -> BehaviorReport:
    """Simulate every car fully inside ``[start, start + ticks)`` at once under ``policy``.

    ``policy(x, batch, tick)`` returns ego-frame actions for the encoded inputs.
    Other road users are replayed. Collisions are logged, not terminating;
    agents leave at their goal, otherwise at the deadline (window end or
    recorded end tick) and then count as exit failures. ``split`` is
    the allowed ``(lo, hi)`` tick range. When ``traces`` is a list, rows of
    ``(tick, id, x, y, vx, vy)`` are appended to it; ``outcomes`` likewise
    collects one dict per controlled agent.
    """
    rep = env.replay
    lo, hi = split if split is not None else (0, rep.n_ticks - 1)
    if ticks < 1 or start < lo or start + ticks > hi:
        raise WindowOutOfRange(f"window [{start}, {start + ticks}) is outside [{lo}, {hi})")
    rows = controlled_rows(env, start, ticks, cfg.controlled_classes)
    if len(rows) == 0:
        raise EmptySamples("no controllable agents inside the window")
    ctrl_ids = set(int(i) for i in rep.ids[rows])
    n = len(rows)
    state = AgentBatch.stack([rep.state(rep.ids[r], rep.start[r], env.scene) for r in rows])
    spawned = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    reached = np.zeros(n, dtype=bool)
    first_hit = np.full(n, -1)
    hit_code = np.zeros(n, dtype=int)
    radius = env.radius_by_code
    sim_rows = [np.c_[state.pos, state.vel]]  # every agent's initial state equals the data
    if traces is not None:
        for k in range(n):
            traces.append((int(rep.start[rows[k]]), int(state.ids[k]), *state.pos[k], *state.vel[k]))

    def others_for(t, active, pos, vel):
        replayed = np.array([r for r in rep.active_rows(t) if int(rep.ids[r]) not in ctrl_ids], dtype=int)
        k, a = len(replayed), len(active)
        m = k + a
        ob = OthersBatch(np.zeros((a, m, 2)), np.zeros((a, m, 2)), np.zeros((a, m), dtype=int),
                         np.zeros((a, m)), np.ones((a, m), dtype=bool))
        if k:
            ob.pos[:, :k], ob.vel[:, :k] = rep.pos[replayed, t], rep.vel[replayed, t]
            ob.cls[:, :k] = rep.cls_codes[replayed]
            ob.radius[:, :k] = radius[rep.cls_codes[replayed]]
        ob.pos[:, k:], ob.vel[:, k:] = pos[None], vel[None]
        ob.cls[:, k:] = state.cls[active][None]
        ob.radius[:, k:] = radius[state.cls[active]][None]
        ob.valid[:, k:] = ~np.eye(a, dtype=bool)
        return ob

    for t in range(start, start + ticks - 1):
        spawned |= rep.start[rows] == t
        active = np.nonzero(spawned & ~done)[0]
        if len(active) == 0:
            continue
        batch = state.take(active)
        x = env.observe(batch, others_for(t, active, batch.pos, batch.vel))
        act = np.asarray(policy(x, batch, t), dtype=float)
        # collisions against the other agents' post-step positions
        moved = _advance_positions(env, batch, act)
        new, _, codes, goal = env.advance(batch, act, others_for(t + 1, active, moved, batch.vel))
        for f in ("pos", "vel", "heading"):
            getattr(state, f)[active] = getattr(new, f)
        new_hit = (codes != 0) & (first_hit[active] < 0)
        first_hit[active[new_hit]] = t + 1
        hit_code[active[new_hit]] = codes[new_hit]
        reached[active] |= goal
        done[active] |= goal
        if cfg.deadline == "recorded":
            done[active] |= t + 1 >= rep.end[rows[active]]
        sim_rows.append(np.c_[new.pos, new.vel])
        if traces is not None:
            for k, i in enumerate(active):
                traces.append((t + 1, int(state.ids[i]), *new.pos[k], *new.vel[k]))
    truth = np.vstack([np.c_[rep.pos[r, rep.start[r]:rep.end[r] + 1], rep.vel[r, rep.start[r]:rep.end[r] + 1]]
                       for r in rows])
    sim = np.vstack(sim_rows)
    js = compare_samples(truth, sim, env.scene, cfg)
    if outcomes is not None:
        for k, r in enumerate(rows):
            outcomes.append({"id": int(rep.ids[r]), "start": int(rep.start[r]), "end": int(rep.end[r]),
                             "reached": bool(reached[k]), "collision": COLLISION_NAMES[hit_code[k]],
                             "collision_tick": int(first_hit[k]),
                             "goal_distance": float(np.hypot(*(state.pos[k] - state.goal[k])))})
    collided = first_hit >= 0
    return BehaviorReport(*js, float(collided.mean()), float(1.0 - reached.mean()), int(ticks), n, 1)


def _advance_positions(env: Env, batch, act):
    return batch.pos + clip_actions(to_world(act, batch.heading, env.action_scale), env.sim.max_step)


def evaluate_windows(policy, env: Env, starts, ticks, cfg: ReportConfig = ReportConfig(), split=None,
                     traces=None):
    """Average reports over non-overlapping windows; ``traces`` gets one row list per window."""
    starts = sorted(int(s) for s in starts)
    if any(b < a + ticks for a, b in zip(starts, starts[1:])):
        raise WindowOutOfRange("evaluation windows overlap")
    reps = []
    for s in starts:
        rows = [] if traces is not None else None
        reps.append(evaluate_policy(policy, env, s, ticks, cfg, split, rows))
        if traces is not None:
            traces.append(rows)
    fields = ("jsd_speed", "jsd_occupancy", "jsd_joint", "collision_probability", "exit_failure_probability")
    avg = {f: float(np.mean([getattr(r, f) for r in reps])) for f in fields}
    return BehaviorReport(**avg, window_ticks=int(ticks), agents=sum(r.agents for r in reps), windows=len(reps))
