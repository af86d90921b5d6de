"""Synthetic roundabout scenes, scripted expert traffic and noisy detections.

Everything here is a deterministic function of ``(SynthConfig, seed)`` and
serves as ground truth for the tracker, simulator and imitation modules.

Geometry: a roundabout centred at the origin, circulating counter-clockwise
(right-hand traffic), with ``arms`` radial approach roads. In an arm's local
frame (``u`` outward, ``n`` = ``u`` rotated +90 deg) the inbound lane sits at
``+lane_offset`` and the outbound lane at ``-lane_offset``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vibe import FRAME_RATE
from vibe.errors import NoPath
from vibe.geometry import PinholeCamera, ground_to_image, local_scale
from vibe.sim.scene import Element, Entry, Exit, SceneLayout
from vibe.tracker import DEFAULT_FOOTPRINTS, Detection, TrackedTrajectory

# image bbox size in meters (width, height) by class, oblique view of the whole body
BOX_SIZE = {"car": (4.0, 2.5), "bus": (8.0, 4.0), "truck": (7.0, 4.0), "pedestrian": (0.8, 1.8),
            "bicycle": (1.6, 1.8)}


@dataclass
class SynthConfig:
    radius: float = 12.0  # circulating lane centreline
    road_half_width: float = 3.0
    arms: int = 4
    arm_length: float = 30.0
    arm_half_width: float = 4.0
    lane_offset: float = 2.0
    zebra_at: float = 9.0  # zebra start, meters beyond the outer ring
    zebra_width: float = 3.0
    car_rate: float = 0.2  # spawns per second, whole scene
    pedestrian_rate: float = 0.02  # spawns per second per zebra
    speed_mean: float = 6.0
    speed_std: float = 0.7
    pedestrian_speed: float = 1.3
    accel: float = 2.0
    brake: float = 3.0
    lateral_noise: float = 0.15
    dropout: float = 0.1
    position_noise: float = 0.5
    feature_dim: int = 128
    feature_noise: float = 0.05
    train_ticks: int = 10000
    val_ticks: int = 2000
    test_ticks: int = 2500
    gap_ticks: int = 300
    seed: int = 0
    camera_position: tuple = (-60.0, -60.0, 70.0)
    camera_focal: float = 700.0
    footprints: dict = field(default_factory=lambda: dict(DEFAULT_FOOTPRINTS))

    def __post_init__(self):
        if self.radius <= 0 or self.road_half_width <= 0 or self.road_half_width >= self.radius:
            raise ValueError("need 0 < road_half_width < radius")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be in [0, 1]")
        if self.arms < 2:
            raise ValueError("arm count must be >= 2")
        for name in ("car_rate", "pedestrian_rate", "position_noise", "feature_noise", "speed_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def inner_radius(self):
        return self.radius - self.road_half_width

    @property
    def outer_radius(self):
        return self.radius + self.road_half_width

    @property
    def arm_end(self):
        return self.outer_radius + self.arm_length

    @property
    def total_ticks(self):
        return self.train_ticks + self.val_ticks + self.test_ticks + 2 * self.gap_ticks

    def splits(self):
        """Disjoint ``[start, end)`` tick windows separated by ``gap_ticks``."""
        a = self.train_ticks
        b = a + self.gap_ticks + self.val_ticks
        return {"train": (0, a), "val": (a + self.gap_ticks, b),
                "test": (b + self.gap_ticks, b + self.gap_ticks + self.test_ticks)}


def arm_angle(cfg: SynthConfig, i):
    return 2.0 * math.pi * i / cfg.arms


def _frame(theta):
    u = np.array([math.cos(theta), math.sin(theta)])
    return u, np.array([-u[1], u[0]])


def _local(theta, along, lateral):
    u, n = _frame(theta)
    return np.outer(np.atleast_1d(along), u) + np.outer(np.atleast_1d(lateral), n)


def _arc(radius, a0, a1, step=0.05):
    k = max(2, int(math.ceil(abs(a1 - a0) / step)) + 1)
    ang = np.linspace(a0, a1, k)
    return radius * np.c_[np.cos(ang), np.sin(ang)]


# -- scene --------------------------------------------------------------------

def generate_scene(cfg: SynthConfig) -> SceneLayout:
    """Roundabout with walls at road edges, one zebra per arm, exits at arm ends."""
    elements = [Element("wall", _arc(cfg.inner_radius, 0.0, 2.0 * math.pi, 2 * math.pi / 48))]
    flare_lat = min(cfg.arm_half_width + 2.0, 0.8 * cfg.outer_radius)
    alpha = math.asin(flare_lat / cfg.outer_radius)
    flare_along = cfg.outer_radius + 3.0
    w = cfg.arm_half_width
    for i in range(cfg.arms):
        a, b = arm_angle(cfg, i), arm_angle(cfg, i + 1)
        pts = np.vstack([
            _local(a, [cfg.arm_end, flare_along], [w, w]),
            _arc(cfg.outer_radius, a + alpha, b - alpha),
            _local(b, [flare_along, cfg.arm_end], [-w, -w]),
        ])
        elements.append(Element("wall", pts))
    exits, entries = [], []
    for i in range(cfg.arms):
        a = arm_angle(cfg, i)
        z0 = cfg.outer_radius + cfg.zebra_at
        poly = _local(a, [z0, z0 + cfg.zebra_width, z0 + cfg.zebra_width, z0], [-w - 1, -w - 1, w + 1, w + 1])
        elements.append(Element("zebra", poly))
        p = _local(a, cfg.arm_end, -cfg.lane_offset)[0]
        exits.append(Exit(f"out{i}", (float(p[0]), float(p[1])), a))
        q = _local(a, cfg.arm_end, cfg.lane_offset)[0]
        entries.append(Entry(f"in{i}", (float(q[0]), float(q[1]))))
    return SceneLayout(tuple(elements), tuple(exits), tuple(entries))


def synth_camera(cfg: SynthConfig) -> PinholeCamera:
    return PinholeCamera(tuple(cfg.camera_position), (0.0, 0.0, 0.0), cfg.camera_focal)


# -- paths --------------------------------------------------------------------

def _chaikin(pts, iterations=4):
    for _ in range(iterations):
        q = 0.75 * pts[:-1] + 0.25 * pts[1:]
        r = 0.25 * pts[:-1] + 0.75 * pts[1:]
        mid = np.empty((2 * len(q), 2))
        mid[0::2], mid[1::2] = q, r
        pts = np.vstack([pts[:1], mid, pts[-1:]])
    return pts


class Path:
    """Polyline parameterized by arc length."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.r_[0.0, np.cumsum(seg)]
        self.length = float(self.s[-1])

    def at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        return np.c_[np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])]

    def normal(self, s):
        s = np.asarray(s, dtype=float)
        d = self.at(np.minimum(s + 0.05, self.length)) - self.at(np.maximum(s - 0.05, 0.0))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return np.c_[-d[:, 1], d[:, 0]]


def _arm_index(ident, prefix, cfg):
    try:
        i = int(str(ident).removeprefix(prefix))
    except ValueError:
        raise NoPath(f"unknown {prefix!r} id {ident!r}") from None
    if not 0 <= i < cfg.arms or str(ident) != f"{prefix}{i}":
        raise NoPath(f"unknown {prefix!r} id {ident!r}")
    return i


def route(cfg: SynthConfig, entry_id, exit_id) -> Path:
    """Enter an arm, circulate counter-clockwise, leave by the exit arm."""
    i, j = _arm_index(entry_id, "in", cfg), _arm_index(exit_id, "out", cfg)
    if i == j:
        raise NoPath("entry and exit on the same arm")
    a, b = arm_angle(cfg, i), arm_angle(cfg, j)
    if b <= a:
        b += 2.0 * math.pi
    knee = cfg.outer_radius + 1.0
    turn = 0.3
    pts = np.vstack([
        _local(a, [cfg.arm_end, knee], [cfg.lane_offset] * 2),
        _arc(cfg.radius, a + turn, b - turn),
        _local(b, [knee, cfg.arm_end], [-cfg.lane_offset] * 2),
    ])
    return Path(_chaikin(pts))


def _zebra_intervals(cfg, path, margin):
    """Per arm, the arc-length interval where the path is within ``margin`` of the zebra."""
    s = np.arange(0.0, path.length, 0.1)
    p = path.at(s)
    out = []
    z0 = cfg.outer_radius + cfg.zebra_at
    for k in range(cfg.arms):
        u, n = _frame(arm_angle(cfg, k))
        along, lat = p @ u, p @ n
        inside = (along > z0 - margin) & (along < z0 + cfg.zebra_width + margin) & (np.abs(lat) < cfg.arm_half_width)
        if np.any(inside):
            idx = np.nonzero(inside)[0]
            lane = float(np.median(lat[idx]))
            out.append((k, float(s[idx[0]]), float(s[idx[-1]]), lane))
    return out


# -- agents -------------------------------------------------------------------

def pedestrian_crossing(cfg: SynthConfig, arm, start_tick, direction, speed, agent_id):
    z = cfg.outer_radius + cfg.zebra_at + 0.5 * cfg.zebra_width
    half = cfg.arm_half_width - 0.5
    n_ticks = int(math.floor(2 * half / (speed / FRAME_RATE))) + 1
    lat = -direction * half + direction * np.arange(n_ticks) * speed / FRAME_RATE
    pos = _local(arm_angle(cfg, arm), np.full(n_ticks, z), lat)
    t = (start_tick + np.arange(n_ticks)) / FRAME_RATE
    return TrackedTrajectory(agent_id, "pedestrian", np.c_[t, pos])


def _ped_index(pedestrians, cfg):
    """Per arm, list of (first_tick, lateral offsets per tick)."""
    idx = {k: [] for k in range(cfg.arms)}
    for p in pedestrians:
        pos = p.positions
        c = pos.mean(axis=0)
        k = int(np.argmax([c @ _frame(arm_angle(cfg, a))[0] for a in range(cfg.arms)]))
        lat = pos @ _frame(arm_angle(cfg, k))[1]
        idx[k].append((int(p.frames()[0]), lat))
    return idx


def _zebra_busy(peds, lane, k0, k1, band):
    for first, lat in peds:
        lo, hi = max(k0, first), min(k1, first + len(lat) - 1)
        if lo <= hi and np.any(np.abs(lat[lo - first:hi - first + 1] - lane) < band):
            return True
    return False


def scripted_expert(scene: SceneLayout, entry_id, exit_id, cfg: SynthConfig, seed, start_tick=0,
                    pedestrians=(), agent_id=1, speed=None) -> TrackedTrajectory:
    """Follow the entry-to-exit route at 15 Hz, yielding at zebras occupied by ``pedestrians``.

    Speed is drawn from the config profile unless given; a small smooth lateral
    offset (zero at both ends) is added along the route normal.
    """
    if scene.entries and entry_id not in {e.id for e in scene.entries}:
        raise NoPath(f"scene has no entry {entry_id!r}")
    if scene.exits and exit_id not in {e.id for e in scene.exits}:
        raise NoPath(f"scene has no exit {exit_id!r}")
    path = route(cfg, entry_id, exit_id)
    rng = np.random.default_rng(seed)
    cruise = float(speed) if speed is not None else float(
        np.clip(rng.normal(cfg.speed_mean, cfg.speed_std), 0.5 * cfg.speed_mean, 1.5 * cfg.speed_mean))
    amp = cfg.lateral_noise * rng.standard_normal()
    waves = int(rng.integers(1, 4))
    dt = 1.0 / FRAME_RATE
    r_car = cfg.footprints["car"]
    zebras = _zebra_intervals(cfg, path, r_car + 0.5) if len(pedestrians) else []
    ped_idx = _ped_index(pedestrians, cfg) if zebras else {}

    s_list, s, v, k = [], 0.0, cruise, start_tick
    while s <= path.length:
        s_list.append(s)
        limit = cruise
        for arm, s_in, s_out, lane in zebras:
            gap = s_in - 0.5 - s
            if gap < -0.25 or gap > 30.0:
                continue
            clear = k + int(FRAME_RATE * ((s_out - s) / cruise + cruise / cfg.accel + 1.0))
            if _zebra_busy(ped_idx[arm], lane, k, clear, r_car + 0.3 + 0.9):
                limit = min(limit, math.sqrt(2.0 * cfg.brake * max(gap, 0.0)))
        v = min(limit, v + cfg.accel * dt)
        s += v * dt
        k += 1
        if len(s_list) > 100000:
            raise NoPath("expert stalled")
    s_arr = np.asarray(s_list)
    pos = path.at(s_arr)
    if amp != 0.0:
        pos = pos + path.normal(s_arr) * (amp * np.sin(waves * math.pi * s_arr / path.length))[:, None]
    t = (start_tick + np.arange(len(s_arr))) / FRAME_RATE
    traj = TrackedTrajectory(agent_id, "car", np.c_[t, pos])
    traj.arc_length = s_arr
    return traj


def _conflicts(traj, others, cfg, margin):
    f = traj.frames()
    r = cfg.footprints[traj.cls]
    for o in others:
        of = o.frames()
        lo, hi = max(f[0], of[0]), min(f[-1], of[-1])
        if lo > hi:
            continue
        a = traj.positions[lo - f[0]:hi - f[0] + 1]
        b = o.positions[lo - of[0]:hi - of[0] + 1]
        if np.any(np.linalg.norm(a - b, axis=1) < r + cfg.footprints[o.cls] + margin):
            return True
    return False


@dataclass
class SynthData:
    scene: SceneLayout
    trajectories: list
    splits: dict  # name -> (start_tick, end_tick)
    config: SynthConfig

    def split_ids(self, name, cls="car"):
        """Ids of ``cls`` trajectories lying entirely inside a split window."""
        lo, hi = self.splits[name]
        out = []
        for t in self.trajectories:
            f = t.frames()
            if t.cls == cls and f[0] >= lo and f[-1] < hi:
                out.append(t.id)
        return out


def generate_traffic(cfg: SynthConfig, seed=None, n_ticks=None, retry_ticks=10, max_retries=60) -> SynthData:
    """Pedestrians on zebras plus conflict-free scripted cars over ``n_ticks``."""
    seed = cfg.seed if seed is None else seed
    n_ticks = cfg.total_ticks if n_ticks is None else n_ticks
    scene = generate_scene(cfg)
    rng = np.random.default_rng(seed)
    next_id = 1
    peds = []
    for arm in range(cfg.arms):
        p_rate = cfg.pedestrian_rate / FRAME_RATE
        for k in np.nonzero(rng.random(n_ticks) < p_rate)[0]:
            speed = cfg.pedestrian_speed * float(rng.uniform(0.8, 1.2))
            p = pedestrian_crossing(cfg, arm, int(k), int(rng.choice([-1, 1])), speed, next_id)
            if not _conflicts(p, peds, cfg, 0.2):
                peds.append(p)
                next_id += 1
    cars = []
    spawns = np.nonzero(rng.random(n_ticks) < cfg.car_rate / FRAME_RATE)[0]
    for k in spawns:
        i = int(rng.integers(cfg.arms))
        j = (i + int(rng.integers(1, cfg.arms))) % cfg.arms
        car_seed = int(rng.integers(2**31))
        for attempt in range(max_retries):
            tr = scripted_expert(scene, f"in{i}", f"out{j}", cfg, car_seed, int(k) + attempt * retry_ticks,
                                 peds, next_id)
            if tr.frames()[-1] >= n_ticks:
                break
            if not _conflicts(tr, cars, cfg, 0.5) and not _conflicts(tr, peds, cfg, 0.3):
                cars.append(tr)
                next_id += 1
                break
    trajectories = sorted(cars + peds, key=lambda t: t.id)
    return SynthData(scene, trajectories, cfg.splits(), cfg)


# -- detections ---------------------------------------------------------------

def identity_feature(seed, identity, dim):
    v = np.random.default_rng([seed, int(identity), 7]).standard_normal(dim)
    return v / np.linalg.norm(v)


def render_detections(trajectories, calib, cfg: SynthConfig, seed, window=None):
    """Noisy per-frame detections of every trajectory sample (optionally within a tick window)."""
    rng = np.random.default_rng([seed, 11])
    rows = []
    for tr in trajectories:
        mean = identity_feature(seed, tr.id, cfg.feature_dim)
        w_m, h_m = BOX_SIZE[tr.cls]
        for f, p in zip(tr.frames(), tr.positions):
            if window is not None and not window[0] <= f < window[1]:
                continue
            if rng.random() < cfg.dropout:
                continue
            g = p + cfg.position_noise * rng.standard_normal(2)
            feat = mean + cfg.feature_noise * rng.standard_normal(cfg.feature_dim)
            feat /= np.linalg.norm(feat)
            u, v = ground_to_image(g, tr.cls, calib)
            scale = local_scale(g, calib, tr.cls)
            box = (u - 0.5 * w_m * scale, v - h_m * scale, u + 0.5 * w_m * scale, v)
            rows.append((int(f), int(tr.id), Detection(int(f), tr.cls, box, 1.0, feat)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return [r[2] for r in rows]
