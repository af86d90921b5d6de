"""Vectorized simulator core: N agents observed, stepped and collision-checked at once.

Used by training and evaluation loops. Others are passed as padded arrays of
shape (N, M, ...) with a validity mask, so each agent can see a different set
of neighbours (different ticks, itself excluded).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from vibe import CLASSES
from vibe.errors import ActionOutOfRange
from vibe.sim.lidar import N_CHANNELS
from vibe.sim.scene import SceneLayout

NONE_CODE, AGENT_CODE, STATIC_CODE = 0, 1, 2
COLLISION_NAMES = ("none", "agent_collision", "static_collision")


@dataclass
class AgentBatch:
    pos: np.ndarray  # (N, 2)
    vel: np.ndarray  # (N, 2)
    heading: np.ndarray  # (N,)
    goal: np.ndarray  # (N, 2)
    target: np.ndarray  # (N,) exit index
    cls: np.ndarray  # (N,) class codes
    ids: np.ndarray  # (N,)

    def __len__(self):
        return len(self.pos)

    def take(self, idx):
        return AgentBatch(*(getattr(self, f)[idx] for f in ("pos", "vel", "heading", "goal", "target", "cls", "ids")))

    @classmethod
    def stack(cls, states):
        return cls(
            np.array([s.position for s in states], dtype=float).reshape(-1, 2),
            np.array([s.velocity for s in states], dtype=float).reshape(-1, 2),
            np.array([s.heading for s in states], dtype=float),
            np.array([s.goal for s in states], dtype=float).reshape(-1, 2),
            np.array([s.target_exit for s in states], dtype=int),
            np.array([CLASSES.index(s.cls) for s in states], dtype=int),
            np.array([s.id for s in states], dtype=int),
        )


@dataclass
class OthersBatch:
    pos: np.ndarray  # (N, M, 2)
    vel: np.ndarray  # (N, M, 2)
    cls: np.ndarray  # (N, M)
    radius: np.ndarray  # (N, M)
    valid: np.ndarray  # (N, M) bool

    @classmethod
    def from_lists(cls, groups):
        """``groups``: per agent a dict with pos/vel/cls/radius arrays (the single-agent format)."""
        n = len(groups)
        m = max([len(g["pos"]) for g in groups] + [0])
        out = cls(np.zeros((n, m, 2)), np.zeros((n, m, 2)), np.zeros((n, m), dtype=int), np.zeros((n, m)),
                  np.zeros((n, m), dtype=bool))
        for i, g in enumerate(groups):
            k = len(g["pos"])
            if k:
                out.pos[i, :k], out.vel[i, :k] = g["pos"], g["vel"]
                out.cls[i, :k], out.radius[i, :k] = g["cls"], g["radius"]
                out.valid[i, :k] = True
        return out


@numba.njit(cache=True)
def _inside(px, py, poly):
    inside = False
    n = poly.shape[0]
    j = n - 1
    for i in range(n):
        xi, yi, xj, yj = poly[i, 0], poly[i, 1], poly[j, 0], poly[j, 1]
        if (yi > py) != (yj > py) and px < (xj - xi) * (py - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


@numba.njit(cache=True)
def _points_in_polygon(points, poly, out):
    for k in range(points.shape[0]):
        if not out[k] and _inside(points[k, 0], points[k, 1], poly):
            out[k] = True


def points_in_polygons(points, polygons):
    """(N,) bool: point inside any polygon (even-odd rule)."""
    points = np.ascontiguousarray(points, dtype=float)
    inside = np.zeros(len(points), dtype=np.bool_)
    for poly in polygons:
        _points_in_polygon(points, np.ascontiguousarray(poly, dtype=float), inside)
    return inside


@numba.njit(cache=True)
def _cast(ox, oy, dx, dy, a, b, max_range):
    best = np.inf
    for s in range(a.shape[0]):
        ex, ey = b[s, 0] - a[s, 0], b[s, 1] - a[s, 1]
        denom = dx * ey - dy * ex
        if abs(denom) <= 1e-12:
            continue
        wx, wy = a[s, 0] - ox, a[s, 1] - oy
        t = (wx * ey - wy * ex) / denom
        u = (wx * dy - wy * dx) / denom
        if t >= 0.0 and u >= 0.0 and u <= 1.0 and t <= max_range and t < best:
            best = t
    return best


@numba.njit(cache=True)
def _lidar_kernel(pos, heading, vel, walls_a, walls_b, zebra_a, zebra_b, in_zebra,
                  opos, ovel, ocls, orad, ovalid, beams, max_range, n_classes, out):
    for i in range(pos.shape[0]):
        ox, oy = pos[i, 0], pos[i, 1]
        for r in range(beams):
            ang = heading[i] + 2.0 * np.pi * r / beams
            dx, dy = np.cos(ang), np.sin(ang)
            out[i, r, 0] = min(_cast(ox, oy, dx, dy, walls_a, walls_b, max_range), max_range)
            if in_zebra[i]:
                out[i, r, 1] = 0.0
            else:
                out[i, r, 1] = min(_cast(ox, oy, dx, dy, zebra_a, zebra_b, max_range), max_range)
            best, hit = np.inf, -1
            for j in range(opos.shape[1]):
                if not ovalid[i, j]:
                    continue
                mx, my = opos[i, j, 0] - ox, opos[i, j, 1] - oy
                mm = mx * mx + my * my
                r2 = orad[i, j] * orad[i, j]
                if mm < r2:
                    d = 0.0
                else:
                    tc = dx * mx + dy * my
                    d2 = mm - tc * tc
                    if d2 > r2:
                        continue
                    d = tc - np.sqrt(max(r2 - d2, 0.0))
                    if d < 0.0 or d > max_range:
                        continue
                if d < best:
                    best, hit = d, j
            if hit >= 0:
                out[i, r, 2] = min(best, max_range)
                out[i, r, 3] = (ovel[i, hit, 0] - vel[i, 0]) * dx + (ovel[i, hit, 1] - vel[i, 1]) * dy
                out[i, r, 4] = (ocls[i, hit] + 1.0) / n_classes
            else:
                out[i, r, 2] = max_range
                out[i, r, 3] = 0.0
                out[i, r, 4] = 0.0


def lidar_batch(pos, heading, vel, scene: SceneLayout, others: OthersBatch, beams=64, max_range=30.0,
                n_classes=len(CLASSES)):
    """(N, beams, 5) pseudo-LiDAR scans; same channels as :func:`vibe.sim.lidar.lidar_scan`."""
    pos = np.ascontiguousarray(pos, dtype=float)
    n = len(pos)
    out = np.zeros((n, beams, N_CHANNELS))
    in_zebra = points_in_polygons(pos, scene.zebras) if scene.zebras else np.zeros(n, dtype=bool)
    wa, wb = scene.obstacle_segments
    za, zb = scene.zebra_segments
    _lidar_kernel(pos, np.ascontiguousarray(heading, dtype=float), np.ascontiguousarray(vel, dtype=float),
                  wa, wb, za, zb, in_zebra, others.pos, others.vel, others.cls, others.radius, others.valid,
                  beams, float(max_range), float(n_classes), out)
    return out


def observe_batch(batch: AgentBatch, others: OthersBatch, scene: SceneLayout, n_exits, beams=64,
                  max_range=30.0, goal_scale=50.0, speed_scale=10.0):
    """Lidar (N, beams, 5) and scalars (N, 6 + n_exits) in :meth:`Observation.scalars` order."""
    lidar = lidar_batch(batch.pos, batch.heading, batch.vel, scene, others, beams, max_range)
    to_goal = batch.goal - batch.pos
    dist = np.hypot(to_goal[:, 0], to_goal[:, 1])
    rel = np.where(dist > 1e-9, np.arctan2(to_goal[:, 1], to_goal[:, 0]) - batch.heading, 0.0)
    onehot = np.zeros((len(batch), max(n_exits, 1)))
    onehot[np.arange(len(batch)), batch.target] = 1.0
    scalars = np.c_[np.sin(batch.heading), np.cos(batch.heading), dist / goal_scale, np.sin(rel), np.cos(rel),
                    np.hypot(batch.vel[:, 0], batch.vel[:, 1]) / speed_scale, onehot]
    return lidar, scalars


def clip_actions(d, max_step):
    n = np.hypot(d[:, 0], d[:, 1])
    return d * np.where(n > max_step, max_step / np.maximum(n, 1e-300), 1.0)[:, None]


def step_batch(batch: AgentBatch, disp, dt, max_step, heading_eps=1e-4) -> AgentBatch:
    disp = np.asarray(disp, dtype=float)
    norm = np.hypot(disp[:, 0], disp[:, 1])
    if np.any(norm > max_step * (1 + 1e-12)):
        raise ActionOutOfRange(f"|displacement| = {norm.max():.4f} exceeds max_step {max_step}")
    heading = np.where(norm > heading_eps, np.arctan2(disp[:, 1], disp[:, 0]), batch.heading)
    heading = np.remainder(heading + math.pi, 2 * math.pi) - math.pi
    heading = np.where(heading == -math.pi, math.pi, heading)
    return AgentBatch(batch.pos + disp, disp / dt, heading, batch.goal, batch.target, batch.cls, batch.ids)


def _segment_distances(p, q, a, b):
    """(N, S) distance between motion segments p->q and static segments a->b."""
    def pt_seg(pts, s0, s1):  # pts (N, 1, 2) vs segments (S, 2)
        e = s1 - s0
        ee = np.sum(e * e, axis=-1)
        t = np.clip(np.sum((pts - s0) * e, axis=-1) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        return np.linalg.norm(pts - (s0 + t[..., None] * e), axis=-1)

    p3, q3 = p[:, None, :], q[:, None, :]
    d = np.minimum(pt_seg(p3, a, b), pt_seg(q3, a, b))
    d = np.minimum(d, pt_seg(a[None], p3, q3))
    d = np.minimum(d, pt_seg(b[None], p3, q3))
    e, f = q3 - p3, b - a
    den = e[..., 0] * f[:, 1] - e[..., 1] * f[:, 0]
    w = a[None] - p3
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * f[:, 1] - w[..., 1] * f[:, 0]) / den
        u = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / den
    cross = (np.abs(den) > 1e-15) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    return np.where(cross, 0.0, d)


def collision_batch(batch: AgentBatch, previous, others: OthersBatch, scene: SceneLayout, radii):
    """(N,) codes: 1 disc overlap with a valid other, 2 swept contact with a wall, else 0."""
    n = len(batch)
    codes = np.zeros(n, dtype=int)
    a, b = scene.wall_segments
    if len(a):
        d = _segment_distances(np.asarray(previous, dtype=float), batch.pos, a, b)
        codes[np.any(d < radii[:, None], axis=1)] = STATIC_CODE
    if others.pos.shape[1]:
        dist = np.linalg.norm(others.pos - batch.pos[:, None, :], axis=2)
        hit = np.any(others.valid & (dist < radii[:, None] + others.radius), axis=1)
        codes[hit] = AGENT_CODE
    return codes
