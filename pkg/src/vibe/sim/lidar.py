"""Pseudo-LiDAR ray casting against scene segments and agent footprints.

Channels: 0 wall/road-edge range, 1 zebra range, 2 nearest agent range,
3 radial speed of that agent relative to the scanner (positive = receding),
4 class code of that agent in (0, 1].
"""

import numpy as np

N_CHANNELS = 5


def beam_directions(heading, beams):
    ang = heading + 2.0 * np.pi * np.arange(beams) / beams
    return np.c_[np.cos(ang), np.sin(ang)]


def ray_segment_distance(origin, dirs, a, b, max_range):
    """Nearest hit distance per ray against segments ``a -> b`` (inf if none)."""
    if len(a) == 0:
        return np.full(len(dirs), np.inf)
    e = b - a  # (S, 2)
    w = a - origin  # (S, 2)
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]  # (R, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * dirs[:, None, 1] - w[None, :, 1] * dirs[:, None, 0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t >= 0) & (u >= 0) & (u <= 1) & (t <= max_range)
    t = np.where(ok, t, np.inf)
    return t.min(axis=1)


def ray_disc_hits(origin, dirs, centers, radii, max_range):
    """Per-ray nearest disc hit: (distance, index) with inf / -1 for misses."""
    n_rays = len(dirs)
    if len(centers) == 0:
        return np.full(n_rays, np.inf), np.full(n_rays, -1)
    m = centers - origin  # (M, 2)
    tc = dirs @ m.T  # (R, M)
    d2 = np.sum(m**2, axis=1)[None, :] - tc**2
    r2 = (radii**2)[None, :]
    inside = (np.sum(m**2, axis=1) < radii**2)[None, :].repeat(n_rays, axis=0)
    thc = np.sqrt(np.maximum(r2 - d2, 0.0))
    t0 = tc - thc
    hit = (d2 <= r2) & (t0 >= 0) & (t0 <= max_range)
    dist = np.where(inside, 0.0, np.where(hit, t0, np.inf))
    idx = np.argmin(dist, axis=1)
    best = dist[np.arange(n_rays), idx]
    idx = np.where(np.isfinite(best), idx, -1)
    return best, idx


def lidar_scan(position, heading, velocity, scene, others, beams=64, max_range=30.0, n_classes=5):
    """Scan from ``position``; ``others`` is a dict of arrays pos/vel/cls/radius."""
    origin = np.asarray(position, dtype=float)
    dirs = beam_directions(heading, beams)
    out = np.zeros((beams, N_CHANNELS))

    a, b = scene.obstacle_segments
    out[:, 0] = np.minimum(ray_segment_distance(origin, dirs, a, b, max_range), max_range)

    a, b = scene.zebra_segments
    zebra = ray_segment_distance(origin, dirs, a, b, max_range)
    if any(_inside(origin, poly) for poly in scene.zebras):
        zebra[:] = 0.0
    out[:, 1] = np.minimum(zebra, max_range)

    dist, idx = ray_disc_hits(origin, dirs, others["pos"], others["radius"], max_range)
    out[:, 2] = np.minimum(dist, max_range)
    hit = idx >= 0
    if np.any(hit):
        rel_v = others["vel"][idx[hit]] - np.asarray(velocity, dtype=float)
        out[hit, 3] = np.sum(rel_v * dirs[hit], axis=1)
        out[hit, 4] = (others["cls"][idx[hit]] + 1.0) / n_classes
    return out


def _inside(point, poly):
    x, y = point
    xs, ys = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = ((ys > y) != (yj > y)) & (x < (xj - xs) * (y - ys) / (yj - ys) + xs)
    return bool(np.count_nonzero(cross) % 2)
