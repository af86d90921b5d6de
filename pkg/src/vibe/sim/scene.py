"""Static scene description: tagged polylines/polygons, exits and entries."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

TAGS = ("wall", "road_edge", "zebra", "pavement")
POLYGON_TAGS = ("zebra", "pavement")


@dataclass(frozen=True)
class Element:
    tag: str
    points: np.ndarray  # (N, 2); polygons are implicitly closed

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("element needs at least two points")
        object.__setattr__(self, "points", pts)

    @property
    def is_polygon(self):
        return self.tag in POLYGON_TAGS

    def segments(self):
        pts = self.points
        if self.is_polygon:
            return pts, np.roll(pts, -1, axis=0)
        return pts[:-1], pts[1:]


@dataclass(frozen=True)
class Exit:
    id: str
    point: tuple
    heading: float


@dataclass(frozen=True)
class Entry:
    id: str
    point: tuple


def _segments_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    return (orient(p1, p2, q1) * orient(p1, p2, q2) < 0) and (orient(q1, q2, p1) * orient(q1, q2, p2) < 0)


def polygon_is_simple(points) -> bool:
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                return False
    return True


def point_in_polygon(point, polygon) -> bool:
    x, y = point
    poly = np.asarray(polygon, dtype=float)
    inside = False
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y) and x < (xj - xi) * (y - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


@dataclass(frozen=True)
class SceneLayout:
    elements: tuple = ()
    exits: tuple = ()
    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "exits", tuple(self.exits))
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.id for e in self.exits]
        if len(ids) != len(set(ids)):
            raise ValueError("exit ids must be unique")
        for el in self.elements:
            if el.is_polygon and not polygon_is_simple(el.points):
                raise ValueError(f"{el.tag} polygon is self-intersecting")

    def segments(self, *tags):
        """Stacked segment endpoints ``(A, B)`` for elements with the given tags."""
        a, b = [], []
        for el in self.elements:
            if el.tag in tags:
                s, e = el.segments()
                a.append(s)
                b.append(e)
        if not a:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return np.vstack(a), np.vstack(b)

    @cached_property
    def obstacle_segments(self):
        return self.segments("wall", "road_edge")

    @cached_property
    def wall_segments(self):
        return self.segments("wall")

    @cached_property
    def zebra_segments(self):
        return self.segments("zebra")

    @cached_property
    def zebras(self):
        return [el.points for el in self.elements if el.tag == "zebra"]

    def exit_index(self, exit_id) -> int:
        for i, e in enumerate(self.exits):
            if e.id == exit_id:
                return i
        raise KeyError(exit_id)

    def nearest_exit(self, point) -> int:
        pts = np.array([e.point for e in self.exits], dtype=float)
        return int(np.argmin(np.linalg.norm(pts - np.asarray(point), axis=1)))

    def bounds(self, margin=0.0):
        pts = np.vstack([el.points for el in self.elements] +
                        [np.array([e.point for e in self.exits]).reshape(-1, 2)])
        lo, hi = pts.min(axis=0) - margin, pts.max(axis=0) + margin
        return lo, hi


# -- scene file ---------------------------------------------------------------

def dumps_scene(scene: SceneLayout) -> str:
    lines = []
    for el in scene.elements:
        lines.append(f"{el.tag}: " + " ".join(repr(float(v)) for v in el.points.ravel()))
    for e in scene.exits:
        lines.append(f"exit: {e.id} {float(e.point[0])!r} {float(e.point[1])!r} {float(e.heading)!r}")
    for e in scene.entries:
        lines.append(f"entry: {e.id} {float(e.point[0])!r} {float(e.point[1])!r}")
    return "\n".join(lines) + "\n"


def loads_scene(text: str) -> SceneLayout:
    elements, exits, entries = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        key, parts = key.strip(), rest.split()
        try:
            if key == "exit":
                exits.append(Exit(parts[0], (float(parts[1]), float(parts[2])), float(parts[3])))
            elif key == "entry":
                entries.append(Entry(parts[0], (float(parts[1]), float(parts[2]))))
            elif key in TAGS:
                vals = [float(v) for v in parts]
                if len(vals) % 2:
                    raise ValueError("odd number of coordinates")
                elements.append(Element(key, np.array(vals).reshape(-1, 2)))
            else:
                raise ValueError(f"unknown key {key!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"scene line {lineno}: {exc}") from None
    return SceneLayout(tuple(elements), tuple(exits), tuple(entries))


def load_scene(path) -> SceneLayout:
    return loads_scene(Path(path).read_text())


def save_scene(scene: SceneLayout, path):
    Path(path).write_text(dumps_scene(scene))
