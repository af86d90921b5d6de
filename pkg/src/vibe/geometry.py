"""Camera calibration from landmarks, radial undistortion and image-to-ground projection."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vibe import CLASSES
from vibe.errors import BehindPlane, DegenerateConfiguration, NonConvergent, TooFewPoints

DEFAULT_CLASS_HEIGHTS = {"car": 0.4, "bus": 0.6, "truck": 0.6, "pedestrian": 0.0, "bicycle": 0.2}


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        if m[2, 2] == 0.0:
            raise DegenerateConfiguration("homography has zero bottom-right element")
        m = m / m[2, 2]
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateConfiguration("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, points):
        """Map (N, 2) or (2,) points; raises BehindPlane when w <= 0."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        h = np.c_[pts, np.ones(len(pts))] @ self.matrix.T
        if np.any(h[:, 2] <= 0):
            raise BehindPlane("point maps past the horizon")
        out = h[:, :2] / h[:, 2:3]
        return out[0] if single else out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class DistortionModel:
    center: tuple = (0.0, 0.0)
    k1: float = 0.0
    k2: float = 0.0
    normalization_radius: float = 1000.0

    def __post_init__(self):
        if not self.normalization_radius > 0:
            raise ValueError("normalization_radius must be positive")


@dataclass(frozen=True)
class Calibration:
    """Image -> ground homography plus the parallax model for raised reference points."""

    homography: Homography
    distortion: DistortionModel = field(default_factory=DistortionModel)
    class_heights: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_HEIGHTS))
    camera_foot: tuple = (0.0, 0.0)
    camera_height: float = 10.0
    image_size: tuple | None = None

    def __post_init__(self):
        missing = [c for c in CLASSES if c not in self.class_heights]
        if missing:
            raise ValueError(f"class_heights missing entries for {missing}")
        if any(self.class_heights[c] < 0 for c in CLASSES):
            raise ValueError("class heights must be >= 0")
        if not self.camera_height > 0:
            raise ValueError("camera_height must be positive")


def _hartley(points):
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if mean_dist <= 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def estimate_homography(correspondences, return_residual=False):
    """Normalized DLT fit of the image -> ground homography.

    ``correspondences`` is a sequence of ``((u, v), (x, y))`` pairs or an
    (N, 4) array ``u v x y``. With ``return_residual`` the RMS forward-mapping
    error in ground units is returned alongside.
    """
    arr = np.asarray(correspondences, dtype=float).reshape(-1, 4)
    if len(arr) < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {len(arr)}")
    src, dst = arr[:, :2], arr[:, 2:]
    t_src, t_dst = _hartley(src), _hartley(dst)
    s = np.c_[src, np.ones(len(src))] @ t_src.T
    d = np.c_[dst, np.ones(len(dst))] @ t_dst.T

    rows = []
    for (x, y, _), (u, v, _) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    # a well-posed system has rank 8: the 8th singular value must be clearly nonzero
    if sv[7] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("DLT system is rank deficient")
    h_norm = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(m[2, 2]) < 1e-15 or abs(np.linalg.det(m / m[2, 2])) <= 1e-12:
        raise DegenerateConfiguration("recovered homography is singular")
    hom = Homography(m)
    if not return_residual:
        return hom
    resid = np.linalg.norm(hom.apply(src) - dst, axis=1)
    return hom, float(np.sqrt(np.mean(resid**2)))


def distort_point(p, d: DistortionModel):
    p = np.asarray(p, dtype=float)
    c = np.asarray(d.center, dtype=float)
    delta = p - c
    r2 = np.sum(delta**2, axis=-1, keepdims=True) / d.normalization_radius**2
    return c + delta * (1.0 + d.k1 * r2 + d.k2 * r2**2)


def undistort_point(p, d: DistortionModel, tol=1e-8, max_iter=100):
    """Invert the radial model by fixed-point iteration on the undistorted radius."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    if d.k1 == 0.0 and d.k2 == 0.0:
        return p.copy()
    c = np.asarray(d.center, dtype=float)
    delta_d = p - c
    und = delta_d.copy()
    for _ in range(max_iter):
        r2 = np.sum(und**2, axis=-1, keepdims=True) / d.normalization_radius**2
        nxt = delta_d / (1.0 + d.k1 * r2 + d.k2 * r2**2)
        if np.max(np.abs(nxt - und)) < tol:
            return c + nxt
        und = nxt
    raise NonConvergent("undistortion did not converge in %d steps" % max_iter)


def box_reference_point(box):
    x1, y1, x2, y2 = box
    return np.array([(x1 + x2) / 2.0, y2], dtype=float)


def _parallax(ground, cls, calib: Calibration):
    ratio = calib.class_heights[cls] / calib.camera_height
    foot = np.asarray(calib.camera_foot, dtype=float)
    return ground + (foot - ground) * ratio


def image_point_to_ground(point, cls, calib: Calibration):
    und = undistort_point(point, calib.distortion)
    g = calib.homography.apply(und)
    return _parallax(g, cls, calib)


def image_to_ground(box, cls, calib: Calibration):
    """Project a bbox's bottom-centre to the ground plane (meters)."""
    out = image_point_to_ground(box_reference_point(box), cls, calib)
    if not np.all(np.isfinite(out)):
        raise BehindPlane("non-finite ground projection")
    return out


def ground_to_image(point, cls, calib: Calibration):
    """Exact inverse of :func:`image_point_to_ground` (distorted pixel coordinates)."""
    p = np.asarray(point, dtype=float)
    ratio = calib.class_heights[cls] / calib.camera_height
    foot = np.asarray(calib.camera_foot, dtype=float)
    g = (p - foot * ratio) / (1.0 - ratio)
    und = calib.homography.inverse().apply(g)
    return distort_point(und, calib.distortion)


def local_scale(point, calib: Calibration, cls="car"):
    """Approximate pixels per meter around a ground point (for sizing boxes)."""
    p = np.asarray(point, dtype=float)
    e = 0.5
    a = ground_to_image(p + [-e, 0.0], cls, calib)
    b = ground_to_image(p + [e, 0.0], cls, calib)
    c = ground_to_image(p + [0.0, -e], cls, calib)
    d = ground_to_image(p + [0.0, e], cls, calib)
    return 0.5 * (np.linalg.norm(b - a) + np.linalg.norm(d - c)) / (2 * e)


# -- calibration file ---------------------------------------------------------

def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def load_calibration(path) -> Calibration:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    with open(path) as fh:
        cp.read_file(fh)
    h = _floats(cp["homography"]["matrix"])
    if len(h) != 9:
        raise ValueError("[homography] matrix needs 9 numbers")
    dist = DistortionModel()
    if cp.has_section("distortion"):
        s = cp["distortion"]
        dist = DistortionModel(
            center=tuple(_floats(s.get("center", "0 0"))),
            k1=float(s.get("k1", 0.0)),
            k2=float(s.get("k2", 0.0)),
            normalization_radius=float(s.get("normalization_radius", 1000.0)),
        )
    foot, height, size = (0.0, 0.0), 10.0, None
    if cp.has_section("camera"):
        s = cp["camera"]
        foot = tuple(_floats(s.get("ground_foot", "0 0")))
        height = float(s.get("height", 10.0))
        if "image_size" in s:
            size = tuple(int(v) for v in _floats(s["image_size"]))
    heights = dict(DEFAULT_CLASS_HEIGHTS)
    if cp.has_section("class_heights"):
        heights.update({k: float(v) for k, v in cp["class_heights"].items()})
    return Calibration(Homography(np.array(h).reshape(3, 3)), dist, heights, foot, height, size)


def _fmt(x):
    return repr(float(x))


def dump_calibration(calib: Calibration) -> str:
    d = calib.distortion
    lines = [
        "[homography]",
        "matrix = " + " ".join(_fmt(v) for v in calib.homography.matrix.ravel()),
        "",
        "[distortion]",
        f"center = {_fmt(d.center[0])} {_fmt(d.center[1])}",
        f"k1 = {_fmt(d.k1)}",
        f"k2 = {_fmt(d.k2)}",
        f"normalization_radius = {_fmt(d.normalization_radius)}",
        "",
        "[camera]",
        f"ground_foot = {_fmt(calib.camera_foot[0])} {_fmt(calib.camera_foot[1])}",
        f"height = {_fmt(calib.camera_height)}",
    ]
    if calib.image_size is not None:
        lines.append(f"image_size = {calib.image_size[0]} {calib.image_size[1]}")
    lines += ["", "[class_heights]"]
    lines += [f"{c} = {_fmt(calib.class_heights[c])}" for c in CLASSES]
    return "\n".join(lines) + "\n"


def save_calibration(calib: Calibration, path):
    Path(path).write_text(dump_calibration(calib))


def load_landmarks(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            vals = _floats(line)
            if len(vals) != 4:
                raise ValueError(f"landmark line needs 4 numbers: {line!r}")
            rows.append(vals)
    return np.asarray(rows, dtype=float).reshape(-1, 4)


# -- pinhole helper used by the synthetic camera ------------------------------

@dataclass(frozen=True)
class PinholeCamera:
    """Ideal camera looking at the ground plane z = 0 from ``position``."""

    position: tuple
    target: tuple
    focal: float = 900.0
    image_size: tuple = (1280, 720)

    def rotation(self):
        eye = np.asarray(self.position, dtype=float)
        fwd = np.asarray(self.target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.vstack([right, down, fwd])

    def intrinsics(self):
        w, h = self.image_size
        return np.array([[self.focal, 0, w / 2.0], [0, self.focal, h / 2.0], [0, 0, 1.0]])

    def project(self, points3d):
        pts = np.atleast_2d(np.asarray(points3d, dtype=float))
        cam = (pts - np.asarray(self.position, dtype=float)) @ self.rotation().T
        pix = cam @ self.intrinsics().T
        return pix[:, :2] / pix[:, 2:3]

    def ground_to_image_matrix(self):
        r = self.rotation()
        t = -r @ np.asarray(self.position, dtype=float)
        return self.intrinsics() @ np.c_[r[:, 0], r[:, 1], t]

    def calibration(self, class_heights=None, distortion=None) -> Calibration:
        g2i = self.ground_to_image_matrix()
        return Calibration(
            homography=Homography(np.linalg.inv(g2i)),
            distortion=distortion or DistortionModel(center=(self.image_size[0] / 2.0, self.image_size[1] / 2.0),
                                                     normalization_radius=float(max(self.image_size))),
            class_heights=dict(class_heights or DEFAULT_CLASS_HEIGHTS),
            camera_foot=(float(self.position[0]), float(self.position[1])),
            camera_height=float(self.position[2]),
            image_size=tuple(self.image_size),
        )
