"""Detection-to-trajectory tracking on the ground plane.

Tracks are seeded by a plain IOU tracker. Once a tracklet has ``init_length``
consecutive detections it is confirmed and associated through three passes:
appearance (gated by the Kalman prediction and a cosine threshold), IOU against
the last matched box (gated by a looser appearance threshold), and finally
nearest neighbour on the ground plane.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from vibe import CLASSES, FRAME_RATE
from vibe.errors import OutOfOrderFrames, SingularInnovation
from vibe.geometry import Calibration, image_to_ground

SENTINEL = 1e6
INVALID = 1e5

DEFAULT_FOOTPRINTS = {"car": 1.0, "bus": 1.8, "truck": 1.8, "pedestrian": 0.3, "bicycle": 0.5}
DEFAULT_SPEED_CAPS = {"car": 20.0, "bus": 20.0, "truck": 20.0, "pedestrian": 4.0, "bicycle": 10.0}


@dataclass
class Detection:
    frame: int
    cls: str
    bbox: tuple
    confidence: float = 1.0
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ground: np.ndarray | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"invalid bbox {self.bbox}")
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}")
        self.feature = np.asarray(self.feature, dtype=float)
        if self.feature.size:
            n = np.linalg.norm(self.feature)
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"feature must be unit norm, got |f| = {n}")


@dataclass
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray


@dataclass
class TrackedTrajectory:
    id: int
    cls: str
    samples: np.ndarray  # (N, 3): t, x, y

    @property
    def times(self):
        return self.samples[:, 0]

    @property
    def positions(self):
        return self.samples[:, 1:3]

    def frames(self, frame_rate=FRAME_RATE):
        return np.rint(self.samples[:, 0] * frame_rate).astype(int)


@dataclass
class AssociationConfig:
    init_length: int = 5
    gate_radius: float = 4.0
    appearance_threshold: float = 0.4
    stage2_appearance_threshold: float = 0.7
    iou_threshold: float = 0.3
    nn3d_radius: float = 1.5
    max_misses: int = 15
    frame_rate: float = FRAME_RATE
    feature_window: int = 30
    q_pos: float = 0.01
    q_vel: float = 0.1
    r_meas: float = 0.25
    init_velocity_var: float = 100.0
    speed_caps: dict = field(default_factory=lambda: dict(DEFAULT_SPEED_CAPS))
    footprints: dict = field(default_factory=lambda: dict(DEFAULT_FOOTPRINTS))
    collision_min_frames: int = 3
    post_filter: bool = True

    def __post_init__(self):
        for name in ("gate_radius", "appearance_threshold", "stage2_appearance_threshold",
                     "iou_threshold", "nn3d_radius", "max_misses", "frame_rate", "init_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.appearance_threshold < 2:
            raise ValueError("appearance_threshold must lie in (0, 2)")


# -- primitives ---------------------------------------------------------------

def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def transition(dt):
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    return f


MEASURE = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])


def kalman_predict(s: KalmanState, dt: float, q_pos=0.01, q_vel=0.1) -> KalmanState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    f = transition(dt)
    q = np.diag([q_pos, q_pos, q_vel, q_vel])
    p = f @ s.covariance @ f.T + q
    return KalmanState(f @ s.mean, 0.5 * (p + p.T))


def kalman_update(s: KalmanState, z, r_meas=0.25) -> KalmanState:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("measurement must be finite")
    r = np.eye(2) * r_meas if np.ndim(r_meas) == 0 else np.asarray(r_meas, dtype=float)
    p = s.covariance
    innov_cov = MEASURE @ p @ MEASURE.T + r
    if abs(np.linalg.det(innov_cov)) < 1e-300 or not np.all(np.isfinite(innov_cov)):
        raise SingularInnovation("innovation covariance not invertible")
    gain = np.linalg.solve(innov_cov, MEASURE @ p).T
    mean = s.mean + gain @ (z - MEASURE @ s.mean)
    # Joseph form keeps the covariance symmetric PSD
    ikh = np.eye(4) - gain @ MEASURE
    post = ikh @ p @ ikh.T + gain @ r @ gain.T
    return KalmanState(mean, 0.5 * (post + post.T))


def hungarian(cost):
    """Minimum-cost injective assignment as a list of (row, col) pairs."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def cosine_distance(a, b) -> float:
    return float(1.0 - np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- tracks -------------------------------------------------------------------

TENTATIVE, CONFIRMED, DEAD = "tentative", "confirmed", "dead"


class Track:
    def __init__(self, track_id: int, det: Detection, config: AssociationConfig):
        self.id = track_id
        self.config = config
        self.detections = []  # (frame, bbox, ground, feature)
        self.classes = Counter()
        self.misses = 0
        self.status = TENTATIVE
        cov = np.diag([config.r_meas, config.r_meas, config.init_velocity_var, config.init_velocity_var])
        self.kalman = KalmanState(np.r_[det.ground, 0.0, 0.0], cov)
        self.history = []  # (frame, prior_mean, prior_cov, post_mean, post_cov)
        self._record(det.frame, self.kalman, self.kalman)
        self._add(det)

    @property
    def cls(self):
        return self.classes.most_common(1)[0][0]

    @property
    def last_frame(self):
        return self.detections[-1][0]

    @property
    def last_bbox(self):
        return self.detections[-1][1]

    @property
    def features(self):
        return [d[3] for d in self.detections[-self.config.feature_window:] if d[3].size]

    def _add(self, det):
        self.detections.append((det.frame, tuple(det.bbox), np.asarray(det.ground), det.feature))
        self.classes[det.cls] += 1

    def _record(self, frame, prior, post):
        self.history.append((frame, prior.mean, prior.covariance, post.mean, post.covariance))

    def predict(self, frame):
        dt = (frame - self.history[-1][0]) / self.config.frame_rate
        if dt <= 0:
            raise OutOfOrderFrames(f"track {self.id}: frame {frame} not after {self.history[-1][0]}")
        self.kalman = kalman_predict(self.kalman, dt, self.config.q_pos, self.config.q_vel)
        self._prior = self.kalman
        self._frame = frame

    def update(self, det):
        prior = self.kalman
        self.kalman = kalman_update(prior, det.ground, self.config.r_meas)
        self._record(det.frame, prior, self.kalman)
        self._add(det)
        self.misses = 0
        if self.status == TENTATIVE and len(self.detections) >= self.config.init_length:
            self.status = CONFIRMED

    def mark_missed(self):
        self._record(self._frame, self._prior, self._prior)
        self.misses += 1
        if self.status == TENTATIVE or self.misses > self.config.max_misses:
            self.status = DEAD

    def predicted_position(self):
        return self.kalman.mean[:2]

    def smoothed(self):
        """Rauch-Tung-Striebel smoothed positions up to the last matched frame."""
        hist = [h for h in self.history if h[0] <= self.last_frame]
        n = len(hist)
        means = [h[3] for h in hist]
        covs = [h[4] for h in hist]
        smooth = [None] * n
        smooth[-1] = means[-1]
        for k in range(n - 2, -1, -1):
            dt = (hist[k + 1][0] - hist[k][0]) / self.config.frame_rate
            f = transition(dt)
            prior_cov = hist[k + 1][2]
            gain = covs[k] @ f.T @ np.linalg.inv(prior_cov)
            smooth[k] = means[k] + gain @ (smooth[k + 1] - hist[k + 1][1])
        frames = np.array([h[0] for h in hist])
        return frames, np.array([m[:2] for m in smooth])


def appearance_cost(track: Track, det: Detection) -> float:
    feats = track.features
    if not feats or not det.feature.size:
        return 0.0
    f = np.asarray(feats)
    sims = f @ det.feature / (np.linalg.norm(f, axis=1) * np.linalg.norm(det.feature))
    return float(np.min(1.0 - sims))


def _solve(cost):
    return [(r, c) for r, c in hungarian(cost) if cost[r, c] < INVALID]


def associate_frame(tracks, detections, config: AssociationConfig):
    """Match predicted confirmed tracks to one frame's detections.

    Returns ``(matches, unmatched_tracks, unmatched_detections)`` where matches
    are ``(track_index, detection_index, stage)`` triples and the other two are
    index lists.
    """
    frames = {d.frame for d in detections}
    if len(frames) > 1:
        raise ValueError("detections must share one frame")
    nt, nd = len(tracks), len(detections)
    app = np.zeros((nt, nd))
    for i, t in enumerate(tracks):
        for j, d in enumerate(detections):
            app[i, j] = appearance_cost(t, d)

    matches = []
    # stage 1: appearance, gated by prediction radius and appearance threshold
    if nt and nd:
        cost = app.copy()
        pred = np.array([t.predicted_position() for t in tracks])
        gpos = np.array([d.ground for d in detections])
        dist = np.linalg.norm(pred[:, None, :] - gpos[None, :, :], axis=2)
        cost[(dist > config.gate_radius) | (app > config.appearance_threshold)] = SENTINEL
        matches += [(r, c, 1) for r, c in _solve(cost)]

    rem_t = [i for i in range(nt) if i not in {m[0] for m in matches}]
    rem_d = [j for j in range(nd) if j not in {m[1] for m in matches}]

    # stage 2: IOU against the last successful detection, appearance gated
    if rem_t and rem_d:
        cost = np.empty((len(rem_t), len(rem_d)))
        for a, i in enumerate(rem_t):
            for b, j in enumerate(rem_d):
                ov = iou(tracks[i].last_bbox, detections[j].bbox)
                ok = ov >= config.iou_threshold and app[i, j] <= config.stage2_appearance_threshold
                cost[a, b] = 1.0 - ov if ok else SENTINEL
        stage2 = [(rem_t[a], rem_d[b], 2) for a, b in _solve(cost)]
        matches += stage2
        rem_t = [i for i in rem_t if i not in {m[0] for m in stage2}]
        rem_d = [j for j in rem_d if j not in {m[1] for m in stage2}]

    # stage 3: nearest neighbour on the ground plane
    if rem_t and rem_d:
        pairs = []
        for i in rem_t:
            p = tracks[i].predicted_position()
            for j in rem_d:
                dd = float(np.linalg.norm(p - detections[j].ground))
                if dd <= config.nn3d_radius:
                    pairs.append((dd, i, j))
        used_t, used_d = set(), set()
        for dd, i, j in sorted(pairs):
            if i not in used_t and j not in used_d:
                used_t.add(i)
                used_d.add(j)
                matches.append((i, j, 3))
        rem_t = [i for i in rem_t if i not in used_t]
        rem_d = [j for j in rem_d if j not in used_d]

    return matches, rem_t, rem_d


def _iou_match(tracks, detections, det_idx, threshold):
    if not tracks or not det_idx:
        return [], list(range(len(tracks))), list(det_idx)
    cost = np.empty((len(tracks), len(det_idx)))
    for a, t in enumerate(tracks):
        for b, j in enumerate(det_idx):
            ov = iou(t.last_bbox, detections[j].bbox)
            cost[a, b] = 1.0 - ov if ov >= threshold else SENTINEL
    pairs = _solve(cost)
    matched_t = {a for a, _ in pairs}
    matched_d = {det_idx[b] for _, b in pairs}
    return ([(a, det_idx[b]) for a, b in pairs],
            [a for a in range(len(tracks)) if a not in matched_t],
            [j for j in det_idx if j not in matched_d])


def _group_frames(detections):
    """Yield ``(frame, detections)`` for every frame in range, empty ones included."""
    grouped = {}
    last = None
    for det in detections:
        if last is not None and det.frame < last:
            raise OutOfOrderFrames(f"frame {det.frame} after {last}")
        last = det.frame
        grouped.setdefault(det.frame, []).append(det)
    if not grouped:
        return
    for frame in range(min(grouped), max(grouped) + 1):
        yield frame, grouped.get(frame, [])


def _project(dets, calib):
    for d in dets:
        if d.ground is None:
            d.ground = image_to_ground(d.bbox, d.cls, calib)


def track_stream(detections, calib: Calibration | None, config: AssociationConfig | None = None,
                 mode="full"):
    """Run the tracker over detections sorted by frame.

    ``mode="iou"`` gives the plain IOU baseline: every track associates by box
    overlap only. Detections with a preset ``ground`` skip projection.
    """
    config = config or AssociationConfig()
    alive: list[Track] = []
    finished: list[Track] = []
    next_id = 1
    for frame, dets in _group_frames(detections):
        _project(dets, calib)
        for t in alive:
            t.predict(frame)
        confirmed = [t for t in alive if t.status == CONFIRMED]
        tentative = [t for t in alive if t.status == TENTATIVE]

        if mode == "full":
            matches, un_t, un_d = associate_frame(confirmed, dets, config)
            for i, j, _ in matches:
                confirmed[i].update(dets[j])
            for i in un_t:
                confirmed[i].mark_missed()
        elif mode == "iou":
            pairs, un_t, un_d = _iou_match(confirmed, dets, list(range(len(dets))), config.iou_threshold)
            for a, j in pairs:
                confirmed[a].update(dets[j])
            for a in un_t:
                confirmed[a].mark_missed()
        else:
            raise ValueError(f"unknown tracking mode {mode!r}")

        pairs, un_tent, un_d = _iou_match(tentative, dets, un_d, config.iou_threshold)
        for a, j in pairs:
            tentative[a].update(dets[j])
        for a in un_tent:
            tentative[a].mark_missed()

        for j in un_d:
            alive.append(Track(next_id, dets[j], config))
            next_id += 1

        still = []
        for t in alive:
            (finished if t.status == DEAD else still).append(t)
        alive = still

    trajectories = []
    for t in sorted(finished + alive, key=lambda t: t.id):
        if len(t.detections) < config.init_length:
            continue
        frames, pos = t.smoothed()
        samples = np.c_[frames / config.frame_rate, pos]
        trajectories.append(TrackedTrajectory(t.id, t.cls, samples))
    if config.post_filter:
        trajectories = filter_trajectories(trajectories, config)
    return trajectories


def filter_trajectories(trajectories, config: AssociationConfig):
    """Drop tracks with implausible speeds or that collide with another track."""
    keep = []
    for tr in trajectories:
        if len(tr.samples) > 1:
            speed = np.linalg.norm(np.diff(tr.positions, axis=0), axis=1) / np.diff(tr.times)
            if np.max(speed) > config.speed_caps.get(tr.cls, np.inf):
                continue
        keep.append(tr)
    colliding = set()
    frame_maps = [dict(zip(tr.frames(config.frame_rate), tr.positions)) for tr in keep]
    for a in range(len(keep)):
        for b in range(a + 1, len(keep)):
            common = frame_maps[a].keys() & frame_maps[b].keys()
            if len(common) < config.collision_min_frames:
                continue
            limit = config.footprints.get(keep[a].cls, 1.0) + config.footprints.get(keep[b].cls, 1.0)
            hits = sum(np.linalg.norm(frame_maps[a][f] - frame_maps[b][f]) < limit for f in common)
            if hits >= config.collision_min_frames:
                colliding.update((a, b))
    return [tr for i, tr in enumerate(keep) if i not in colliding]


# -- JSON-lines I/O -----------------------------------------------------------

def detection_to_json(d: Detection) -> str:
    return json.dumps({
        "frame": int(d.frame), "class": d.cls, "bbox": [float(v) for v in d.bbox],
        "confidence": float(d.confidence), "feature": [float(v) for v in d.feature],
    })


def read_detections(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out.append(Detection(o["frame"], o["class"], tuple(o["bbox"]),
                                     o.get("confidence", 1.0), np.asarray(o.get("feature", []))))
    return out


def write_detections(detections, path):
    with open(path, "w") as fh:
        for d in detections:
            fh.write(detection_to_json(d) + "\n")


def trajectory_to_json(tr: TrackedTrajectory) -> str:
    return json.dumps({
        "id": int(tr.id), "class": tr.cls,
        "samples": [{"t": round(float(t), 9), "x": float(x), "y": float(y)} for t, x, y in tr.samples],
    })


def read_trajectories(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                s = np.array([[p["t"], p["x"], p["y"]] for p in o["samples"]], dtype=float).reshape(-1, 3)
                out.append(TrackedTrajectory(o["id"], o["class"], s))
    return out


def write_trajectories(trajectories, path):
    with open(path, "w") as fh:
        for tr in trajectories:
            fh.write(trajectory_to_json(tr) + "\n")
