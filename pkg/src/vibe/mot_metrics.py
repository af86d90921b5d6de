"""Identity-based tracking metrics (IDF1 / IDP / IDR) on ground-plane trajectories."""

from dataclasses import dataclass

import numpy as np

from vibe import FRAME_RATE
from vibe.errors import EmptyTruth
from vibe.tracker import hungarian


@dataclass(frozen=True)
class IdReport:
    NT: int
    IDF1: float
    IDP: float
    IDR: float
    IDTP: int
    IDFP: int
    IDFN: int

    def table(self) -> str:
        head = f"{'NT':>6} {'IDF1':>7} {'IDP':>7} {'IDR':>7}"
        row = f"{self.NT:>6d} {100 * self.IDF1:>6.1f}% {100 * self.IDP:>6.1f}% {100 * self.IDR:>6.1f}%"
        return head + "\n" + row


def _frame_map(traj, frame_rate):
    return dict(zip(traj.frames(frame_rate).tolist(), traj.positions))


def overlap_matrix(truth, computed, match_radius, frame_rate=FRAME_RATE):
    """Frames in which each truth/computed pair lies within ``match_radius``."""
    tmaps = [_frame_map(t, frame_rate) for t in truth]
    cmaps = [_frame_map(c, frame_rate) for c in computed]
    w = np.zeros((len(truth), len(computed)), dtype=np.int64)
    for i, tm in enumerate(tmaps):
        for j, cm in enumerate(cmaps):
            common = sorted(tm.keys() & cm.keys())
            if common:
                a = np.array([tm[f] for f in common])
                b = np.array([cm[f] for f in common])
                w[i, j] = int(np.sum(np.linalg.norm(a - b, axis=1) <= match_radius))
    return w


def id_metrics(truth, computed, match_radius=1.0, frame_rate=FRAME_RATE) -> IdReport:
    if not truth:
        raise EmptyTruth("ground truth set is empty")
    if not match_radius > 0:
        raise ValueError("match_radius must be positive")
    truth_frames = sum(len(t.samples) for t in truth)
    comp_frames = sum(len(c.samples) for c in computed)
    idtp = 0
    if computed:
        w = overlap_matrix(truth, computed, match_radius, frame_rate)
        idtp = int(sum(w[r, c] for r, c in hungarian(-w)))
    idfp = comp_frames - idtp
    idfn = truth_frames - idtp
    denom = 2 * idtp + idfp + idfn
    return IdReport(
        NT=len(computed),
        IDF1=2 * idtp / denom if denom else 0.0,
        IDP=idtp / (idtp + idfp) if idtp + idfp else 0.0,
        IDR=idtp / (idtp + idfn) if idtp + idfn else 0.0,
        IDTP=idtp, IDFP=idfp, IDFN=idfn,
    )
