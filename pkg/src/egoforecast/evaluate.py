"""Error curves over the prediction horizon and the gaze-alignment histogram."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch
from .formation import FrameState
from .geometry import circular_difference
from .retrieval import Trajectory

ENGAGEMENT_DEG = 40.0


def trajectory_error(predicted: Trajectory, truth: Trajectory):
    """Per-step location error (m) and gaze error (degrees, in [0, 180])."""
    if len(predicted) != len(truth) or not math.isclose(predicted.dt, truth.dt, rel_tol=1e-12):
        raise LengthMismatch("trajectories differ in length or time step")
    loc = np.linalg.norm(predicted.positions - truth.positions, axis=1)
    gaze = np.degrees(circular_difference(predicted.gaze_angles(), truth.gaze_angles()))
    return loc, gaze


def attention_error(predicted, truth) -> np.ndarray:
    a = np.asarray(predicted, dtype=float).reshape(-1, 2)
    b = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(a) != len(b):
        raise LengthMismatch(f"sequence lengths {len(a)} and {len(b)} differ")
    return np.linalg.norm(a - b, axis=1)


@dataclass
class ErrorCurves:
    """Per-sample error rows (samples, horizon + 1) with summary curves."""

    dt: float
    location: np.ndarray  # meters
    gaze: np.ndarray  # degrees

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.location.shape[1])

    def median_location(self) -> np.ndarray:
        return np.median(self.location, axis=0)

    def median_gaze(self) -> np.ndarray:
        return np.median(self.gaze, axis=0)

    def mean_location(self) -> np.ndarray:
        return self.location.mean(axis=0)

    def mean_gaze(self) -> np.ndarray:
        return self.gaze.mean(axis=0)


def error_curves(pairs: Sequence, dt: float) -> ErrorCurves:
    """Stack ``trajectory_error`` over (predicted, truth) pairs."""
    if not pairs:
        raise LengthMismatch("no trajectory pairs")
    rows = [trajectory_error(p, t) for p, t in pairs]
    return ErrorCurves(dt, np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]))


@dataclass
class AlignmentHistogram:
    speed_edges: np.ndarray
    angle_edges: np.ndarray  # degrees
    histograms: list  # per speed bin: normalized counts, or None when empty
    counts: np.ndarray
    engaged: list  # per speed bin: fraction under the threshold, or None
    threshold_deg: float


def alignment_histogram(
    frames: Sequence[FrameState],
    speed_edges=(0.0, 0.75, 2.25, 3.75, np.inf),
    angle_bin_deg: float = 10.0,
    threshold_deg: float = ENGAGEMENT_DEG,
) -> AlignmentHistogram:
    """Distribution of the angle between gaze and the direction to the
    attention point, split by player speed.

    Player-frames that stand on the attention point or whose frame carries no
    attention are skipped.
    """
    edges = np.asarray(speed_edges, dtype=float)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("speed bins must be increasing and nonempty")
    if angle_bin_deg <= 0:
        raise ValueError("angle bin width must be positive")
    angles, speeds = [], []
    for f in frames:
        if f.attention is None:
            continue
        for p in f.players:
            d = f.attention - p.position
            if math.hypot(d[0], d[1]) < 1e-9:
                continue
            angles.append(math.degrees(float(circular_difference(math.atan2(d[1], d[0]), p.gaze_angle))))
            speeds.append(math.hypot(p.velocity[0], p.velocity[1]))
    angles, speeds = np.array(angles), np.array(speeds)
    n_ang = int(math.ceil(180.0 / angle_bin_deg))
    angle_edges = np.minimum(np.arange(n_ang + 1) * angle_bin_deg, 180.0)
    which = np.searchsorted(edges, speeds, side="right") - 1 if len(speeds) else np.zeros(0, dtype=int)
    hists, engaged, counts = [], [], []
    for b in range(len(edges) - 1):
        a = angles[which == b] if len(angles) else angles
        counts.append(len(a))
        if len(a) == 0:
            hists.append(None)
            engaged.append(None)
            continue
        idx = np.minimum((a / angle_bin_deg).astype(int), n_ang - 1)
        h = np.bincount(idx, minlength=n_ang).astype(float)
        hists.append(h / h.sum())
        engaged.append(float(np.mean(a < threshold_deg)))
    return AlignmentHistogram(edges, angle_edges, hists, np.array(counts), engaged, threshold_deg)
