"""Social compatibility: how well the players' gazes point at a predicted
joint-attention location."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch

COINCIDENT_TOL = 1e-9


def cosine_terms(s_hat, positions, gazes) -> np.ndarray:
    """Cosine between each gaze and the direction from the player to ``s_hat``.

    Broadcasts over leading axes: ``s_hat`` (..., 2) against positions and
    gazes (..., n, 2). A player standing on the attention point scores 1.
    """
    s = np.asarray(s_hat, dtype=float)[..., None, :]
    d = s - np.asarray(positions, dtype=float)
    dist = np.hypot(d[..., 0], d[..., 1])
    g = np.asarray(gazes, dtype=float)
    dot = d[..., 0] * g[..., 0] + d[..., 1] * g[..., 1]
    coincident = dist < COINCIDENT_TOL
    cos = dot / np.where(coincident, 1.0, dist)
    return np.clip(np.where(coincident, 1.0, cos), -1.0, 1.0)


def compatibility(s_hat, states: Sequence) -> float:
    """Mean gaze alignment of ``(position, gaze)`` pairs toward ``s_hat``, in [-1, 1]."""
    P = np.array([p for p, _ in states], dtype=float).reshape(-1, 2)
    G = np.array([g for _, g in states], dtype=float).reshape(-1, 2)
    return float(np.mean(cosine_terms(s_hat, P, G)))


@dataclass(frozen=True, eq=False)
class GroupTrajectorySet:
    """Per-player trajectories sharing length and time step, in a fixed order."""

    trajectories: tuple

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if trajs:
            T, dt = len(trajs[0]), trajs[0].dt
            if any(len(t) != T or t.dt != dt for t in trajs):
                raise LengthMismatch("trajectories differ in length or time step")
            ids = [t.player_id for t in trajs]
            if len(set(ids)) != len(ids):
                raise ValueError("player ids must be unique")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> int:
        return len(self.trajectories[0]) if self.trajectories else 0

    def positions(self) -> np.ndarray:
        """(T, n, 2)"""
        return np.stack([t.positions for t in self.trajectories], axis=1)

    def gazes(self) -> np.ndarray:
        return np.stack([t.gazes for t in self.trajectories], axis=1)


def integrated_compatibility(attention, group: GroupTrajectorySet) -> float:
    """Mean over players and time of the per-frame gaze alignment."""
    a = np.asarray(attention, dtype=float).reshape(-1, 2)
    if len(a) != group.horizon:
        raise LengthMismatch(f"attention length {len(a)} != trajectory length {group.horizon}")
    return float(np.mean(cosine_terms(a, group.positions(), group.gazes())))
