"""End-to-end prediction: retrieval per player, clustering, trellis search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .attention import AttentionModel, rollout_batch
from .errors import HorizonExceedsData, ParallelGazes
from .evaluate import ErrorCurves, error_curves
from .formation import MODEL_CHANNELS, FrameState
from .geometry import DEFAULT_CAMERA_HEIGHT, triangulate_attention
from .retrieval import (
    GATE_ANGLE,
    GATE_DISTANCE,
    EmbeddingParams,
    ExemplarDatabase,
    Trajectory,
    embed_database,
    medoidshift_cluster,
    retrieve,
)
from .selection import GroupSelection, Trellis, yen_k_best
from .simworld import frames_trajectory, label_for


def observed_attention(frame: FrameState) -> np.ndarray:
    """Ground-truth attention when recorded, else the gaze triangulation."""
    if frame.attention is not None:
        return frame.attention
    try:
        return triangulate_attention(frame.players).point
    except ParallelGazes:
        return frame.positions.mean(axis=0)


@dataclass
class Predictor:
    db: ExemplarDatabase
    embedding: EmbeddingParams
    eps: float
    model: AttentionModel
    N: int = 5
    gate: tuple = (GATE_DISTANCE, GATE_ANGLE)
    sigma: float = 1.5
    camera_height: float = DEFAULT_CAMERA_HEIGHT

    def __post_init__(self):
        if self.db.embeddings is None and len(self.db):
            self.db = embed_database(self.db, self.embedding)

    def candidates(self, frame: FrameState, player_id: int, horizon: int) -> list:
        """Distinct candidate futures for one player, at most ``N``.

        Retrieval falls back to the nearest gated exemplars when none lie
        within ``eps``, and to standing still when the gate admits nothing.
        """
        state = frame.player(player_id)
        label = label_for(frame, player_id, self.camera_height, self.db.grid)
        found = retrieve(state, label, self.db, self.embedding, self.eps, self.gate, self.N, frame.timestamp)
        if not found:
            found = retrieve(state, label, self.db, self.embedding, math.inf, self.gate, self.N, frame.timestamp)
        trajs = [r.trajectory for r in found]
        if any(len(t) < horizon + 1 for t in trajs):
            raise HorizonExceedsData(f"exemplar futures are shorter than {horizon} steps")
        trajs = [_truncate(t, horizon + 1) for t in trajs]
        if not trajs:
            dt = self.db[0].trajectory.dt if len(self.db) else 1.0
            P = np.repeat(state.position[None], horizon + 1, axis=0)
            G = np.repeat(state.gaze[None], horizon + 1, axis=0)
            return [Trajectory(player_id, frame.timestamp, dt, P, G)]
        clusters = medoidshift_cluster(trajs, self.sigma)
        sizes = np.bincount(clusters.assignment, minlength=len(clusters.medoids))
        # larger clusters first, then retrieval rank
        order = sorted(range(len(clusters.medoids)), key=lambda c: (-sizes[c], clusters.medoids[c]))
        return [trajs[clusters.medoids[c]] for c in order]

    def predict_group(self, frame: FrameState, K: int, horizon: int, players: Optional[Sequence[int]] = None):
        """K best joint futures for the players of ``frame``; returns ``(trellis, selections)``."""
        ids = sorted(p.player_id for p in frame.players) if players is None else list(players)
        cands = {pid: self.candidates(frame, pid, horizon) for pid in ids}
        trellis = Trellis.from_candidates(cands, observed_attention(frame), order=ids)
        return trellis, yen_k_best(trellis, self.model, K, horizon)

    def predict_missing(self, frames: Sequence[FrameState], t: int, player_id: int, K: int, horizon: int):
        """Predict one player's future with every other player's true future as context."""
        if t + horizon >= len(frames):
            raise HorizonExceedsData("not enough frames after the query time")
        frame = frames[t]
        others = [p.player_id for p in frame.players if p.player_id != player_id]
        context = [frames_trajectory(frames, pid, t, horizon + 1) for pid in others]
        trellis = Trellis((self.candidates(frame, player_id, horizon),), (player_id,), observed_attention(frame), tuple(context))
        return trellis, yen_k_best(trellis, self.model, K, horizon)


def _truncate(t: Trajectory, length: int) -> Trajectory:
    return Trajectory(t.player_id, t.start, t.dt, t.positions[:length], t.gazes[:length])


def predict_attention(model: AttentionModel, frames: Sequence[FrameState], t: int, horizon: int) -> np.ndarray:
    """Roll the model over the observed formations; (horizon + 1, 2) from the query time."""
    if horizon < 1 or t + horizon > len(frames):
        raise HorizonExceedsData("not enough frames after the query time")
    enc = model.encoder()
    parts = [enc.encode_sparse(frames[t + k].positions, frames[t + k].velocities) for k in range(horizon)]
    x = nn.SparseImages.concat(parts, enc.shape, MODEL_CHANNELS)
    s0 = observed_attention(frames[t])
    return np.vstack([s0[None], rollout_batch(model, s0[None], x, horizon)[0]])


def selection_trajectories(trellis: Trellis, selection: GroupSelection) -> list:
    return [trellis.slices[k][j] for k, j in enumerate(selection.indices)]


def evaluation(pred: Predictor, frames: Sequence[FrameState], mode: str, horizon: int, queries, K: int = 1) -> ErrorCurves:
    """Top-1 error curves over the horizon at the given query frame indices.

    ``mode`` is ``"group"`` (all players jointly) or ``"missing-player"``
    (each player in turn, the others' true futures as context).
    """
    pairs = []
    for t in queries:
        if mode == "group":
            trellis, sels = pred.predict_group(frames[t], K, horizon)
            for traj in selection_trajectories(trellis, sels[0]):
                pairs.append((traj, frames_trajectory(frames, traj.player_id, t, horizon + 1)))
        elif mode == "missing-player":
            for p in frames[t].players:
                trellis, sels = pred.predict_missing(frames, t, p.player_id, K, horizon)
                traj = selection_trajectories(trellis, sels[0])[0]
                pairs.append((traj, frames_trajectory(frames, p.player_id, t, horizon + 1)))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    dt = frames[1].timestamp - frames[0].timestamp
    return error_curves(pairs, dt)
