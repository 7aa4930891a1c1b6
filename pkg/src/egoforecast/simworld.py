"""Synthetic multi-player play with ground-truth joint attention.

Attention moves over the court and players follow it under social forces:
a spring toward their slot around the attention point, soft pairwise
repulsion, and a push away from the court boundary. Everyone looks at the
attention point, up to Gaussian gaze noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import HorizonExceedsData, InvalidConfig
from .formation import FrameState
from .geometry import (
    DEFAULT_CAMERA_HEIGHT,
    Court,
    GridSpec,
    PlayerState,
    cylinders_from_states,
    pose_from_state,
    render_label_image,
)
from .retrieval import Exemplar, ExemplarDatabase, Trajectory

HARD_FLOOR = 0.4
ATTENTION_MODELS = ("waypoint", "piecewise", "static")


@dataclass(frozen=True)
class ScenarioConfig:
    n_players: int = 6
    seconds: float = 60.0
    dt: float = 0.5
    attention_model: str = "waypoint"
    attention_speed: float = 6.0  # upper bound, m/s
    attention_accel: float = 4.0
    segment_seconds: float = 3.0  # piecewise-constant velocity segments
    formation_radius: float = 4.0
    attraction: float = 1.5
    damping: float = 2.5
    repulsion: float = 4.0
    repulsion_distance: float = 0.8
    boundary: float = 4.0
    boundary_margin: float = 1.0
    v_max: float = 7.0
    gaze_noise_deg: float = 0.0
    gaze_noise_per_speed_deg: float = 0.0  # extra std per m/s of player speed
    substeps: int = 10
    court: Court = field(default_factory=Court)
    seed: int = 0

    def validate(self):
        if self.n_players < 1:
            raise InvalidConfig("need at least one player")
        if not self.dt > 0 or not self.seconds >= 0:
            raise InvalidConfig("dt must be positive and duration nonnegative")
        if self.gaze_noise_deg < 0 or self.gaze_noise_per_speed_deg < 0:
            raise InvalidConfig("gaze noise must be nonnegative")
        if self.attention_model not in ATTENTION_MODELS:
            raise InvalidConfig(f"unknown attention model {self.attention_model!r}")
        if not 0 < self.attention_speed <= 6.0 + 1e-12:
            raise InvalidConfig("attention speed must lie in (0, 6] m/s")
        if self.v_max <= 0 or self.substeps < 1:
            raise InvalidConfig("v_max and substeps must be positive")

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.seconds / self.dt + 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class Scenario:
    config: ScenarioConfig
    frames: list
    trajectories: Dict[int, Trajectory]

    @property
    def attention(self) -> np.ndarray:
        return np.array([f.attention for f in self.frames])


class _Attention:
    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        m = 2.0
        self.lo = np.array([m, m])
        self.hi = np.array([cfg.court.width - m, cfg.court.length - m])
        self.pos = rng.uniform(self.lo, self.hi)
        self.vel = np.zeros(2)
        self.target = rng.uniform(self.lo, self.hi)
        self.clock = 0.0
        if cfg.attention_model == "piecewise":
            self._new_segment()

    def _new_segment(self):
        ang = self.rng.uniform(0.0, 2.0 * math.pi)
        speed = self.rng.uniform(0.3, 1.0) * self.cfg.attention_speed
        self.vel = speed * np.array([math.cos(ang), math.sin(ang)])
        self.clock = 0.0

    def advance(self, h: float):
        cfg = self.cfg
        if cfg.attention_model == "static":
            return
        if cfg.attention_model == "piecewise":
            self.clock += h
            if self.clock >= cfg.segment_seconds:
                self._new_segment()
            self.pos = self.pos + h * self.vel
            for k in range(2):
                if self.pos[k] < self.lo[k] or self.pos[k] > self.hi[k]:
                    self.vel[k] = -self.vel[k]
                    self.pos[k] = np.clip(self.pos[k], self.lo[k], self.hi[k])
            return
        # steer toward the current waypoint with bounded speed and acceleration
        d = self.target - self.pos
        dist = float(np.hypot(*d))
        if dist < 1.0:
            self.target = self.rng.uniform(self.lo, self.hi)
            d = self.target - self.pos
            dist = float(np.hypot(*d))
        v_max = cfg.attention_speed
        desired = d / max(dist, 1e-12) * min(v_max, math.sqrt(2.0 * cfg.attention_accel * dist))
        dv = desired - self.vel
        n = float(np.hypot(*dv))
        if n > cfg.attention_accel * h:
            dv *= cfg.attention_accel * h / n
        self.vel = self.vel + dv
        speed = float(np.hypot(*self.vel))
        if speed > v_max:
            self.vel *= v_max / speed
        self.pos = np.clip(self.pos + h * self.vel, self.lo, self.hi)


def _initial_positions(cfg: ScenarioConfig, rng, anchors) -> np.ndarray:
    P = np.empty((cfg.n_players, 2))
    for i in range(cfg.n_players):
        for _ in range(1000):
            p = np.clip(anchors[i] + rng.normal(0.0, 1.0, 2), 0.5, [cfg.court.width - 0.5, cfg.court.length - 0.5])
            if i == 0 or np.min(np.linalg.norm(P[:i] - p, axis=1)) >= cfg.repulsion_distance:
                break
        P[i] = p
    return _enforce_floor(P, P.copy()) if cfg.n_players > 1 else P


def _violations(P: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(P[:, None] - P[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return np.any(d < HARD_FLOOR, axis=1)


def _enforce_floor(P_new: np.ndarray, P_old: np.ndarray) -> np.ndarray:
    """Revert players that break the hard spacing floor until none do."""
    P = P_new.copy()
    reverted = np.zeros(len(P), dtype=bool)
    while True:
        bad = _violations(P) & ~reverted
        if not bad.any():
            return P
        P[bad] = P_old[bad]
        reverted |= bad


def _forces(cfg: ScenarioConfig, P, V, anchors) -> np.ndarray:
    F = cfg.attraction * (anchors - P) - cfg.damping * V
    if len(P) > 1:
        d = P[:, None] - P[None]
        r = np.linalg.norm(d, axis=-1)
        np.fill_diagonal(r, 2.0 * cfg.repulsion_distance)
        push = np.where(r < cfg.repulsion_distance, cfg.repulsion * (cfg.repulsion_distance - r) / np.maximum(r, 1e-9), 0.0)
        F += np.sum(push[..., None] * d, axis=1)
    lo = cfg.boundary_margin - P
    hi = P - (np.array([cfg.court.width, cfg.court.length]) - cfg.boundary_margin)
    F += cfg.boundary * (np.maximum(lo, 0.0) - np.maximum(hi, 0.0))
    return F


def _gazes(cfg: ScenarioConfig, rng, P, s, speeds, previous) -> np.ndarray:
    d = s - P
    dist = np.linalg.norm(d, axis=1)
    ang = np.arctan2(d[:, 1], d[:, 0])
    # a player standing on the attention point keeps its previous gaze
    if previous is not None:
        ang = np.where(dist < 1e-9, np.arctan2(previous[:, 1], previous[:, 0]), ang)
    sigma = np.radians(cfg.gaze_noise_deg + cfg.gaze_noise_per_speed_deg * speeds)
    noise = rng.normal(0.0, 1.0, len(P))
    ang = ang + np.where(sigma > 0, sigma * noise, 0.0)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def generate(config: ScenarioConfig) -> Scenario:
    """Simulate a scenario; bitwise deterministic per seed."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    att = _Attention(cfg, rng)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    k = np.arange(cfg.n_players)
    offsets = cfg.formation_radius * np.stack(
        [np.cos(phase + 2.0 * math.pi * k / cfg.n_players), np.sin(phase + 2.0 * math.pi * k / cfg.n_players)], axis=1
    )
    if cfg.n_players == 1:
        offsets[:] = 0.0
    P = _initial_positions(cfg, rng, att.pos + offsets)
    V = np.zeros_like(P)
    h = cfg.dt / cfg.substeps

    positions, attention = [P.copy()], [att.pos.copy()]
    for _ in range(cfg.n_frames - 1):
        for _ in range(cfg.substeps):
            att.advance(h)
            anchors = att.pos + offsets
            V = V + h * _forces(cfg, P, V, anchors)
            speed = np.linalg.norm(V, axis=1)
            V = V * np.minimum(1.0, cfg.v_max / np.maximum(speed, 1e-12))[:, None]
            P_new = P + h * V
            P_fixed = _enforce_floor(P_new, P)
            V = np.where((P_fixed != P_new).any(axis=1)[:, None], 0.0, V)
            P = P_fixed
        positions.append(P.copy())
        attention.append(att.pos.copy())

    X = np.array(positions)  # (F, n, 2)
    S = np.array(attention)
    Vel = np.zeros_like(X)
    if len(X) > 1:
        Vel[1:] = (X[1:] - X[:-1]) / cfg.dt
        Vel[0] = Vel[1]
    G = np.empty_like(X)
    prev = None
    for f in range(len(X)):
        G[f] = _gazes(cfg, rng, X[f], S[f], np.linalg.norm(Vel[f], axis=1), prev)
        prev = G[f]

    ids = list(range(cfg.n_players))
    frames = [
        FrameState(f * cfg.dt, [PlayerState(X[f, i], G[f, i], Vel[f, i], ids[i]) for i in range(cfg.n_players)], S[f])
        for f in range(len(X))
    ]
    trajectories = {ids[i]: Trajectory(ids[i], 0.0, cfg.dt, X[:, i], G[:, i]) for i in range(cfg.n_players)}
    return Scenario(cfg, frames, trajectories)


def frames_trajectory(frames: Sequence[FrameState], player_id: int, start: int, length: int) -> Trajectory:
    sl = frames[start : start + length]
    dt = frames[1].timestamp - frames[0].timestamp if len(frames) > 1 else 1.0
    P = np.array([f.player(player_id).position for f in sl])
    G = np.array([f.player(player_id).gaze for f in sl])
    return Trajectory(player_id, sl[0].timestamp, dt, P, G)


def label_for(frame: FrameState, player_id: int, camera_height: float = DEFAULT_CAMERA_HEIGHT, grid: GridSpec = GridSpec()):
    ego = frame.player(player_id)
    others = [p for p in frame.players if p.player_id != player_id]
    return render_label_image(pose_from_state(ego, camera_height), cylinders_from_states(others), ego.gaze, grid)


def build_exemplar_db(
    frames: Sequence[FrameState],
    horizon: int,
    camera_height: float = DEFAULT_CAMERA_HEIGHT,
    grid: GridSpec = GridSpec(),
    stride: int = 1,
    players: Optional[Sequence[int]] = None,
) -> ExemplarDatabase:
    """One exemplar per (player, query frame) with its next ``horizon`` steps.

    Each future trajectory holds ``horizon + 1`` samples, the first at the
    query time.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if len(frames) < horizon + 1:
        raise HorizonExceedsData(f"{len(frames)} frames cannot cover a horizon of {horizon} steps")
    out = []
    for t in range(0, len(frames) - horizon, stride):
        frame = frames[t]
        ids = [p.player_id for p in frame.players] if players is None else players
        for pid in ids:
            out.append(
                Exemplar(
                    frame.player(pid),
                    label_for(frame, pid, camera_height, grid),
                    frames_trajectory(frames, pid, t, horizon + 1),
                )
            )
    return ExemplarDatabase(tuple(out), grid)
