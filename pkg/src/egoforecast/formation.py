"""Social formation feature image over a discretized court."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NonDivisibleFactor
from .geometry import Court, PlayerState, wrap_angle

DEFAULT_GRID = (210, 410)
DEFAULT_V_MAX = 9.0
OCCUPIED_VALUE = 0.9
MODEL_CHANNELS = 5


@dataclass(frozen=True, eq=False)
class FrameState:
    timestamp: float
    players: list
    attention: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = [p.player_id for p in self.players]
        if len(set(ids)) != len(ids):
            raise ValueError("player ids must be unique within a frame")
        if self.attention is not None:
            object.__setattr__(self, "attention", np.asarray(self.attention, dtype=float).reshape(2))

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.players]).reshape(-1, 2)

    @property
    def velocities(self) -> np.ndarray:
        return np.array([p.velocity for p in self.players]).reshape(-1, 2)

    def player(self, player_id: int) -> PlayerState:
        for p in self.players:
            if p.player_id == player_id:
                return p
        raise KeyError(player_id)


@dataclass(frozen=True, eq=False)
class FormationImage:
    """Occupancy and mean velocity per court cell.

    Rows run along the court width (x), columns along its length (y).
    ``velocity`` holds the cell mean velocity; the HSV-style payload is
    derived from it.
    """

    occupied: np.ndarray  # (rows, cols) bool
    velocity: np.ndarray  # (rows, cols, 2), zero where empty
    court: Court = field(default_factory=Court)
    v_max: float = DEFAULT_V_MAX

    @property
    def shape(self) -> tuple:
        return self.occupied.shape

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.velocity[..., 0], self.velocity[..., 1])

    @property
    def angle(self) -> np.ndarray:
        # zero mean velocity maps to angle 0
        a = wrap_angle(np.arctan2(self.velocity[..., 1], self.velocity[..., 0]))
        return np.where(self.speed > 0, a, 0.0)

    @property
    def speed_normalized(self) -> np.ndarray:
        return np.clip(self.speed / self.v_max, 0.0, 1.0)

    def hsv(self, normalized: bool = False) -> np.ndarray:
        """(angle, speed, 0.9) for occupied cells and zeros elsewhere."""
        out = np.zeros(self.shape + (3,))
        occ = self.occupied
        out[..., 0] = np.where(occ, self.angle, 0.0)
        out[..., 1] = np.where(occ, self.speed_normalized if normalized else self.speed, 0.0)
        out[..., 2] = np.where(occ, OCCUPIED_VALUE, 0.0)
        return out


def cell_index(positions, court: Court, grid) -> tuple:
    """Court cell of each position; out-of-court positions clamp to the boundary cell."""
    rows, cols = grid
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    i = np.clip(np.floor(p[:, 0] / court.width * rows).astype(int), 0, rows - 1)
    j = np.clip(np.floor(p[:, 1] / court.length * cols).astype(int), 0, cols - 1)
    return i, j


def formation_from_arrays(positions, velocities, court: Court = Court(), grid=DEFAULT_GRID, v_max: float = DEFAULT_V_MAX) -> FormationImage:
    rows, cols = grid
    i, j = cell_index(positions, court, grid)
    v = np.asarray(velocities, dtype=float).reshape(-1, 2)
    sums = np.zeros((rows, cols, 2))
    counts = np.zeros((rows, cols))
    np.add.at(sums, (i, j), v)
    np.add.at(counts, (i, j), 1.0)
    occupied = counts > 0
    mean = np.zeros_like(sums)
    mean[occupied] = sums[occupied] / counts[occupied][:, None]
    return FormationImage(occupied, mean, court, v_max)


def formation_image(frame: FrameState, court: Court = Court(), grid=DEFAULT_GRID, v_max: float = DEFAULT_V_MAX) -> FormationImage:
    return formation_from_arrays(frame.positions, frame.velocities, court, grid, v_max)


def downsample(phi: FormationImage, factor: int) -> FormationImage:
    """Block mean of cell velocities over occupied cells only."""
    rows, cols = phi.shape
    if factor < 1 or rows % factor or cols % factor:
        raise NonDivisibleFactor(f"factor {factor} does not divide grid {rows}x{cols}")
    br, bc = rows // factor, cols // factor
    occ = phi.occupied.reshape(br, factor, bc, factor).sum(axis=(1, 3))
    vel = (phi.velocity * phi.occupied[..., None]).reshape(br, factor, bc, factor, 2).sum(axis=(1, 3))
    occupied = occ > 0
    mean = np.zeros_like(vel)
    mean[occupied] = vel[occupied] / occ[occupied][:, None]
    return FormationImage(occupied, mean, phi.court, phi.v_max)


def model_input(phi: FormationImage) -> np.ndarray:
    """Network encoding of a formation image, shape (rows, cols, 5).

    Channels: occupancy value, normalized mean velocity (x, y) and the cell
    center coordinates normalized to [-1, 1], all zero on empty cells.
    """
    rows, cols = phi.shape
    occ = phi.occupied.astype(float)
    out = np.zeros((rows, cols, MODEL_CHANNELS))
    out[..., 0] = OCCUPIED_VALUE * occ
    out[..., 1] = phi.velocity[..., 0] / phi.v_max * occ
    out[..., 2] = phi.velocity[..., 1] / phi.v_max * occ
    ci = (np.arange(rows) + 0.5) / rows * 2.0 - 1.0
    cj = (np.arange(cols) + 0.5) / cols * 2.0 - 1.0
    out[..., 3] = ci[:, None] * occ
    out[..., 4] = cj[None, :] * occ
    return out


class FeatureEncoder:
    """Sparse shortcut for ``model_input(downsample(formation_from_arrays(...), factor))``.

    Only occupied cells are touched, which keeps per-candidate scoring cheap
    during trajectory selection.
    """

    def __init__(self, court: Court = Court(), grid=DEFAULT_GRID, factor: int = 5, v_max: float = DEFAULT_V_MAX):
        rows, cols = grid
        if rows % factor or cols % factor:
            raise NonDivisibleFactor(f"factor {factor} does not divide grid {rows}x{cols}")
        self.court = court
        self.grid = tuple(grid)
        self.factor = factor
        self.v_max = v_max
        self.shape = (rows // factor, cols // factor)

    def encode_sparse(self, positions, velocities):
        """Occupied model-grid cells as ``(rc (m, 2) int, values (m, 5))``."""
        i, j = cell_index(positions, self.court, self.grid)
        v = np.asarray(velocities, dtype=float).reshape(-1, 2)
        fine = {}
        for k in range(len(i)):
            acc = fine.setdefault((int(i[k]), int(j[k])), [0.0, 0.0, 0])
            acc[0] += v[k, 0]
            acc[1] += v[k, 1]
            acc[2] += 1
        blocks = {}
        for (a, b), (sx, sy, n) in sorted(fine.items()):
            acc = blocks.setdefault((a // self.factor, b // self.factor), [0.0, 0.0, 0])
            acc[0] += sx / n
            acc[1] += sy / n
            acc[2] += 1
        br, bc = self.shape
        keys = sorted(blocks)
        rc = np.array(keys, dtype=np.int64).reshape(-1, 2)
        values = np.zeros((len(keys), MODEL_CHANNELS))
        for m, (a, b) in enumerate(keys):
            sx, sy, n = blocks[(a, b)]
            values[m] = (
                OCCUPIED_VALUE,
                sx / n / self.v_max,
                sy / n / self.v_max,
                (a + 0.5) / br * 2.0 - 1.0,
                (b + 0.5) / bc * 2.0 - 1.0,
            )
        return rc, values

    def encode(self, positions, velocities) -> np.ndarray:
        rc, values = self.encode_sparse(positions, velocities)
        out = np.zeros(self.shape + (MODEL_CHANNELS,))
        out[rc[:, 0], rc[:, 1]] = values
        return out

    def encode_frame(self, frame: FrameState) -> np.ndarray:
        return self.encode(frame.positions, frame.velocities)


def trajectory_velocities(positions: np.ndarray, dt: float) -> np.ndarray:
    """Finite-difference velocities along sampled paths ``(..., T, 2)``.

    Backward differences, with a forward difference at the first sample.
    """
    p = np.asarray(positions, dtype=float)
    v = np.zeros_like(p)
    if p.shape[-2] > 1:
        v[..., 1:, :] = (p[..., 1:, :] - p[..., :-1, :]) / dt
        v[..., 0, :] = v[..., 1, :]
    return v
