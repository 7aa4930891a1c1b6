"""Trajectory retrieval from egocentric label images.

A small convolutional embedding is trained with a contrastive loss on pairs
of label images that share a court neighbourhood and heading. At query time
exemplars passing the same location/orientation gate and lying within the
learned embedding radius contribute their future trajectories.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import nn
from .errors import LengthMismatch, NoPairs, NonFiniteLoss, ShapeMismatch
from .geometry import GridSpec, LabelImage, PlayerState, circular_difference, label_distance

log = logging.getLogger(__name__)

GATE_DISTANCE = 3.0
GATE_ANGLE = math.radians(45.0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Fixed-rate (position, gaze) samples of one player."""

    player_id: int
    start: float
    dt: float
    positions: np.ndarray  # (T, 2)
    gazes: np.ndarray  # (T, 2)

    def __post_init__(self):
        P = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        G = np.asarray(self.gazes, dtype=float).reshape(-1, 2)
        if len(P) < 1 or len(P) != len(G):
            raise ValueError("trajectory needs matching, nonempty position and gaze samples")
        n = np.linalg.norm(G, axis=1)
        if np.any(np.abs(n - 1.0) > 1e-6):
            raise ValueError("gazes must be unit vectors")
        object.__setattr__(self, "positions", P)
        object.__setattr__(self, "gazes", G / n[:, None])
        object.__setattr__(self, "player_id", int(self.player_id))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def times(self) -> np.ndarray:
        return self.start + self.dt * np.arange(len(self))

    def translated(self, offset) -> "Trajectory":
        return replace(self, positions=self.positions + np.asarray(offset, dtype=float))

    def anchored(self, position, player_id: Optional[int] = None, start: Optional[float] = None) -> "Trajectory":
        """Translate so the first sample sits at ``position``."""
        out = self.translated(np.asarray(position, dtype=float) - self.positions[0])
        return replace(
            out,
            player_id=self.player_id if player_id is None else player_id,
            start=self.start if start is None else start,
        )

    def gaze_angles(self) -> np.ndarray:
        return np.arctan2(self.gazes[:, 1], self.gazes[:, 0])


@dataclass(frozen=True, eq=False)
class Exemplar:
    state: PlayerState
    label: LabelImage
    trajectory: Trajectory
    embedding: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ExemplarDatabase:
    exemplars: tuple
    grid: GridSpec = GridSpec()

    def __post_init__(self):
        object.__setattr__(self, "exemplars", tuple(self.exemplars))
        for e in self.exemplars:
            if float(np.linalg.norm(e.trajectory.positions[0] - e.state.position)) > 0.1:
                raise ValueError("exemplar trajectory must start at its query position")

    def __len__(self) -> int:
        return len(self.exemplars)

    def __getitem__(self, i) -> Exemplar:
        return self.exemplars[i]

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.state.position for e in self.exemplars]).reshape(-1, 2)

    @property
    def gaze_angles(self) -> np.ndarray:
        return np.array([e.state.gaze_angle for e in self.exemplars])

    @property
    def embeddings(self) -> Optional[np.ndarray]:
        if not self.exemplars or any(e.embedding is None for e in self.exemplars):
            return None
        return np.stack([e.embedding for e in self.exemplars])


def gate_mask(position, angle: float, positions: np.ndarray, angles: np.ndarray, eps_x=GATE_DISTANCE, eps_g=GATE_ANGLE) -> np.ndarray:
    d = np.linalg.norm(positions - np.asarray(position, dtype=float), axis=1)
    return (d < eps_x) & (circular_difference(angles, angle) < eps_g)


# ---------------------------------------------------------------- pairs


@dataclass(frozen=True, eq=False)
class PairSet:
    i: np.ndarray
    j: np.ndarray
    label: np.ndarray
    eps_m: float = float("nan")

    def __len__(self) -> int:
        return len(self.i)

    def subset(self, idx) -> "PairSet":
        return PairSet(self.i[idx], self.j[idx], self.label[idx], self.eps_m)


def gated_pairs(db: ExemplarDatabase, eps_x=GATE_DISTANCE, eps_g=GATE_ANGLE):
    """All index pairs ``i < j`` passing the location/orientation gate,
    with their label-image distances."""
    P, A = db.positions, db.gaze_angles
    ii, jj, dd = [], [], []
    for i in range(len(db)):
        ok = gate_mask(P[i], A[i], P[i + 1 :], A[i + 1 :], eps_x, eps_g)
        for j in np.flatnonzero(ok) + i + 1:
            ii.append(i)
            jj.append(int(j))
            dd.append(label_distance(db[i].label, db[int(j)].label))
    return np.array(ii, dtype=int), np.array(jj, dtype=int), np.array(dd, dtype=float)


def make_pairs(
    db: ExemplarDatabase,
    eps_m: Optional[float] = None,
    eps_x: float = GATE_DISTANCE,
    eps_g: float = GATE_ANGLE,
    max_pairs: int = 20000,
    seed: int = 0,
    quantile: float = 0.2,
    max_share: float = 0.6,
) -> PairSet:
    """Label gated pairs: positive when their label images differ by less than ``eps_m``.

    ``eps_m`` defaults to the ``quantile`` of gated pair distances. The
    majority class is subsampled so it holds at most ``max_share`` of the
    pairs whenever both classes exist.
    """
    if len(db) < 2:
        raise NoPairs("need at least two exemplars")
    i, j, d = gated_pairs(db, eps_x, eps_g)
    if len(i) == 0:
        raise NoPairs("location/orientation gate admits no pairs")
    if eps_m is None:
        eps_m = float(np.quantile(d, quantile))
        if not np.any(d < eps_m):
            # all the low-quantile pairs are ties at the minimum
            eps_m = float(np.nextafter(eps_m, np.inf))
    label = (d < eps_m).astype(int)

    rng = np.random.default_rng(seed)
    pos, neg = np.flatnonzero(label == 1), np.flatnonzero(label == 0)
    if len(pos) and len(neg) and max_share < 1.0:
        ratio = max_share / (1.0 - max_share)
        cap_neg = int(math.floor(ratio * len(pos)))
        cap_pos = int(math.floor(ratio * len(neg)))
        if len(neg) > cap_neg:
            neg = np.sort(rng.choice(neg, cap_neg, replace=False))
        if len(pos) > cap_pos:
            pos = np.sort(rng.choice(pos, cap_pos, replace=False))
    keep = np.concatenate([pos, neg])
    if len(keep) > max_pairs:
        share = len(pos) / len(keep)
        n_pos = int(round(max_pairs * share))
        pos = np.sort(rng.choice(pos, n_pos, replace=False))
        neg = np.sort(rng.choice(neg, max_pairs - n_pos, replace=False))
        keep = np.concatenate([pos, neg])
    keep = np.sort(keep)
    return PairSet(i[keep], j[keep], label[keep], eps_m)


# ---------------------------------------------------------------- embedding


@dataclass(frozen=True)
class EmbeddingConfig:
    pool: int = 4
    conv1: int = 8
    conv2: int = 16
    dim: int = 32


@dataclass
class EmbeddingParams:
    config: EmbeddingConfig
    grid: GridSpec
    params: dict

    @classmethod
    def create(cls, grid: GridSpec = GridSpec(), config: EmbeddingConfig = EmbeddingConfig(), seed: int = 0):
        shapes = {
            "conv1.w": (2, 2, 3, config.conv1),
            "conv1.b": (config.conv1,),
            "conv2.w": (3, 3, config.conv1, config.conv2),
            "conv2.b": (config.conv2,),
            "fc.w": (config.conv2, config.dim),
            "fc.b": (config.dim,),
        }
        return cls(config, grid, nn.init_params(shapes, np.random.default_rng(seed)))

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(self.config, self.grid, copy.deepcopy(self.params))


def label_input(label: LabelImage) -> np.ndarray:
    """Network encoding of a label image: (s cos hue, s sin hue, v)."""
    h, s, v = label.hsv[..., 0], label.hsv[..., 1], label.hsv[..., 2]
    return np.stack([s * np.cos(h), s * np.sin(h), v], axis=-1)


def _embed_forward(p, x, pool: int):
    x = nn.avg_pool(x, pool) if pool > 1 else x
    a1, c1 = nn.conv2d_forward(x, p["conv1.w"], p["conv1.b"], 2)
    y1 = np.tanh(a1)
    a2, c2 = nn.conv2d_forward(y1, p["conv2.w"], p["conv2.b"], 2)
    y2 = np.tanh(a2)
    pooled = y2.mean(axis=(1, 2))
    out, _ = nn.dense_forward(pooled, p["fc.w"], p["fc.b"])
    return out, (c1, y1, c2, y2, pooled)


def _embed_backward(dout, cache, p, grads):
    c1, y1, c2, y2, pooled = cache
    dpooled, dw, db = nn.dense_backward(dout, pooled, p["fc.w"])
    grads["fc.w"] += dw
    grads["fc.b"] += db
    hw = y2.shape[1] * y2.shape[2]
    da2 = nn.tanh_backward(np.broadcast_to(dpooled[:, None, None, :] / hw, y2.shape), y2)
    dy1, dw2, db2 = nn.conv2d_backward(da2, c2)
    grads["conv2.w"] += dw2
    grads["conv2.b"] += db2
    da1 = nn.tanh_backward(dy1, y1)
    _, dw1, db1 = nn.conv2d_backward(da1, c1, need_dx=False)
    grads["conv1.w"] += dw1
    grads["conv1.b"] += db1


def _check_grid(params: EmbeddingParams, x: np.ndarray):
    if x.shape[-3:-1] != params.grid.shape:
        raise ShapeMismatch(f"label grid {x.shape[-3:-1]} != embedding grid {params.grid.shape}")


def embed_inputs(params: EmbeddingParams, x: np.ndarray) -> np.ndarray:
    """Embeddings of encoded label images (N, rows, cols, 3).

    Inputs go through one at a time: batched matrix products round
    differently, and a query must embed bitwise like its database twin.
    """
    x = np.asarray(x, dtype=float)
    _check_grid(params, x)
    out = [_embed_forward(params.params, x[s : s + 1], params.config.pool)[0] for s in range(len(x))]
    return np.concatenate(out) if out else np.zeros((0, params.config.dim))


def embed(params: EmbeddingParams, label: LabelImage) -> np.ndarray:
    return embed_inputs(params, label_input(label)[None])[0]


def embed_database(db: ExemplarDatabase, params: EmbeddingParams) -> ExemplarDatabase:
    X = np.stack([label_input(e.label) for e in db.exemplars]) if len(db) else np.zeros((0,) + db.grid.shape + (3,))
    E = embed_inputs(params, X)
    return ExemplarDatabase(tuple(replace(e, embedding=E[k]) for k, e in enumerate(db.exemplars)), db.grid)


def contrastive_loss(params: EmbeddingParams, pairs: PairSet, margin: float, inputs: np.ndarray, with_grad: bool = True):
    """sum_pairs l*|dphi|^2 + (1-l)*max(0, m^2 - |dphi|^2).

    ``inputs`` are the encoded label images that pair indices refer to.
    Returns ``(loss, grads)`` (grads is None when ``with_grad`` is False).
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    used, inv = np.unique(np.concatenate([pairs.i, pairs.j]), return_inverse=True)
    x = np.asarray(inputs, dtype=float)[used]
    _check_grid(params, x)
    phi, cache = _embed_forward(params.params, x, params.config.pool)
    a, b = inv[: len(pairs)], inv[len(pairs) :]
    diff = phi[a] - phi[b]
    d2 = np.sum(diff * diff, axis=1)
    l = pairs.label.astype(float)
    hinge = np.maximum(0.0, margin * margin - d2)
    loss = float(np.sum(l * d2 + (1.0 - l) * hinge))
    if not with_grad:
        return loss, None
    # d/d(d2): l - (1-l) * [hinge active]
    coef = l - (1.0 - l) * (margin * margin - d2 > 0)
    ddiff = 2.0 * coef[:, None] * diff
    dphi = np.zeros_like(phi)
    np.add.at(dphi, a, ddiff)
    np.add.at(dphi, b, -ddiff)
    grads = {k: np.zeros_like(v) for k, v in params.params.items()}
    _embed_backward(dphi, cache, params.params, grads)
    return loss, grads


@dataclass
class EmbedTrainConfig:
    epochs: int = 30
    lr: float = 1e-2
    momentum: float = 0.9
    clip: Optional[float] = 5.0
    margin: float = 1.0
    batch_size: int = 64
    holdout: float = 0.25
    eps_m: Optional[float] = None
    eps_x: float = GATE_DISTANCE
    eps_g: float = GATE_ANGLE
    max_pairs: int = 20000
    seed: int = 0


@dataclass
class EmbedTrainResult:
    params: EmbeddingParams
    eps: float
    accuracy: float
    train_accuracy: float
    loss_curve: list
    pairs: PairSet = field(repr=False, default=None)
    holdout_idx: np.ndarray = field(repr=False, default=None)


def pair_distances(E: np.ndarray, pairs: PairSet) -> np.ndarray:
    return np.linalg.norm(E[pairs.i] - E[pairs.j], axis=1)


def best_threshold(dist: np.ndarray, label: np.ndarray):
    """Threshold on embedding distance (positive when ``dist < eps``)
    maximizing accuracy; returns ``(eps, accuracy)``."""
    order = np.argsort(dist, kind="stable")
    d, l = dist[order], label[order].astype(int)
    n = len(d)
    # predicting the first k sorted pairs positive
    cum_pos = np.concatenate([[0], np.cumsum(l)])
    total_neg = n - int(l.sum())
    correct = cum_pos + (total_neg - (np.arange(n + 1) - cum_pos))
    # cut only between distinct distances
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = d[1:] > d[:-1]
    k = int(np.argmax(np.where(valid, correct, -1)))
    if k == 0:
        eps = float(d[0]) if n else 0.0
    elif k == n:
        eps = float(np.nextafter(d[-1], np.inf))
    else:
        eps = float(0.5 * (d[k - 1] + d[k]))
    return eps, float(correct[k]) / max(n, 1)


def train_embedding(db: ExemplarDatabase, config: EmbedTrainConfig = EmbedTrainConfig(), params: Optional[EmbeddingParams] = None) -> EmbedTrainResult:
    """Fit the embedding on gated pairs and pick the decision radius ``eps``
    on a held-out pair split."""
    pairs = make_pairs(db, config.eps_m, config.eps_x, config.eps_g, config.max_pairs, config.seed)
    if len(set(pairs.label.tolist())) < 2:
        raise NoPairs("pair set needs both positive and negative pairs")
    rng = np.random.default_rng(config.seed)
    params = EmbeddingParams.create(db.grid, seed=config.seed) if params is None else params.copy()
    X = np.stack([label_input(e.label) for e in db.exemplars])

    order = rng.permutation(len(pairs))
    n_hold = max(1, int(round(config.holdout * len(pairs))))
    hold_idx, train_idx = np.sort(order[:n_hold]), np.sort(order[n_hold:])
    train_pairs, hold_pairs = pairs.subset(train_idx), pairs.subset(hold_idx)

    opt = nn.MomentumSGD(params.params, config.lr, config.momentum, config.clip)
    curve = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(train_pairs))
        total = 0.0
        for s in range(0, len(perm), config.batch_size):
            batch = train_pairs.subset(perm[s : s + config.batch_size])
            loss, grads = contrastive_loss(params, batch, config.margin, X)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"embedding epoch {epoch}: loss={loss}")
            n = len(batch)
            opt.step(params.params, {k: g / n for k, g in grads.items()})
            total += loss
        curve.append(total / max(len(train_pairs), 1))
        log.debug("embed epoch %d loss %.6f", epoch, curve[-1])

    E = embed_inputs(params, X)
    eps, acc = best_threshold(pair_distances(E, hold_pairs), hold_pairs.label)
    train_acc = float(np.mean((pair_distances(E, train_pairs) < eps) == (train_pairs.label == 1))) if len(train_pairs) else acc
    return EmbedTrainResult(params, eps, acc, train_acc, curve, pairs, hold_idx)


# ---------------------------------------------------------------- retrieval


class Retrieved(NamedTuple):
    index: int
    distance: float
    trajectory: Trajectory


def retrieve(
    query_state: PlayerState,
    query_label: LabelImage,
    db: ExemplarDatabase,
    params: EmbeddingParams,
    eps: float,
    gate=(GATE_DISTANCE, GATE_ANGLE),
    N: int = 10,
    query_time: Optional[float] = None,
) -> list:
    """Future trajectories of gated exemplars within embedding radius ``eps``.

    Sorted by embedding distance (ties by exemplar index), at most ``N``,
    each translated so it starts at the query position.
    """
    if len(db) == 0:
        return []
    ok = gate_mask(query_state.position, query_state.gaze_angle, db.positions, db.gaze_angles, *gate)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return []
    q = embed(params, query_label)
    E = db.embeddings
    cand = E[idx] if E is not None else embed_inputs(params, np.stack([label_input(db[k].label) for k in idx]))
    dist = np.linalg.norm(cand - q, axis=1)
    keep = dist < eps
    idx, dist = idx[keep], dist[keep]
    order = np.lexsort((idx, dist))[:N]
    out = []
    for k in order:
        traj = db[int(idx[k])].trajectory.anchored(query_state.position, query_state.player_id, query_time)
        out.append(Retrieved(int(idx[k]), float(dist[k]), traj))
    return out


# ---------------------------------------------------------------- medoid shift


def trajectory_distances(trajectories: Sequence[Trajectory], gaze_weight: float = 0.5) -> np.ndarray:
    """Mean pointwise position distance plus weighted mean circular gaze difference."""
    if not trajectories:
        return np.zeros((0, 0))
    T, dt = len(trajectories[0]), trajectories[0].dt
    if any(len(t) != T or t.dt != dt for t in trajectories):
        raise LengthMismatch("trajectories differ in length or time step")
    P = np.stack([t.positions for t in trajectories])
    A = np.stack([t.gaze_angles() for t in trajectories])
    dp = np.linalg.norm(P[:, None] - P[None], axis=-1).mean(axis=-1)
    dg = circular_difference(A[:, None], A[None]).mean(axis=-1)
    return dp + gaze_weight * dg


class Clustering(NamedTuple):
    medoids: list  # indices into the input, ascending
    assignment: np.ndarray  # cluster position in ``medoids`` per input
    trajectories: list  # medoid trajectories


def _medoid_shift_pass(D: np.ndarray, sigma: float) -> np.ndarray:
    """Each point's root under one round of medoid shift (pointer following)."""
    W = np.exp(-(D * D) / (2.0 * sigma * sigma))
    # cost[i, j] = sum_k W[i, k] * D[k, j]^2 ; next(i) = argmin_j cost[i, j]
    cost = W @ (D * D)
    nxt = np.argmin(cost, axis=1)  # first index on ties
    n = len(D)
    root = np.empty(n, dtype=int)
    for i in range(n):
        seen = []
        k = i
        while nxt[k] != k and k not in seen:
            seen.append(k)
            k = int(nxt[k])
        if nxt[k] != k:
            # a tie cycle; collapse it onto its smallest member
            cycle = seen[seen.index(k) :]
            k = min(cycle)
        root[i] = k
    return root


def medoidshift_cluster(trajectories: Sequence[Trajectory], sigma: float = 1.5, gaze_weight: float = 0.5) -> Clustering:
    """Medoid-shift clustering with a Gaussian kernel of bandwidth ``sigma``.

    The pass is repeated on the surviving medoids until none moves, so the
    returned medoid set is a fixed point of the procedure.
    """
    if not trajectories:
        raise LengthMismatch("need at least one trajectory")
    D = trajectory_distances(trajectories, gaze_weight)
    n = len(D)
    owner = np.arange(n)
    active = np.arange(n)
    while True:
        root = _medoid_shift_pass(D[np.ix_(active, active)], sigma)
        mapped = active[root]
        remap = dict(zip(active.tolist(), mapped.tolist()))
        owner = np.array([remap[o] for o in owner])
        new_active = np.unique(mapped)
        if len(new_active) == len(active):
            break
        active = new_active
    medoids = sorted(set(owner.tolist()))
    pos = {m: k for k, m in enumerate(medoids)}
    assignment = np.array([pos[o] for o in owner])
    return Clustering(medoids, assignment, [trajectories[m] for m in medoids])
