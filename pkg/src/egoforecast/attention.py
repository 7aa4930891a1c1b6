"""Joint-attention prediction: geometric baselines and a recurrent
formation-conditioned model.

The recurrent model maps the current attention estimate and the formation
of the players to the next attention location::

    s_next = s + head(GRU([cnn(formation), normalize(s)], hidden))

With all parameters at zero the head emits zero and ``step`` is the
identity on ``s``.
"""

from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import DegenerateCollinear, EmptyFrame, NonFiniteLoss, ShapeMismatch
from .formation import (
    DEFAULT_GRID,
    DEFAULT_V_MAX,
    MODEL_CHANNELS,
    FeatureEncoder,
    FormationImage,
    FrameState,
    model_input,
)
from .geometry import Court

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- baselines


def predict_zv(s_now, horizon: int) -> np.ndarray:
    return np.tile(np.asarray(s_now, dtype=float).reshape(1, 2), (horizon, 1))


def predict_lv(s_now, s_velocity, dt: float, horizon: int) -> np.ndarray:
    t = np.arange(1, horizon + 1, dtype=float)[:, None]
    return np.asarray(s_now, dtype=float).reshape(1, 2) + t * dt * np.asarray(s_velocity, dtype=float).reshape(1, 2)


def predict_com(frame: FrameState) -> np.ndarray:
    if not frame.players:
        raise EmptyFrame("frame has no players")
    return frame.positions.mean(axis=0)


def _circle_two(a, b):
    c = (a + b) / 2.0
    return c, float(np.linalg.norm(a - c))


def _circle_three(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        return None
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay) + (cx * cx + cy * cy) * (ay - by)) / d
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx) + (cx * cx + cy * cy) * (bx - ax)) / d
    center = np.array([ux, uy])
    return center, max(float(np.linalg.norm(center - p)) for p in (a, b, c))


def _inside(circle, p, eps=1e-12) -> bool:
    center, radius = circle
    return float(np.linalg.norm(p - center)) <= radius * (1.0 + eps) + eps


def minimum_enclosing_circle(points, seed: int = 0):
    """Welzl-style incremental smallest enclosing circle, ``(center, radius)``."""
    pts = [np.asarray(p, dtype=float) for p in points]
    random.Random(seed).shuffle(pts)
    circle = None
    for i, p in enumerate(pts):
        if circle is not None and _inside(circle, p):
            continue
        circle = (p.copy(), 0.0)
        for j in range(i):
            q = pts[j]
            if _inside(circle, q):
                continue
            circle = _circle_two(p, q)
            for k in range(j):
                r = pts[k]
                if _inside(circle, r):
                    continue
                three = _circle_three(p, q, r)
                if three is not None:
                    circle = three
    return circle


def predict_cc(frame: FrameState) -> np.ndarray:
    """Center of the minimum enclosing circle of the player positions."""
    P = frame.positions
    if len(P) < 2:
        raise DegenerateCollinear("need at least two players")
    d = P - P[0]
    if len(P) > 2:
        cross = d[1:, 0, None] * d[None, 1:, 1] - d[1:, 1, None] * d[None, 1:, 0]
        scale = max(float(np.abs(d).max()), 1.0) ** 2
        if np.all(np.abs(cross) <= 1e-9 * scale):
            raise DegenerateCollinear("player positions are collinear")
    elif np.allclose(P[0], P[1]):
        raise DegenerateCollinear("players coincide")
    return minimum_enclosing_circle(P)[0]


# ---------------------------------------------------------------- recurrent model


@dataclass(frozen=True)
class ModelConfig:
    grid: tuple = DEFAULT_GRID
    factor: int = 5
    channels: int = MODEL_CHANNELS
    conv1: int = 8
    conv2: int = 16
    features: int = 64
    hidden: int = 64
    court: Court = Court()
    v_max: float = DEFAULT_V_MAX
    out_scale: float = 4.0

    @property
    def input_shape(self) -> tuple:
        return (self.grid[0] // self.factor, self.grid[1] // self.factor, self.channels)


def _param_shapes(cfg: ModelConfig) -> dict:
    shapes = {
        "conv1.w": (2, 2, cfg.channels, cfg.conv1),
        "conv2.w": (3, 3, cfg.conv1, cfg.conv2),
        "fc.w": (cfg.conv2, cfg.features),
        "fc.b": (cfg.features,),
    }
    shapes.update(nn.gru_shapes(cfg.features + 2, cfg.hidden))
    shapes["head.w"] = (cfg.hidden, 2)
    shapes["head.b"] = (2,)
    return shapes


@dataclass
class AttentionModel:
    config: ModelConfig
    params: dict

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> "AttentionModel":
        rng = np.random.default_rng(seed)
        params = nn.init_params(_param_shapes(config), rng, scale={"head.w": 0.1})
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig = ModelConfig()) -> "AttentionModel":
        return cls(config, {k: np.zeros(s) for k, s in _param_shapes(config).items()})

    def copy(self) -> "AttentionModel":
        return AttentionModel(self.config, copy.deepcopy(self.params))

    def encoder(self) -> FeatureEncoder:
        c = self.config
        return FeatureEncoder(c.court, c.grid, c.factor, c.v_max)

    def initial_hidden(self, batch: Optional[int] = None) -> np.ndarray:
        if batch is None:
            return np.zeros(self.config.hidden)
        return np.zeros((batch, self.config.hidden))

    def normalize(self, s: np.ndarray) -> np.ndarray:
        c = self.config.court
        return (s - c.center) / np.array([c.width / 2.0, c.length / 2.0])

    def denormalize_grad(self, g: np.ndarray) -> np.ndarray:
        c = self.config.court
        return g / np.array([c.width / 2.0, c.length / 2.0])


def _cnn_forward(p, x: nn.SparseImages):
    """Sparse formations -> features (N, F).

    Convolutions are bias-free, so empty court regions stay exactly zero and
    only occupied neighbourhoods are computed. ``pooled`` sums over space.
    """
    i1, a1, shape1, c1 = nn.sparse_conv_forward(x.index, x.values, x.count, x.shape, p["conv1.w"], 2)
    y1 = np.tanh(a1)
    i2, a2, _, c2 = nn.sparse_conv_forward(i1, y1, x.count, shape1, p["conv2.w"], 2)
    y2 = np.tanh(a2)
    pooled = np.zeros((x.count, y2.shape[1]))
    np.add.at(pooled, i2[:, 0], y2)
    f, _ = nn.dense_forward(pooled, p["fc.w"], p["fc.b"])
    feat = np.tanh(f)
    return feat, (c1, y1, c2, y2, i2[:, 0], pooled, feat)


def _cnn_backward(dfeat, cache, p, grads):
    c1, y1, c2, y2, owner, pooled, feat = cache
    df = nn.tanh_backward(dfeat, feat)
    dpooled, dw, db = nn.dense_backward(df, pooled, p["fc.w"])
    grads["fc.w"] += dw
    grads["fc.b"] += db
    da2 = nn.tanh_backward(dpooled[owner], y2)
    dy1, dw2 = nn.sparse_conv_backward(da2, c2)
    grads["conv2.w"] += dw2
    da1 = nn.tanh_backward(dy1, y1)
    _, dw1 = nn.sparse_conv_backward(da1, c1, need_dx=False)
    grads["conv1.w"] += dw1


def as_sparse(model: AttentionModel, x) -> nn.SparseImages:
    """Coerce a formation image, dense encoding (..., h, w, C) or sparse batch."""
    shape = model.config.input_shape
    if isinstance(x, nn.SparseImages):
        if x.shape + (x.values.shape[1],) != shape:
            raise ShapeMismatch(f"formation input {x.shape} != model grid {shape}")
        return x
    if isinstance(x, FormationImage):
        x = model_input(x)
    x = np.asarray(x, dtype=float)
    if x.shape[-3:] != shape:
        raise ShapeMismatch(f"formation input {x.shape[-3:]} != model grid {shape}")
    return nn.SparseImages.from_dense(x.reshape((-1,) + shape))


def _recurrent_step(model, feat, s, h):
    p = model.params
    u = np.concatenate([feat, model.normalize(s)], axis=-1)
    h_new, gcache = nn.gru_forward(u, h, p)
    delta, _ = nn.dense_forward(h_new, p["head.w"], p["head.b"])
    return s + model.config.out_scale * delta, h_new, gcache


def step(model: AttentionModel, s_hat, phi, hidden=None):
    """One application of the attention dynamics; returns ``(s_next, hidden)``.

    ``phi`` is a formation image already at the model grid (or its encoding).
    """
    x = as_sparse(model, phi)
    if x.count != 1:
        raise ShapeMismatch("step takes a single formation")
    h = model.initial_hidden(1) if hidden is None else np.asarray(hidden, dtype=float).reshape(1, -1)
    feat, _ = _cnn_forward(model.params, x)
    s_next, h_new, _ = _recurrent_step(model, feat, np.asarray(s_hat, dtype=float).reshape(1, 2), h)
    return s_next[0], h_new[0]


def rollout(model: AttentionModel, s0, formations: Sequence, horizon: int) -> np.ndarray:
    """Feed each prediction back as the next input; returns (horizon, 2)."""
    if len(formations) < horizon:
        raise ShapeMismatch("formation sequence shorter than horizon")
    s = np.asarray(s0, dtype=float)
    h = None
    out = []
    for t in range(horizon):
        s, h = step(model, s, formations[t], h)
        out.append(s)
    return np.array(out).reshape(horizon, 2)


def rollout_batch(model: AttentionModel, s0, inputs, steps: Optional[int] = None) -> np.ndarray:
    """Batched rollout from ``s0`` (B, 2).

    ``inputs`` holds B*T formations ordered window-major (dense
    ``(B, T, h, w, C)`` or sparse). Returns (B, T, 2).
    """
    s = np.asarray(s0, dtype=float).reshape(-1, 2)
    B = len(s)
    if not isinstance(inputs, nn.SparseImages):
        inputs = np.asarray(inputs, dtype=float)
        steps = inputs.shape[1]
    x = as_sparse(model, inputs)
    T = x.count // B if steps is None else steps
    if x.count != B * T:
        raise ShapeMismatch("formation count is not batch * steps")
    if T == 0:
        return np.zeros((B, 0, 2))
    feats = _cnn_forward(model.params, x)[0].reshape(B, T, -1)
    h = model.initial_hidden(B)
    out = np.empty((B, T, 2))
    for t in range(T):
        s, h, _ = _recurrent_step(model, feats[:, t], s, h)
        out[:, t] = s
    return out


def sequence_loss(model: AttentionModel, inputs, targets, mix=None, with_grad: bool = False):
    """Attention loss over a batch of windows.

    inputs: B*T formations at steps 0..T-1, window-major (dense
        ``(B, T, h, w, C)`` or sparse).
    targets: (B, T+1, 2) ground-truth attention; ``targets[:, 0]`` seeds the rollout.
    mix: (B, T) teacher-forcing mask; 1 feeds ground truth as the next input,
        0 feeds the model's own prediction. Defaults to full rollout.

    Returns the batch mean of sum_t ||s_t - s_hat_t||^2, and the gradient
    dict when ``with_grad``.
    """
    p = model.params
    targets = np.asarray(targets, dtype=float)
    B, T = targets.shape[0], targets.shape[1] - 1
    x = as_sparse(model, inputs)
    if x.count != B * T:
        raise ShapeMismatch("formation count is not batch * steps")
    mix = np.zeros((B, T)) if mix is None else np.asarray(mix, dtype=float)
    feats, ccache = _cnn_forward(p, x)
    feats = feats.reshape(B, T, -1)
    h = model.initial_hidden(B)
    preds = np.empty((B, T + 1, 2))
    preds[:, 0] = targets[:, 0]
    caches = []
    for t in range(T):
        if t == 0:
            s_in = targets[:, 0]
        else:
            m = mix[:, t : t + 1]
            s_in = m * targets[:, t] + (1.0 - m) * preds[:, t]
        s_next, h, gcache = _recurrent_step(model, feats[:, t], s_in, h)
        preds[:, t + 1] = s_next
        caches.append((gcache, h))
    err = preds[:, 1:] - targets[:, 1:]
    loss = float(np.sum(err * err)) / B
    if not with_grad:
        return loss

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    scale = model.config.out_scale
    F = feats.shape[-1]
    dfeats = np.zeros_like(feats)
    dpred = 2.0 * err / B
    dh = np.zeros((B, model.config.hidden))
    # gradient reaching preds[:, t+1] through the input of step t+1
    dfeedback = np.zeros((B, 2))
    for t in reversed(range(T)):
        gcache, h_t = caches[t]
        ds_next = dpred[:, t] + dfeedback
        grads["head.w"] += h_t.T @ (scale * ds_next)
        grads["head.b"] += scale * ds_next.sum(axis=0)
        du, dh = nn.gru_backward(dh + scale * ds_next @ p["head.w"].T, gcache, p, grads)
        dfeats[:, t] = du[:, :F]
        ds_in = ds_next + model.denormalize_grad(du[:, F:])
        if t > 0:
            dfeedback = (1.0 - mix[:, t : t + 1]) * ds_in
    _cnn_backward(dfeats.reshape(B * T, -1), ccache, p, grads)
    return loss, grads


# ---------------------------------------------------------------- data + training


@dataclass(frozen=True, eq=False)
class AttentionSequence:
    """Ground-truth attention with the formation that produced it.

    ``positions``/``velocities`` are (T+1, n, 2) player states per step; the
    formation image at step t is built from them on demand.
    """

    timestamps: np.ndarray
    attention: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) > 1:
            d = np.diff(ts)
            if np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-9, atol=1e-9):
                raise ValueError("timestamps must be strictly increasing with a uniform step")

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_frames(cls, frames: Sequence[FrameState]) -> "AttentionSequence":
        return cls(
            np.array([f.timestamp for f in frames]),
            np.array([f.attention for f in frames]),
            np.array([f.positions for f in frames]),
            np.array([f.velocities for f in frames]),
        )

    def encode(self, encoder: FeatureEncoder, steps: Optional[int] = None) -> list:
        """Sparse ``(rc, values)`` formation encodings for steps ``0..steps-1``."""
        steps = len(self) - 1 if steps is None else steps
        return [encoder.encode_sparse(self.positions[t], self.velocities[t]) for t in range(steps)]


def windows(frames: Sequence[FrameState], length: int, stride: int = 1) -> list:
    """Split frames into overlapping attention sequences of ``length + 1`` frames."""
    out = []
    for start in range(0, len(frames) - length, stride):
        out.append(AttentionSequence.from_frames(frames[start : start + length + 1]))
    return out


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    clip: Optional[float] = 5.0
    batch_size: int = 16
    teacher_forcing_fraction: float = 0.5
    pretrain_static_epochs: int = 0
    keep_best: bool = True
    seed: int = 0


@dataclass
class TrainResult:
    model: AttentionModel
    loss_curve: list
    initial_loss: float
    final_loss: float
    eval_curve: list = field(default_factory=list)


class _Windows:
    """Pre-encoded training windows; ``batch(idx)`` builds sparse inputs."""

    def __init__(self, dataset, encoder):
        self.steps = min(len(s) for s in dataset) - 1
        self.parts = [s.encode(encoder, self.steps) for s in dataset]
        self.targets = np.stack([s.attention[: self.steps + 1] for s in dataset])
        self.shape = encoder.shape

    def __len__(self) -> int:
        return len(self.parts)

    def batch(self, idx, steps: Optional[int] = None):
        steps = self.steps if steps is None else steps
        parts = [part for i in idx for part in self.parts[i][:steps]]
        x = nn.SparseImages.concat(parts, self.shape, MODEL_CHANNELS)
        return x, self.targets[idx, : steps + 1]


def feed_probability(epoch: int, epochs: int, tf_fraction: float) -> float:
    """Probability of feeding the model's own prediction at a given epoch.

    Zero through the teacher-forced phase, then a linear ramp that reaches
    full rollout on the last epoch.
    """
    start = int(math.ceil(tf_fraction * epochs))
    if epoch < start:
        return 0.0
    span = max(epochs - 1 - start, 0)
    return 1.0 if span == 0 else (epoch - start) / span


def _pretrain_static(model, data: _Windows, cfg: TrainConfig, rng):
    """Fit the convolutional stack by regressing attention from a single
    formation through a throwaway linear head."""
    p = model.params
    F = model.config.features
    head = {"w": np.zeros((F, 2)), "b": np.zeros(2)}
    keys = ("conv1.w", "conv2.w", "fc.w", "fc.b")
    vel = {k: np.zeros_like(p[k]) for k in keys}
    head_vel = {k: np.zeros_like(v) for k, v in head.items()}
    n = len(data)
    for _ in range(cfg.pretrain_static_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, S = data.batch(idx)
            ys = model.normalize(S[:, :-1].reshape(-1, 2))
            feat, cache = _cnn_forward(p, x)
            d = 2.0 * (feat @ head["w"] + head["b"] - ys) / len(ys)
            grads = {k: np.zeros_like(p[k]) for k in keys}
            gh = {"w": feat.T @ d, "b": d.sum(axis=0)}
            _cnn_backward(d @ head["w"].T, cache, p, grads)
            for k, g in grads.items():
                vel[k] = cfg.momentum * vel[k] - cfg.lr * g
                p[k] += vel[k]
            for k, g in gh.items():
                head_vel[k] = cfg.momentum * head_vel[k] - cfg.lr * g
                head[k] += head_vel[k]


def _full_loss(model, data: _Windows, chunk: int = 64) -> float:
    total = 0.0
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        x, S = data.batch(idx)
        total += sequence_loss(model, x, S) * len(idx)
    return total / len(data)


def train(model: AttentionModel, dataset: Sequence[AttentionSequence], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Momentum SGD on the attention loss with scheduled sampling.

    The first ``teacher_forcing_fraction`` of epochs feed ground truth,
    after which the probability of feeding predictions ramps to one.
    ``loss_curve`` holds the mean training loss per epoch; with
    ``keep_best`` the returned model is the snapshot with the lowest
    full-rollout loss, which never exceeds the initial one.
    """
    if not dataset:
        raise ValueError("empty dataset")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    data = _Windows(dataset, model.encoder())
    n, T = len(data), data.steps
    if config.pretrain_static_epochs:
        _pretrain_static(model, data, config, rng)

    opt = nn.MomentumSGD(model.params, config.lr, config.momentum, config.clip)
    initial = _full_loss(model, data)
    best_loss, best_params = initial, copy.deepcopy(model.params)
    curve, evals = [], []
    for epoch in range(config.epochs):
        p_feed = feed_probability(epoch, config.epochs, config.teacher_forcing_fraction)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, S = data.batch(idx)
            mix = (rng.random((len(idx), T)) >= p_feed).astype(float)
            loss, grads = sequence_loss(model, x, S, mix, with_grad=True)
            gnorm = nn.global_norm(grads)
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise NonFiniteLoss(
                    f"epoch {epoch} batch {start // config.batch_size}: loss={loss} grad_norm={gnorm} p_feed={p_feed}"
                )
            opt.step(model.params, grads)
            total += loss * len(idx)
        curve.append(total / n)
        if config.keep_best:
            ev = _full_loss(model, data)
            evals.append(ev)
            if ev < best_loss:
                best_loss, best_params = ev, copy.deepcopy(model.params)
        log.debug("epoch %d loss %.6f p_feed %.2f", epoch, curve[-1], p_feed)
    if config.keep_best:
        model.params = best_params
        final = best_loss
    else:
        final = _full_loss(model, data)
    return TrainResult(model, curve, initial, final, evals)


def rollout_mse(model: AttentionModel, dataset: Sequence[AttentionSequence], horizon: int) -> float:
    """Mean squared rollout error over steps 1..horizon, seeded with the true attention."""
    data = _Windows(dataset, model.encoder())
    x, S = data.batch(np.arange(len(data)), horizon)
    pred = rollout_batch(model, S[:, 0], x, horizon)
    err = pred - S[:, 1 : horizon + 1]
    return float(np.mean(np.sum(err * err, axis=-1)))


def com_mse(dataset: Sequence[AttentionSequence], horizon: int) -> float:
    errs = []
    for seq in dataset:
        com = seq.positions[1 : horizon + 1].mean(axis=1)
        e = com - seq.attention[1 : horizon + 1]
        errs.append(np.sum(e * e, axis=-1))
    return float(np.mean(errs))
