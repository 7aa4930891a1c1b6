"""Minimal numpy layers with hand-written backward passes.

Arrays are float64 and batch-first; images are ``(B, H, W, C)``. Every
``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def conv2d_forward(x, w, b, stride, sparse: bool = False):
    """Strided valid convolution via im2col.

    With ``sparse`` only windows touching a nonzero input pixel are
    multiplied; the rest get the bias alone. Worth it for mostly-empty
    court grids.
    """
    B, H, W, C = x.shape
    k, _, _, O = w.shape
    oh, ow = conv_out(H, k, stride), conv_out(W, k, stride)
    sl = (slice(None), slice(0, (oh - 1) * stride + 1, stride), slice(0, (ow - 1) * stride + 1, stride))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[sl]
    wmat = w.reshape(k * k * C, O)
    if sparse:
        active = sliding_window_view((x != 0).any(axis=-1), (k, k), axis=(1, 2))[sl].any(axis=(-1, -2))
        rows = np.flatnonzero(active)
        bi, ii, jj = np.unravel_index(rows, (B, oh, ow))
        # (n, C, k, k) -> (n, k*k*C) in (ki, kj, c) order
        cols = win[bi, ii, jj].transpose(0, 2, 3, 1).reshape(len(rows), k * k * C)
        out = np.empty((B * oh * ow, O))
        out[:] = b
        out[rows] = cols @ wmat + b
    else:
        rows = None
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * oh * ow, k * k * C)
        out = cols @ wmat + b
    return out.reshape(B, oh, ow, O), (x.shape, cols, rows, w, stride)


def conv2d_backward(dout, cache, need_dx: bool = True):
    xshape, cols, rows, w, stride = cache
    B, H, W, C = xshape
    k, _, _, O = w.shape
    _, oh, ow, _ = dout.shape
    d = dout.reshape(-1, O)
    dw = (cols.T @ (d if rows is None else d[rows])).reshape(w.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d @ w.reshape(k * k * C, O).T).reshape(B, oh, ow, k, k, C)
    dx = np.zeros(xshape)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


def dense_forward(x, w, b):
    return x @ w + b, x


def dense_backward(dout, x, w):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def avg_pool(x, f: int):
    """Non-overlapping mean pooling by ``f`` (crops the remainder)."""
    B, H, W, C = x.shape
    h, w = H // f, W // f
    return x[:, : h * f, : w * f].reshape(B, h, f, w, f, C).mean(axis=(2, 4))


def gru_forward(x, h, p, prefix="gru"):
    """Gated recurrent update with update gate ``z`` and reset gate ``r``.

    h' = (1 - z) * n + z * h,  n = tanh(W_n x + U_n (r * h) + b_n)
    """
    Wz, Uz, bz = p[f"{prefix}.Wz"], p[f"{prefix}.Uz"], p[f"{prefix}.bz"]
    Wr, Ur, br = p[f"{prefix}.Wr"], p[f"{prefix}.Ur"], p[f"{prefix}.br"]
    Wn, Un, bn = p[f"{prefix}.Wn"], p[f"{prefix}.Un"], p[f"{prefix}.bn"]
    z = sigmoid(x @ Wz + h @ Uz + bz)
    r = sigmoid(x @ Wr + h @ Ur + br)
    rh = r * h
    n = np.tanh(x @ Wn + rh @ Un + bn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n)


def gru_backward(dh_new, cache, p, grads, prefix="gru"):
    """Accumulate parameter gradients into ``grads``; return (dx, dh)."""
    x, h, z, r, rh, n = cache
    Uz, Ur, Un = p[f"{prefix}.Uz"], p[f"{prefix}.Ur"], p[f"{prefix}.Un"]
    Wz, Wr, Wn = p[f"{prefix}.Wz"], p[f"{prefix}.Wr"], p[f"{prefix}.Wn"]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    grads[f"{prefix}.Wn"] += x.T @ dan
    grads[f"{prefix}.Un"] += rh.T @ dan
    grads[f"{prefix}.bn"] += dan.sum(axis=0)
    drh = dan @ Un.T
    dr = drh * h
    dh += drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    grads[f"{prefix}.Wz"] += x.T @ daz
    grads[f"{prefix}.Uz"] += h.T @ daz
    grads[f"{prefix}.bz"] += daz.sum(axis=0)
    grads[f"{prefix}.Wr"] += x.T @ dar
    grads[f"{prefix}.Ur"] += h.T @ dar
    grads[f"{prefix}.br"] += dar.sum(axis=0)
    dx = dan @ Wn.T + daz @ Wz.T + dar @ Wr.T
    dh += daz @ Uz.T + dar @ Ur.T
    return dx, dh


def gru_shapes(n_in: int, n_hidden: int, prefix="gru") -> dict:
    shapes = {}
    for g in "zrn":
        shapes[f"{prefix}.W{g}"] = (n_in, n_hidden)
        shapes[f"{prefix}.U{g}"] = (n_hidden, n_hidden)
        shapes[f"{prefix}.b{g}"] = (n_hidden,)
    return shapes


def init_params(shapes: dict, rng: np.random.Generator, zero=(), scale: dict | None = None) -> dict:
    """Glorot-uniform weights, zero biases; names in ``zero`` start at zero."""
    scale = scale or {}
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 1 or name in zero:
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        fan_out = shape[-1] if len(shape) == 2 else shape[-1] * shape[0] * shape[1]
        limit = np.sqrt(6.0 / (fan_in + fan_out)) * scale.get(name, 1.0)
        params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class MomentumSGD:
    """Heavy-ball SGD with global gradient-norm clipping."""

    def __init__(self, params: dict, lr: float = 1e-3, momentum: float = 0.9, clip: float | None = 5.0):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> float:
        norm = global_norm(grads)
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / norm
        if self.lr == 0.0:
            return norm
        for k in params:
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * factor * grads[k]
            params[k] += v
        return norm


def finite_difference(loss_fn, params: dict, coords, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn(params)`` at ``(name, flat_index)`` coordinates."""
    out = np.empty(len(coords))
    for n, (name, idx) in enumerate(coords):
        arr = params[name].reshape(-1)
        old = arr[idx]
        arr[idx] = old + step
        fp = loss_fn(params)
        arr[idx] = old - step
        fm = loss_fn(params)
        arr[idx] = old
        out[n] = (fp - fm) / (2.0 * step)
    return out


def sample_coords(params: dict, count: int, rng: np.random.Generator) -> list:
    """Random ``(name, flat_index)`` coordinates, spread over all tensors."""
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    flat = rng.choice(int(sizes.sum()), size=min(count, int(sizes.sum())), replace=False)
    edges = np.cumsum(sizes)
    coords = []
    for f in sorted(flat):
        t = int(np.searchsorted(edges, f, side="right"))
        start = 0 if t == 0 else int(edges[t - 1])
        coords.append((names[t], int(f - start)))
    return coords


# ---------------------------------------------------------------- sparse images


class SparseImages:
    """A batch of mostly-empty images stored as nonzero pixels.

    ``index`` is (M, 3) ``(image, row, col)``, ``values`` is (M, C).
    """

    def __init__(self, index, values, count: int, shape):
        self.index = np.asarray(index, dtype=np.int64).reshape(-1, 3)
        self.values = np.asarray(values, dtype=float).reshape(len(self.index), -1)
        self.count = int(count)
        self.shape = tuple(shape)

    @classmethod
    def from_dense(cls, x) -> "SparseImages":
        x = np.asarray(x, dtype=float)
        n, i, j = np.nonzero((x != 0).any(axis=-1))
        return cls(np.stack([n, i, j], axis=1), x[n, i, j], x.shape[0], x.shape[1:3])

    @classmethod
    def concat(cls, parts, shape, channels: int) -> "SparseImages":
        """Stack per-image ``(rc, values)`` pairs into one batch."""
        idx, vals = [], []
        for n, (rc, v) in enumerate(parts):
            if len(rc):
                idx.append(np.column_stack([np.full(len(rc), n), rc]))
                vals.append(v)
        if not idx:
            return cls(np.zeros((0, 3)), np.zeros((0, channels)), len(parts), shape)
        return cls(np.concatenate(idx), np.concatenate(vals), len(parts), shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.count,) + self.shape + (self.values.shape[1],))
        out[self.index[:, 0], self.index[:, 1], self.index[:, 2]] = self.values
        return out


def sparse_conv_forward(index, feats, count, shape, w, stride):
    """Bias-free valid convolution on sparse pixels.

    Equal to ``conv2d_forward`` with zero bias restricted to the outputs whose
    receptive field holds at least one nonzero pixel; every other output is
    exactly zero. Returns ``(out_index, out_values, out_shape, cache)``.
    """
    k = w.shape[0]
    oh, ow = conv_out(shape[0], k, stride), conv_out(shape[1], k, stride)
    src, key, kern = [], [], []
    n, r, c = index[:, 0], index[:, 1], index[:, 2]
    for di in range(k):
        oi, ri = np.divmod(r - di, stride)
        okr = (r - di >= 0) & (ri == 0) & (oi < oh)
        for dj in range(k):
            oj, rj = np.divmod(c - dj, stride)
            ok = okr & (c - dj >= 0) & (rj == 0) & (oj < ow)
            m = np.flatnonzero(ok)
            src.append(m)
            key.append((n[m] * oh + oi[m]) * ow + oj[m])
            kern.append(np.full(len(m), di * k + dj))
    src = np.concatenate(src)
    key = np.concatenate(key)
    kern = np.concatenate(kern)
    uniq, inv = np.unique(key, return_inverse=True)
    O = w.shape[-1]
    wk = w.reshape(k * k, w.shape[2], O)
    out = np.zeros((len(uniq), O))
    groups = []
    for g in range(k * k):
        sel = np.flatnonzero(kern == g)
        if len(sel):
            np.add.at(out, inv[sel], feats[src[sel]] @ wk[g])
            groups.append((g, src[sel], inv[sel]))
    on, rest = np.divmod(uniq, oh * ow)
    oi, oj = np.divmod(rest, ow)
    out_index = np.stack([on, oi, oj], axis=1)
    return out_index, out, (oh, ow), (feats, groups, wk, w.shape)


def sparse_conv_backward(dout, cache, need_dx: bool = True):
    feats, groups, wk, wshape = cache
    dwk = np.zeros_like(wk)
    dx = np.zeros_like(feats) if need_dx else None
    for g, src, inv in groups:
        d = dout[inv]
        dwk[g] = feats[src].T @ d
        if need_dx:
            np.add.at(dx, src, d @ wk[g].T)
    return dx, dwk.reshape(wshape)
