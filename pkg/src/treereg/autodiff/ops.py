"""Differentiable operations on :class:`Tensor`.

Every function computes its forward value with numpy and records a closure
mapping output gradients to input gradients.  Index arrays use -1 as the
empty marker: it reads as a zero row and its gradient is dropped.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
LN_EPS = 1e-5


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote python scalars to 0-d tensors."""
    if not isinstance(a, Tensor) and np.ndim(a) == 0 and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return _t(a), _t(b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)
    record([a, b], [out], lambda g: (_unbroadcast(g[0], a.shape), _unbroadcast(g[0], b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)
    record([a, b], [out], lambda g: (_unbroadcast(g[0], a.shape), -_unbroadcast(g[0], b.shape)))
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)
    record(
        [a, b],
        [out],
        lambda g: (_unbroadcast(g[0] * b.data, a.shape), _unbroadcast(g[0] * a.data, b.shape)),
    )
    return out


hadamard = mul


def neg(a) -> Tensor:
    a = _t(a)
    out = Tensor(-a.data)
    record([a], [out], lambda g: (-g[0],))
    return out


def exp(a) -> Tensor:
    a = _t(a)
    val = np.exp(a.data)
    out = Tensor(val)
    record([a], [out], lambda g: (g[0] * val,))
    return out


def log(a) -> Tensor:
    a = _t(a)
    out = Tensor(np.log(a.data))
    record([a], [out], lambda g: (g[0] / a.data,))
    return out


def relu(a) -> Tensor:
    a = _t(a)
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, 0))
    record([a], [out], lambda g: (g[0] * pos,))
    return out


# ---------------------------------------------------------------- shape


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    record([a], [out], lambda g: (np.transpose(g[0], inv),))
    return out


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = Tensor(a.data.reshape(shape))
    record([a], [out], lambda g: (g[0].reshape(a.shape),))
    return out


def getitem(a, key) -> Tensor:
    a = _t(a)
    out = Tensor(a.data[key])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g[0])
        return (ga,)

    record([a], [out], bw)
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(x) for x in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    record(ts, [out], lambda g: tuple(np.split(g[0], splits, axis=axis)))
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(x) for x in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis))
    record(ts, [out], lambda g: tuple(np.moveaxis(g[0], axis, 0)))
    return out


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        gg = g[0]
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    record([a], [out], bw)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def sum_squares(a) -> Tensor:
    return sum(mul(a, a))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands or batches over leading axes; 1-D ``b`` is a vector."""
    a, b = _t(a), _t(b)
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        go = g[0]
        if b.ndim == 1:
            ga = np.multiply.outer(go, b.data) if a.ndim == 2 else go[..., None] * b.data
            gb = np.swapaxes(a.data, -1, -2) @ go
            return (ga, _unbroadcast(gb, b.shape))
        ga = _unbroadcast(go @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ go, b.shape) if b.requires_grad else None
        return (ga, gb)

    record([a, b], [out], bw)
    return out


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- normalisation / softmax


def softmax_rows(x, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along the last axis; ``key_mask`` (bool, last axis) excludes columns."""
    x = _t(x)
    z = x.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any():
            raise ValueError("softmax over an all-masked row")
        z = np.where(key_mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        gy = g[0]
        return (y * (gy - (gy * y).sum(axis=-1, keepdims=True)),)

    record([x], [out], bw)
    return out


def batch_norm_1d(x, gamma, beta, row_mask: Optional[np.ndarray] = None, eps: float = BN_EPS) -> Tensor:
    """Normalise each column over the (unmasked) rows, then scale and shift.

    With a single valid row there are no batch statistics and the op reduces
    to the per-feature affine map.  Masked rows come out as zeros.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    n_rows = x.shape[0]
    m = np.ones(n_rows, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    k = int(m.sum())
    mcol = m[:, None].astype(x.dtype)
    if k <= 1:
        y = (x.data * gamma.data + beta.data) * mcol
        out = Tensor(y)
        record(
            [x, gamma, beta],
            [out],
            lambda g: (g[0] * mcol * gamma.data, (g[0] * mcol * x.data).sum(0), (g[0] * mcol).sum(0)),
        )
        return out
    xv = x.data[m]
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv * mcol
    y = (xhat * gamma.data + beta.data) * mcol
    out = Tensor(y)

    def bw(g):
        gy = g[0] * mcol
        dgamma = (gy * xhat).sum(0)
        dbeta = gy.sum(0)
        dxhat = gy * gamma.data
        dx = (inv / k) * (k * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
        return (dx * mcol, dgamma, dbeta)

    record([x, gamma, beta], [out], bw)
    return out


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    c = x.shape[-1]
    mu = x.data.mean(-1, keepdims=True)
    var = x.data.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bw(g):
        gy = g[0]
        axes = tuple(range(gy.ndim - 1))
        dxhat = gy * gamma.data
        dx = (inv / c) * (c * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return (dx, (gy * xhat).sum(axes), gy.sum(axes))

    record([x, gamma, beta], [out], bw)
    return out


# ---------------------------------------------------------------- indexed ops


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Rows of ``x`` picked by ``index`` (any shape); -1 yields a zero row."""
    x = _t(x)
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    if np.any(index >= x.shape[0]) or np.any(index < -1):
        raise IndexError("gather index out of range")
    padded = np.concatenate([x.data, np.zeros((1,) + x.shape[1:], dtype=x.dtype)], axis=0)
    out = Tensor(padded[np.where(valid, index, x.shape[0])])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index[valid], g[0][valid])
        return (gx,)

    record([x], [out], bw)
    return out


def max_pool_grouped(x, groups: np.ndarray, disjoint: bool = False) -> Tensor:
    """Elementwise max over each row of ``groups`` (P, K); -1 entries count as zero rows.

    ``disjoint`` promises every row of ``x`` sits in at most one group.
    """
    x = _t(x)
    groups = np.asarray(groups, dtype=np.int64)
    padded = np.concatenate([x.data, np.zeros((1,) + x.shape[1:], dtype=x.dtype)], axis=0)
    vals = padded[np.where(groups >= 0, groups, x.shape[0])]  # (P, K, C)
    arg = vals.argmax(axis=1)  # (P, C)
    out = Tensor(np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :])

    def bw(g):
        src = np.take_along_axis(groups, arg, axis=1)  # (P, C)
        cols = np.broadcast_to(np.arange(x.shape[1]), src.shape)
        ok = src >= 0
        gx = np.zeros_like(x.data)
        if disjoint:
            gx[src[ok], cols[ok]] = g[0][ok]
        else:
            np.add.at(gx, (src[ok], cols[ok]), g[0][ok])
        return (gx,)

    record([x], [out], bw)
    return out


def mask_rows(x, mask: np.ndarray) -> Tensor:
    """Zero the rows where ``mask`` is False."""
    return mul(x, np.asarray(mask, dtype=_t(x).dtype)[:, None])


def neighborhood_gather(x, window: np.ndarray) -> Tensor:
    """Gather (n, K) windows of rows whose index table is mirror-symmetric.

    Requires ``window[j, K-1-k] == i`` whenever ``window[i, k] == j`` (true for
    same-depth neighbour tables ordered by offset, centre in the middle), so
    the backward pass is a gather with the reversed table instead of a scatter.
    """
    x = _t(x)
    window = np.asarray(window, dtype=np.int64)
    n = x.shape[0]
    fill = np.where(window >= 0, window, n)
    padded = np.concatenate([x.data, np.zeros((1,) + x.shape[1:], dtype=x.dtype)], axis=0)
    out = Tensor(padded[fill])
    rev = fill[:, ::-1]
    taps = np.arange(window.shape[1])[None, :]

    def bw(g):
        gp = np.concatenate([g[0], np.zeros((1,) + g[0].shape[1:], dtype=g[0].dtype)], axis=0)
        return (gp[rev, taps].sum(axis=1),)

    record([x], [out], bw)
    return out
