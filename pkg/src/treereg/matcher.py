"""Contextual attention, soft correspondence scores and the differentiable SVD head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops, svd3
from .config import TransformerConfig
from .encoder import FeatureMap
from .rigid import RankDeficientError

RANK_TOL = 1e-10


# ---------------------------------------------------------------- parameters


def _attn_params(params: dict, p: str, dim: int, rng: np.random.Generator) -> None:
    for name in ("q", "k", "v", "o"):
        params[f"{p}.{name}"] = rng.normal(0.0, np.sqrt(1.0 / dim), (dim, dim))
    params[f"{p}.ln.gamma"] = np.ones(dim)
    params[f"{p}.ln.beta"] = np.zeros(dim)


def _ff_params(params: dict, p: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    params[f"{p}.w1"] = rng.normal(0.0, np.sqrt(2.0 / dim), (dim, hidden))
    params[f"{p}.b1"] = np.zeros(hidden)
    params[f"{p}.w2"] = rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, dim))
    params[f"{p}.b2"] = np.zeros(dim)
    params[f"{p}.ln.gamma"] = np.ones(dim)
    params[f"{p}.ln.beta"] = np.zeros(dim)


def init_transformer_params(cfg: TransformerConfig, rng: np.random.Generator, prefix: str = "context") -> dict:
    params: dict = {}
    d = cfg.model_dim
    for i in range(cfg.encoder_layers):
        _attn_params(params, f"{prefix}.enc{i}.self", d, rng)
        _ff_params(params, f"{prefix}.enc{i}.ff", d, cfg.feedforward_dim, rng)
    for i in range(cfg.decoder_layers):
        _attn_params(params, f"{prefix}.dec{i}.self", d, rng)
        _attn_params(params, f"{prefix}.dec{i}.cross", d, rng)
        params[f"{prefix}.dec{i}.cross.ln_mem.gamma"] = np.ones(d)
        params[f"{prefix}.dec{i}.cross.ln_mem.beta"] = np.zeros(d)
        _ff_params(params, f"{prefix}.dec{i}.ff", d, cfg.feedforward_dim, rng)
    return params


# ---------------------------------------------------------------- attention


def multi_head_attention(query, memory, params: dict, p: str, heads: int, key_mask: np.ndarray) -> Tensor:
    rows, dim = query.shape
    dh = dim // heads

    def split(x):
        return ops.transpose(ops.reshape(x, (x.shape[0], heads, dh)), (1, 0, 2))

    q = split(ops.matmul(query, params[f"{p}.q"]))
    k = split(ops.matmul(memory, params[f"{p}.k"]))
    v = split(ops.matmul(memory, params[f"{p}.v"]))
    logits = ops.mul(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(dh))
    attn = ops.softmax_rows(logits, key_mask)
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (1, 0, 2)), (rows, dim))
    return ops.matmul(ctx, params[f"{p}.o"])


def attention_weights(query, memory, params: dict, p: str, heads: int, key_mask: np.ndarray) -> np.ndarray:
    """Attention probabilities (heads, rows, keys) without recording."""
    dim = query.shape[1]
    dh = dim // heads
    q = (query @ params[f"{p}.q"]).reshape(len(query), heads, dh).transpose(1, 0, 2)
    k = (memory @ params[f"{p}.k"]).reshape(len(memory), heads, dh).transpose(1, 0, 2)
    z = np.where(key_mask, q @ k.transpose(0, 2, 1) / np.sqrt(dh), -np.inf)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _feed_forward(x, params: dict, p: str) -> Tensor:
    h = ops.relu(ops.linear(x, params[f"{p}.w1"], params[f"{p}.b1"]))
    return ops.linear(h, params[f"{p}.w2"], params[f"{p}.b2"])


def _ln(x, params: dict, p: str) -> Tensor:
    return ops.layer_norm(x, params[f"{p}.gamma"], params[f"{p}.beta"])


def contextual_residual(f_a: FeatureMap, f_b: FeatureMap, params: dict, cfg: TransformerConfig, prefix: str = "context") -> Tensor:
    """Residual to add to ``f_a``: self-attention over ``f_a`` then cross-attention into ``f_b``.

    Pre-norm residual blocks; the returned tensor is the sum of block outputs,
    so all-zero parameters give an all-zero residual.  Masked rows of ``f_a``
    stay zero and masked rows of ``f_b`` receive no attention.
    """
    a = f_a.features
    if a.shape != f_b.features.shape:
        raise ValueError("feature maps must have the same shape")
    row_mask = f_a.mask
    h = a
    residual: Optional[Tensor] = None

    def push(h, delta):
        nonlocal residual
        delta = ops.mask_rows(delta, row_mask)
        residual = delta if residual is None else ops.add(residual, delta)
        return ops.add(h, delta)

    for i in range(cfg.encoder_layers):
        p = f"{prefix}.enc{i}"
        x = _ln(h, params, f"{p}.self.ln")
        h = push(h, multi_head_attention(x, x, params, f"{p}.self", cfg.heads, f_a.mask))
        h = push(h, _feed_forward(_ln(h, params, f"{p}.ff.ln"), params, f"{p}.ff"))
    mem = f_b.features
    for i in range(cfg.decoder_layers):
        p = f"{prefix}.dec{i}"
        x = _ln(h, params, f"{p}.self.ln")
        h = push(h, multi_head_attention(x, x, params, f"{p}.self", cfg.heads, f_a.mask))
        x = _ln(h, params, f"{p}.cross.ln")
        m = _ln(mem, params, f"{p}.cross.ln_mem")
        h = push(h, multi_head_attention(x, m, params, f"{p}.cross", cfg.heads, f_b.mask))
        h = push(h, _feed_forward(_ln(h, params, f"{p}.ff.ln"), params, f"{p}.ff"))
    if residual is None:
        residual = ops.mul(a, 0.0)
    return residual


# ---------------------------------------------------------------- score and SVD head


def score(f_x: FeatureMap, f_y: FeatureMap, params: dict, cfg: TransformerConfig, logit_scale: float = 1.0,
          prefix: str = "context") -> Tensor:
    """Row-stochastic (64, 64) scores; rows are source (y) cells, columns target (x) cells."""
    if not f_x.mask.any():
        raise ValueError("every target cell is masked")
    ay = ops.add(f_y.features, contextual_residual(f_y, f_x, params, cfg, prefix))
    ax = ops.add(f_x.features, contextual_residual(f_x, f_y, params, cfg, prefix))
    logits = ops.matmul(ay, ops.transpose(ax))
    if logit_scale != 1.0:
        logits = ops.mul(logits, logit_scale)
    return ops.softmax_rows(logits, f_x.mask)


def score_from_embeddings(ay, ax, key_mask: np.ndarray) -> Tensor:
    return ops.softmax_rows(ops.matmul(ay, ops.transpose(ax)), key_mask)


@dataclass
class HeadOutput:
    rotation: Tensor  # (3, 3)
    translation: Tensor  # (3,)
    singular_values: np.ndarray


def svd_head(s, com_y: np.ndarray, com_x: np.ndarray, mass_y: np.ndarray) -> HeadOutput:
    """Weighted Procrustes between source cell CoMs and their soft targets S @ com_x."""
    s = ops._t(s)
    w = np.asarray(mass_y, dtype=np.float64)
    if np.count_nonzero(w > 0) < 3:
        raise RankDeficientError("need at least 3 source cells with positive mass")
    w = w / w.sum()
    y = np.asarray(com_y, dtype=np.float64)
    y_bar = w @ y
    yc = (y - y_bar) * w[:, None]
    y_hat = ops.matmul(s, Tensor(com_x))
    y_hat_bar = ops.matmul(Tensor(w[None, :]), y_hat)  # (1, 3)
    h = ops.matmul(Tensor(yc.T), ops.sub(y_hat, y_hat_bar))  # (3, 3)
    u, sv, v = svd3(h)
    if sv.data[0] <= 0 or sv.data[1] <= RANK_TOL * sv.data[0]:
        raise RankDeficientError("weighted cross-covariance is rank deficient")
    d = np.sign(np.linalg.det(v.data @ u.data.T)) or 1.0
    r = ops.matmul(ops.mul(v, np.array([1.0, 1.0, d])), ops.transpose(u))
    t = ops.sub(ops.reshape(y_hat_bar, (3,)), ops.matmul(r, Tensor(y_bar)))
    return HeadOutput(r, t, sv.data.copy())
