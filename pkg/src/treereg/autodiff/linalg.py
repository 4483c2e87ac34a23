"""Differentiable 3x3 SVD."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, record

SVD_DENOM_FLOOR = 1e-8


def _canonical_signs(u: np.ndarray, vt: np.ndarray):
    # flip (u_k, v_k) pairs so the largest |u| entry of each column is positive
    idx = np.abs(u).argmax(axis=0)
    sign = np.sign(u[idx, np.arange(u.shape[1])])
    sign[sign == 0] = 1.0
    return u * sign, vt * sign[:, None]


def svd3(m: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """m = u diag(s) v^T with a deterministic sign convention.

    Backward uses F_ij = 1 / (s_j^2 - s_i^2) with the denominator clamped in
    magnitude to ``SVD_DENOM_FLOOR``:
    dm = u [(F o (u^T du - du^T u)) S + diag(ds) + S (F o (v^T dv - dv^T v))] v^T
    """
    a = m.data
    if a.shape != (3, 3):
        raise ValueError(f"svd3 expects a 3x3 matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd3 input is not finite")
    u, s, vt = np.linalg.svd(a)
    u, vt = _canonical_signs(u, vt)
    v = vt.T
    tu, ts, tv = Tensor(u), Tensor(s), Tensor(v)

    def bw(g):
        gu, gs, gv = g
        s2 = s * s
        denom = s2[None, :] - s2[:, None]
        small = np.abs(denom) < SVD_DENOM_FLOOR
        denom = np.where(small, np.where(denom < 0, -SVD_DENOM_FLOOR, SVD_DENOM_FLOOR), denom)
        f = 1.0 / denom
        np.fill_diagonal(f, 0.0)
        utgu = u.T @ gu
        vtgv = v.T @ gv
        sm = np.diag(s)
        inner = (f * (utgu - utgu.T)) @ sm + np.diag(gs) + sm @ (f * (vtgv - vtgv.T))
        return (u @ inner @ v.T,)

    record([m], [tu, ts, tv], bw)
    return tu, ts, tv
