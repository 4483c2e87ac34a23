"""Rigid transforms, Procrustes solver, registration costs, ICP and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .bh_tree import EMPTY, NEIGHBOR_OFFSETS, BHTree, build_tree, morton_encode
from .cloud_io import PointCloud, _bbox_info, euler_rotation

ORTHO_TOL = 1e-9


class RankDeficientError(ValueError):
    """The weighted cross-covariance does not determine a unique rotation."""


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not in SO(3)")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def nearest(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidTransform":
        """Project an approximately orthonormal matrix onto SO(3)."""
        u, _, vt = np.linalg.svd(np.asarray(rotation, dtype=np.float64))
        d = np.sign(np.linalg.det(u @ vt))
        return cls(u @ np.diag([1.0, 1.0, d]) @ vt, translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class Correspondences:
    source: np.ndarray
    target: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.int64)
        tgt = np.asarray(self.target, dtype=np.int64)
        w = np.asarray(self.weight, dtype=np.float64)
        if not (src.shape == tgt.shape == w.shape):
            raise ValueError("correspondence arrays must have equal length")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "weight", w)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int, float]]) -> "Correspondences":
        arr = list(zip(*pairs)) if pairs else ([], [], [])
        return cls(*arr)

    @classmethod
    def diagonal(cls, n: int, weight: float = 1.0) -> "Correspondences":
        i = np.arange(n)
        return cls(i, i, np.full(n, weight))

    def __len__(self) -> int:
        return len(self.source)


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- costs


def cost_eq1(transform: RigidTransform, source, target, corr: Correspondences) -> float:
    """Sum of w_ij * |R y_i + t - x_j|^2 over the listed pairs."""
    y = _pts(source)[corr.source]
    x = _pts(target)[corr.target]
    r = transform.apply(y) - x
    return float(np.sum(corr.weight * np.einsum("ij,ij->i", r, r)))


def cost_eq2(transform: RigidTransform, tree_y: BHTree, tree_x: BHTree, depths: Optional[Sequence[int]] = None) -> float:
    """Multi-scale all-pairs CoM cost weighted by normalized inverse densities.

    Diagnostic only.  Uses sum_a sum_b a b |p - q|^2 =
    B sum a|p|^2 + A sum b|q|^2 - 2 (sum a p).(sum b q).
    """
    if tree_y.max_depth != tree_x.max_depth:
        raise ValueError("trees must share max_depth")
    if depths is None:
        depths = range(1, tree_y.max_depth + 1)
    total = 0.0
    for d in depths:
        ly, lx = tree_y[d], tree_x[d]
        a, b = ly.inv_density, lx.inv_density
        p = transform.apply(ly.com)
        q = lx.com
        sa, sb = a.sum(), b.sum()
        total += sb * np.dot(a, np.einsum("ij,ij->i", p, p)) + sa * np.dot(b, np.einsum("ij,ij->i", q, q))
        total -= 2.0 * np.dot(a @ p, b @ q)
    return float(total)


# ---------------------------------------------------------------- Procrustes

RANK_TOL = 1e-10


def procrustes(source_pts, target_pts, weights=None) -> RigidTransform:
    """Weighted least-squares rigid map source -> target with reflection guard."""
    y = np.asarray(source_pts, dtype=np.float64)
    x = np.asarray(target_pts, dtype=np.float64)
    if y.shape != x.shape or y.ndim != 2 or y.shape[1] != 3:
        raise ValueError("point sets must both have shape (n, 3)")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(y),) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, non-negative, one per pair")
    if np.count_nonzero(w) < 3:
        raise RankDeficientError("need at least 3 pairs with positive weight")
    w = w / w.sum()
    y_bar = w @ y
    x_bar = w @ x
    h = (y - y_bar).T @ ((x - x_bar) * w[:, None])
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= RANK_TOL * s[0]:
        raise RankDeficientError("cross-covariance is rank deficient (collinear or coincident points)")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, x_bar - r @ y_bar)


# ---------------------------------------------------------------- nearest neighbours


class TreeNearest:
    """Exact nearest-neighbour queries pruned by a Barnes-Hut tree.

    A query inspects the 27 cells around its own cell at a fixed depth.  The
    best candidate is accepted when it is closer than the nearest face of
    that block that borders occupied space; other queries fall back to a
    linear scan.
    """

    def __init__(self, target, depth: Optional[int] = None):
        pts = _pts(target)
        self.points = pts
        self.info = _bbox_info(pts) if len(pts) > 1 and np.ptp(pts, axis=0).max() > 0 else None
        if self.info is None:
            self.tree = None
            return
        unit = np.clip(self.info.apply(pts), -1.0, 1.0)
        if depth is None:
            self.tree = build_tree(PointCloud(unit), 7)
            # shallowest level with at most ~4 points per occupied cell
            depth = next((d for d in range(1, 8) if 4 * len(self.tree[d]) >= len(pts)), 7)
        else:
            self.tree = build_tree(PointCloud(unit), depth)
        self.depth = depth
        lv = self.tree[depth]
        self.sorted_points = pts[self.tree.order]
        self.node_start = lv.start
        self.node_count = lv.count
        side = 1 << depth
        self.lookup = np.full(side**3, EMPTY, dtype=np.int64)
        self.lookup[lv.codes] = np.arange(len(lv))
        self.side = side

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (index, squared distance) of the nearest target point."""
        q = np.asarray(queries, dtype=np.float64)
        if self.tree is None:
            return linear_nearest(self.points, q)
        side = self.side
        u = self.info.apply(q)
        cell = np.clip(np.floor((u + 1.0) * (side / 2.0)).astype(np.int64), 0, side - 1)
        offs = np.vstack([NEIGHBOR_OFFSETS, np.zeros((1, 3), dtype=np.int64)])
        nc = cell[:, None, :] + offs[None]
        inb = np.all((nc >= 0) & (nc < side), axis=2)
        node = np.where(inb, self.lookup[morton_encode(np.clip(nc, 0, side - 1))], EMPTY)
        cnt = np.where(node >= 0, self.node_count[np.maximum(node, 0)], 0)
        per_query = cnt.sum(axis=1)

        best_idx = np.full(len(q), -1, dtype=np.int64)
        best_d2 = np.full(len(q), np.inf)
        has = per_query > 0
        if has.any():
            flat_node = node[has].ravel()
            flat_cnt = cnt[has].ravel()
            keep = flat_cnt > 0
            flat_node, flat_cnt = flat_node[keep], flat_cnt[keep]
            total = int(flat_cnt.sum())
            run_start = np.repeat(self.node_start[flat_node], flat_cnt)
            within = np.arange(total) - np.repeat(np.cumsum(flat_cnt) - flat_cnt, flat_cnt)
            cand = run_start + within
            qi = np.repeat(np.flatnonzero(has), per_query[has])
            diff = self.sorted_points[cand] - q[qi]
            d2 = np.einsum("ij,ij->i", diff, diff)
            seg = np.concatenate(([0], np.cumsum(per_query[has])[:-1]))
            mins = np.minimum.reduceat(d2, seg)
            # first candidate attaining the minimum in each segment
            is_min = d2 == np.repeat(mins, per_query[has])
            pos = np.flatnonzero(is_min)
            owner = np.searchsorted(seg, pos, side="right") - 1
            first = np.full(len(seg), -1, dtype=np.int64)
            first[owner[::-1]] = pos[::-1]
            best_d2[has] = mins
            best_idx[has] = self.tree.order[cand[first]]

        # distance from the query to block faces that border in-grid cells
        h = 2.0 / side * self.info.scale
        lo_face = (cell - 1) * h - self.info.scale + self.info.center
        hi_face = (cell + 2) * h - self.info.scale + self.info.center
        gap_lo = np.where(cell - 1 > 0, q - lo_face, np.inf)
        gap_hi = np.where(cell + 2 < side, hi_face - q, np.inf)
        safe = np.minimum(gap_lo, gap_hi).min(axis=1)
        ok = has & (best_d2 <= np.square(np.maximum(safe, 0.0)))
        if not ok.all():
            miss = np.flatnonzero(~ok)
            idx, d2 = linear_nearest(self.points, q[miss])
            best_idx[miss] = idx
            best_d2[miss] = d2
        return best_idx, best_d2


def linear_nearest(points: np.ndarray, queries: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    pn = np.einsum("ij,ij->i", points, points)
    for s in range(0, len(queries), chunk):
        qc = queries[s : s + chunk]
        d2 = np.einsum("ij,ij->i", qc, qc)[:, None] + pn[None, :] - 2.0 * qc @ points.T
        j = np.argmin(d2, axis=1)
        idx[s : s + chunk] = j
        diff = points[j] - qc
        dist[s : s + chunk] = np.einsum("ij,ij->i", diff, diff)
    return idx, dist


# ---------------------------------------------------------------- ICP


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    cost: float
    history: list = field(default_factory=list)

    def __iter__(self) -> Iterator:
        return iter((self.transform, self.iterations, self.cost))


def icp(source, target, max_iters: int = 50, tol: float = 1e-10, init: Optional[RigidTransform] = None) -> IcpResult:
    """Point-to-point ICP; cost is the mean squared nearest-neighbour distance."""
    y = _pts(source)
    nn = TreeNearest(target)
    x = nn.points
    current = init or RigidTransform.identity()
    _, d2 = nn.query(current.apply(y))
    cost = float(d2.mean())
    history = [cost]
    iters = 0
    while iters < max_iters:
        idx, _ = nn.query(current.apply(y))
        iters += 1
        try:
            cand = procrustes(y, x[idx])
        except RankDeficientError:
            break
        _, d2 = nn.query(cand.apply(y))
        new_cost = float(d2.mean())
        if new_cost > cost:
            break
        current = cand
        decrease = cost - new_cost
        cost = new_cost
        history.append(cost)
        if decrease < tol:
            break
    return IcpResult(current, iters, cost, history)


# ---------------------------------------------------------------- metrics


def angular_error(r_gt: np.ndarray, r_pred: np.ndarray) -> float:
    """Angle in degrees of the relative rotation R_gt^T R_pred.

    atan2 of the sine (from the skew part) and cosine (from the trace) keeps
    full precision near 0 and 180 degrees, where acos alone loses ~1e-8 rad.
    """
    m = np.asarray(r_gt, dtype=np.float64).T @ np.asarray(r_pred, dtype=np.float64)
    c = 0.5 * (np.trace(m) - 1.0)
    s = 0.5 * math.sqrt((m[2, 1] - m[1, 2]) ** 2 + (m[0, 2] - m[2, 0]) ** 2 + (m[1, 0] - m[0, 1]) ** 2)
    return math.degrees(math.atan2(s, c))


def translation_error(t_gt, t_pred) -> float:
    return float(np.linalg.norm(np.asarray(t_gt, dtype=np.float64) - np.asarray(t_pred, dtype=np.float64)))


def rmse_aggregate(errors: Sequence[float]) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean(e * e)))


def compose_trajectory(relative: Sequence[RigidTransform], init: Optional[RigidTransform] = None, probe=(0.0, 0.0, 0.0)) -> list[np.ndarray]:
    """Positions of ``probe`` under init * (T_f ... T_1)^-1 for f = 1..len(relative)."""
    init = init or RigidTransform.identity()
    p = np.asarray(probe, dtype=np.float64)
    acc = RigidTransform.identity()
    out = []
    for rel in relative:
        acc = rel.compose(acc)
        out.append(init.compose(acc.inverse()).apply(p))
    return out


def euler_to_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    return euler_rotation(*np.deg2rad(angles_deg))
