"""Barnes-Hut 2^3-tree over a normalized point cloud.

Nodes are stored per depth as structure-of-arrays sorted along the Morton
Z-curve.  A node at depth ``d`` is identified by its Morton code (3d bits,
octant bits ordered x, y, z from least significant) and by its hierarchical
label ``8 * parent_label + 1 + octant`` with the root labelled 0.

Every depth holds *all* occupied cells.  A leaf reached above the maximum
depth is carried down as a chain of ``VIRTUAL`` nodes so each point is
enclosed by exactly one node at every depth.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .cloud_io import PointCloud

INTERNAL, LEAF, VIRTUAL = 1, 2, 3
KIND_NAMES = {0: "null", INTERNAL: "internal", LEAF: "leaf", VIRTUAL: "virtual"}
EMPTY = -1
DEFAULT_DEPTH = 6
MAX_SUPPORTED_DEPTH = 10
VOXEL_DEPTH = 2

# (dz, dy, dx) in lexicographic order, centre excluded; slot s mirrors 25 - s
NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy, dz) != (0, 0, 0)],
    dtype=np.int64,
)


class TreeError(ValueError):
    pass


# ---------------------------------------------------------------- morton helpers


def _part1by2(n: np.ndarray) -> np.ndarray:
    n = n & 0x3FF
    n = (n | (n << 16)) & 0x030000FF
    n = (n | (n << 8)) & 0x0300F00F
    n = (n | (n << 4)) & 0x030C30C3
    n = (n | (n << 2)) & 0x09249249
    return n


def _compact1by2(n: np.ndarray) -> np.ndarray:
    n = n & 0x09249249
    n = (n ^ (n >> 2)) & 0x030C30C3
    n = (n ^ (n >> 4)) & 0x0300F00F
    n = (n ^ (n >> 8)) & 0x030000FF
    n = (n ^ (n >> 16)) & 0x3FF
    return n


_SPREAD = _part1by2(np.arange(1 << MAX_SUPPORTED_DEPTH, dtype=np.int64))


def morton_encode(ijk: np.ndarray) -> np.ndarray:
    """Interleave integer grid coordinates (..., 3) ordered (x, y, z)."""
    ijk = np.asarray(ijk, dtype=np.int64)
    return _SPREAD[ijk[..., 0]] | (_SPREAD[ijk[..., 1]] << 1) | (_SPREAD[ijk[..., 2]] << 2)


def morton_decode(code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    return np.stack([_compact1by2(code), _compact1by2(code >> 1), _compact1by2(code >> 2)], axis=-1)


def label_offset(depth: int) -> int:
    """Label of the first cell at ``depth``: 0, 1, 9, 73, ..."""
    return (8**depth - 1) // 7


def code_to_label(code, depth: int):
    return np.asarray(code, dtype=np.int64) + label_offset(depth)


def label_to_code(label, depth: int):
    return np.asarray(label, dtype=np.int64) - label_offset(depth)


def child_labels(parent_label: int) -> list[int]:
    """Z-curve labels of the 8 children of the node labelled ``parent_label``."""
    if parent_label < 0:
        raise ValueError("label must be non-negative")
    return [8 * parent_label + k for k in range(1, 9)]


def parent_of(label: int) -> int:
    if label < 1:
        raise ValueError("the root has no parent")
    return (label - 1) // 8


def grid_coords(points: np.ndarray, depth: int) -> np.ndarray:
    """Cell coordinates at ``depth``; a coordinate on a splitting plane goes up."""
    side = 1 << depth
    q = np.floor((np.asarray(points, dtype=np.float64) + 1.0) * (side / 2.0)).astype(np.int64)
    return np.clip(q, 0, side - 1)


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class BHNode:
    depth: int
    index: int
    label: int
    kind: str
    com: np.ndarray
    inv_density: float
    count: int
    cell_center: np.ndarray
    cell_half_length: float
    parent: Optional[int]
    children: tuple


@dataclass
class DepthLevel:
    depth: int
    codes: np.ndarray  # sorted Morton codes
    count: np.ndarray
    com_sum: np.ndarray
    kind: np.ndarray
    parent: np.ndarray  # index into depth - 1, -1 at the root
    start: np.ndarray  # first position of each node in the sorted point order
    total: int

    def __len__(self) -> int:
        return len(self.codes)

    @cached_property
    def labels(self) -> np.ndarray:
        return code_to_label(self.codes, self.depth)

    @cached_property
    def com(self) -> np.ndarray:
        return self.com_sum / self.count[:, None]

    @cached_property
    def raw_inv_density(self) -> np.ndarray:
        """1 / m with node mass m = count / N."""
        return self.total / self.count

    @cached_property
    def inv_density(self) -> np.ndarray:
        """Inverse densities normalized to sum to one over this depth."""
        w = 1.0 / self.count
        return w / w.sum()

    @cached_property
    def mass(self) -> np.ndarray:
        return self.count / self.total

    @property
    def half_length(self) -> float:
        return 1.0 / (1 << self.depth)

    @cached_property
    def grid(self) -> np.ndarray:
        return morton_decode(self.codes)

    @cached_property
    def cell_center(self) -> np.ndarray:
        return (self.grid + 0.5) * (2.0 * self.half_length) - 1.0

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Node index for each code, EMPTY when the cell is unoccupied."""
        codes = np.asarray(codes, dtype=np.int64)
        pos = np.searchsorted(self.codes, codes)
        pos_c = np.minimum(pos, len(self.codes) - 1)
        hit = self.codes[pos_c] == codes
        return np.where(hit, pos_c, EMPTY)


class BHTree:
    """Per-depth node arrays for depths 0..max_depth."""

    def __init__(self, levels: list[DepthLevel], order: np.ndarray, cloud: PointCloud, max_depth: int):
        self.levels = levels
        self.order = order
        self.source_cloud = cloud
        self.max_depth = max_depth
        self._neighbors: dict[int, np.ndarray] = {}
        self._children: dict[int, np.ndarray] = {}

    def __getitem__(self, depth: int) -> DepthLevel:
        return self.levels[depth]

    @property
    def n_points(self) -> int:
        return len(self.order)

    @property
    def depths(self) -> list[DepthLevel]:
        return self.levels

    @property
    def labels(self) -> list[np.ndarray]:
        return [lv.labels for lv in self.levels]

    def node(self, depth: int, index: int) -> BHNode:
        lv = self.levels[depth]
        kids = tuple(int(c) for c in self.children(depth)[index])
        return BHNode(
            depth=depth,
            index=index,
            label=int(lv.labels[index]),
            kind=KIND_NAMES[int(lv.kind[index])],
            com=lv.com[index],
            inv_density=float(lv.inv_density[index]),
            count=int(lv.count[index]),
            cell_center=lv.cell_center[index],
            cell_half_length=lv.half_length,
            parent=int(lv.parent[index]) if depth else None,
            children=kids,
        )

    def index_of_label(self, depth: int, label: int) -> int:
        return int(self.levels[depth].lookup(label_to_code(label, depth)))

    def point_nodes(self, depth: int) -> np.ndarray:
        """Node index at ``depth`` enclosing each input point (input order)."""
        lv = self.levels[depth]
        sorted_idx = np.repeat(np.arange(len(lv)), lv.count)
        out = np.empty(self.n_points, dtype=np.int64)
        out[self.order] = sorted_idx
        return out

    def children(self, depth: int) -> np.ndarray:
        """(n, 8) child indices at depth + 1 by octant, EMPTY where absent."""
        if depth not in self._children:
            n = len(self.levels[depth])
            table = np.full((n, 8), EMPTY, dtype=np.int64)
            if depth < self.max_depth:
                lv = self.levels[depth + 1]
                table[lv.parent, lv.codes & 7] = np.arange(len(lv))
            self._children[depth] = table
        return self._children[depth]

    def neighbors(self, depth: int) -> np.ndarray:
        """(n, 26) same-depth neighbour indices, EMPTY for absent/out-of-bounds cells."""
        if depth not in self._neighbors:
            self._neighbors[depth] = _neighbor_table(self.levels[depth])
        return self._neighbors[depth]

    def neighbor_indices(self, depth: int, label: int) -> np.ndarray:
        idx = self.index_of_label(depth, label)
        if idx == EMPTY:
            raise TreeError(f"no non-empty node with label {label} at depth {depth}")
        return self.neighbors(depth)[idx]

    @property
    def kappa(self) -> list[np.ndarray]:
        return [self.neighbors(d) for d in range(self.max_depth + 1)]


def _neighbor_table(lv: DepthLevel) -> np.ndarray:
    side = 1 << lv.depth
    nc = lv.grid[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]
    inb = np.all((nc >= 0) & (nc < side), axis=2)
    codes = morton_encode(np.clip(nc, 0, side - 1))
    if lv.depth <= 7:
        table = np.full(side**3, EMPTY, dtype=np.int64)
        table[lv.codes] = np.arange(len(lv))
        idx = table[codes]
    else:
        idx = lv.lookup(codes)
    return np.where(inb, idx, EMPTY)


# ---------------------------------------------------------------- construction


def _canonical_order(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort points by finest-level Morton code, ties broken by coordinates.

    The result does not depend on input order, so node sums are bit-stable
    under point permutations.
    """
    pt = np.ascontiguousarray(pts.T)
    side = 1 << MAX_SUPPORTED_DEPTH
    q = np.minimum(((pt + 1.0) * (side / 2.0)).astype(np.int64), side - 1)
    codes = _SPREAD[q[0]] | (_SPREAD[q[1]] << 1) | (_SPREAD[q[2]] << 2)
    order = np.argsort(codes)
    sc = codes[order]
    tied = sc[1:] == sc[:-1]
    if tied.any():
        mask = np.zeros(len(sc), dtype=bool)
        mask[:-1] |= tied
        mask[1:] |= tied
        idx = np.flatnonzero(mask)
        sub = order[idx]
        sub = sub[np.lexsort((pt[2, sub], pt[1, sub], pt[0, sub], sc[idx]))]
        order[idx] = sub
    return order, sc


def _segments(keys: np.ndarray) -> np.ndarray:
    """Start offsets of runs of equal values in a sorted array."""
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    brk = np.flatnonzero(keys[1:] != keys[:-1]) + 1
    return np.concatenate(([0], brk))


def build_tree(cloud: PointCloud, max_depth: int = DEFAULT_DEPTH) -> BHTree:
    """Build the tree by recursive 2^3 subdivision of [-1, 1]^3 up to ``max_depth``."""
    if not 1 <= max_depth <= MAX_SUPPORTED_DEPTH:
        raise TreeError(f"max_depth must be in [1, {MAX_SUPPORTED_DEPTH}], got {max_depth}")
    pts = cloud.points
    if len(pts) == 0:
        raise TreeError("empty cloud")
    if pts.max() > 1.0 or pts.min() < -1.0:
        raise TreeError("cloud lies outside [-1, 1]^3; normalize it first")

    n = len(pts)
    order, sc = _canonical_order(pts)
    cols = [np.take(pts[:, k], order) for k in range(3)]

    sc = sc >> (3 * (MAX_SUPPORTED_DEPTH - max_depth))
    start = _segments(sc)
    count = np.diff(np.append(start, n))
    # bincount adds each bin's values in input order, like reduceat, but is much faster on short runs
    ids = np.repeat(np.arange(len(start)), count)
    sums = [np.bincount(ids, weights=c, minlength=len(start)) for c in cols]
    node_codes = sc[start]

    raw = []
    for _ in range(max_depth):
        pc = node_codes >> 3
        head = np.empty(len(pc), dtype=bool)
        head[0] = True
        np.not_equal(pc[1:], pc[:-1], out=head[1:])
        seg = np.flatnonzero(head)
        parent = np.cumsum(head) - 1
        raw.append((node_codes, count, sums, start, parent))
        node_codes = pc[seg]
        count = np.add.reduceat(count, seg)
        sums = [np.bincount(parent, weights=c, minlength=len(seg)) for c in sums]
        start = start[seg]
    raw.append((node_codes, count, sums, start, np.full(1, EMPTY, dtype=np.int64)))
    raw.reverse()

    levels: list[DepthLevel] = []
    for d, (c, cnt, sm, st, parent) in enumerate(raw):
        kind = np.where(cnt == 1, LEAF, INTERNAL).astype(np.int8)
        if d == max_depth:
            kind[:] = LEAF
        if d:
            kind[levels[d - 1].kind[parent] != INTERNAL] = VIRTUAL
        levels.append(DepthLevel(d, c, cnt, np.stack(sm, axis=1), kind, parent, st, n))
    return BHTree(levels, order, cloud, max_depth)


# ---------------------------------------------------------------- voxel view


@dataclass(frozen=True)
class VoxelGrid:
    """Dense 4x4x4 view of depth 2, rows in Morton order."""

    node_index: np.ndarray  # (64,) node index at depth 2 or EMPTY
    mask: np.ndarray  # (64,) bool
    mass: np.ndarray  # (64,)
    com: np.ndarray  # (64, 3), zero where empty

    def scatter(self, features: np.ndarray) -> np.ndarray:
        """Place per-node depth-2 features into their cells, zero-filling the rest."""
        features = np.asarray(features)
        out = np.zeros((64,) + features.shape[1:], dtype=features.dtype)
        out[self.mask] = features[self.node_index[self.mask]]
        return out


def tree_to_voxel(tree: BHTree) -> VoxelGrid:
    if tree.max_depth < VOXEL_DEPTH:
        raise TreeError("tree_to_voxel needs max_depth >= 2")
    lv = tree[VOXEL_DEPTH]
    node_index = np.full(64, EMPTY, dtype=np.int64)
    node_index[lv.codes] = np.arange(len(lv))
    mask = node_index >= 0
    mass = np.zeros(64)
    mass[lv.codes] = lv.mass
    com = np.zeros((64, 3))
    com[lv.codes] = lv.com
    return VoxelGrid(node_index, mask, mass, com)


# ---------------------------------------------------------------- dump


def dump_tree(tree: BHTree, path: str | os.PathLike, include_virtual: bool = False) -> None:
    """Write one line per node: depth label count com_x com_y com_z inv_density."""
    with open(path, "w") as fh:
        fh.write("# depth label count com_x com_y com_z inv_density\n")
        for lv in tree.levels:
            keep = np.ones(len(lv), dtype=bool) if include_virtual else lv.kind != VIRTUAL
            com = lv.com
            for i in np.flatnonzero(keep):
                fh.write(
                    f"{lv.depth} {lv.labels[i]} {lv.count[i]} "
                    f"{com[i, 0]:.17g} {com[i, 1]:.17g} {com[i, 2]:.17g} {lv.inv_density[i]:.17g}\n"
                )


def read_dump(path: str | os.PathLike) -> list[tuple]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            f = line.split()
            rows.append((int(f[0]), int(f[1]), int(f[2]), float(f[3]), float(f[4]), float(f[5]), float(f[6])))
    return rows
