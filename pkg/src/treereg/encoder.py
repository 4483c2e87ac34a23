"""Hierarchical feature encoder over Barnes-Hut tree depths.

Two branches, positional (CoM input) and density (inverse-density input),
each run ``tree_conv -> batch norm -> ReLU -> child max-pool`` per depth from
fine to coarse, land on the 4^3 voxel grid at depth 2, and are fused by a
Hadamard product followed by a row-wise fully connected upsampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .bh_tree import EMPTY, VOXEL_DEPTH, BHTree, tree_to_voxel
from .config import EncoderConfig

N_TAPS = 27
CENTER_TAP = 13
BRANCHES = ("position", "density")


class EncoderError(ValueError):
    pass


def density_features(raw_inv_density: np.ndarray) -> np.ndarray:
    """Per-depth normalized inverse densities, rescaled to mean one."""
    raw = np.asarray(raw_inv_density, dtype=np.float64)
    return (raw / raw.sum() * len(raw))[:, None]


def conv_window(tree: BHTree, depth: int) -> np.ndarray:
    """(n, 27) window indices: the 26 neighbours with the node itself at tap 13."""
    nb = tree.neighbors(depth)
    n = len(nb)
    return np.concatenate([nb[:, :CENTER_TAP], np.arange(n)[:, None], nb[:, CENTER_TAP:]], axis=1)


@dataclass
class TreeView:
    """Index tables and inputs the encoder needs from one tree."""

    depths: list
    windows: dict  # depth -> (n_d, 27)
    pool_groups: dict  # depth -> (n_{d-1}, 8) child indices at depth d
    com: np.ndarray  # CoMs at the finest encoded depth
    density: np.ndarray  # (n, 1) density input at the finest encoded depth
    voxel_index: np.ndarray  # (64,) node index at depth 2 or EMPTY
    mask: np.ndarray
    mass: np.ndarray
    cell_com: np.ndarray

    @classmethod
    def from_tree(cls, tree: BHTree, depths) -> "TreeView":
        depths = list(depths)
        if tree.max_depth < depths[0]:
            raise EncoderError(f"tree depth {tree.max_depth} does not reach encoded depth {depths[0]}")
        windows = {d: conv_window(tree, d) for d in depths}
        pool = {d: tree.children(d - 1) for d in depths}
        vox = tree_to_voxel(tree)
        first = tree[depths[0]]
        return cls(
            depths,
            windows,
            pool,
            first.com.copy(),
            density_features(first.raw_inv_density),
            vox.node_index,
            vox.mask,
            vox.mass,
            vox.com,
        )


@dataclass
class FeatureMap:
    features: Tensor  # (64, C)
    mask: np.ndarray
    mass: np.ndarray
    com: np.ndarray


# ---------------------------------------------------------------- parameters


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "encoder") -> dict:
    params = {}
    for branch, in_dim in (("position", 3), ("density", 1)):
        p = f"{prefix}.{branch}"
        params[f"{p}.lift.weight"] = rng.normal(0.0, np.sqrt(1.0 / in_dim), (in_dim, cfg.lift_width))
        params[f"{p}.lift.bias"] = rng.normal(0.0, 0.1, cfg.lift_width)
        widths = list(cfg.channel_widths) + [cfg.voxel_width]
        for i, d in enumerate(cfg.depths_used):
            c_in, c_out = widths[i], widths[i + 1]
            params[f"{p}.unit{d}.conv"] = rng.normal(0.0, np.sqrt(2.0 / (N_TAPS * c_in)), (N_TAPS * c_in, c_out))
            params[f"{p}.unit{d}.gamma"] = np.ones(c_out)
            params[f"{p}.unit{d}.beta"] = np.zeros(c_out)
    params[f"{prefix}.fc.weight"] = rng.normal(0.0, np.sqrt(1.0 / cfg.voxel_width), (cfg.voxel_width, cfg.output_cols))
    params[f"{prefix}.fc.bias"] = np.zeros(cfg.output_cols)
    return params


# ---------------------------------------------------------------- layers


def tree_conv(window: np.ndarray, features, weight) -> Tensor:
    """Indexed 27-tap convolution: each node's window of rows times a (27*C_in, C_out) filter.

    Empty neighbours contribute zero rows.
    """
    features = ops._t(features)
    n, c_in = features.shape
    if window.shape != (n, N_TAPS):
        raise EncoderError(f"window shape {window.shape} does not match {n} nodes")
    if ops._t(weight).shape[0] != N_TAPS * c_in:
        raise EncoderError("filter rows must equal 27 * input channels")
    stacked = ops.neighborhood_gather(features, window)  # (n, 27, C_in)
    return ops.matmul(ops.reshape(stacked, (n, N_TAPS * c_in)), weight)


def child_max_pool(groups: np.ndarray, features) -> Tensor:
    """Max over each parent's 8 children; absent children count as zero rows."""
    return ops.max_pool_grouped(features, groups, disjoint=True)


def encode_branch(view: TreeView, branch: str, params: dict, cfg: EncoderConfig, prefix: str = "encoder") -> Tensor:
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    p = f"{prefix}.{branch}"
    x = view.com if branch == "position" else view.density
    h = ops.linear(Tensor(x), params[f"{p}.lift.weight"], params[f"{p}.lift.bias"])
    for d in cfg.depths_used:
        h = tree_conv(view.windows[d], h, params[f"{p}.unit{d}.conv"])
        if cfg.norm_mode == "batch":
            h = ops.batch_norm_1d(h, params[f"{p}.unit{d}.gamma"], params[f"{p}.unit{d}.beta"])
        h = ops.relu(h)
        h = child_max_pool(view.pool_groups[d], h)
    return ops.gather_rows(h, view.voxel_index)


def encode(view: TreeView, params: dict, cfg: EncoderConfig, prefix: str = "encoder", density_ones: bool = False) -> FeatureMap:
    pos = encode_branch(view, "position", params, cfg, prefix)
    if density_ones:
        fused = pos
    else:
        fused = ops.hadamard(pos, encode_branch(view, "density", params, cfg, prefix))
    out = ops.linear(fused, params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])
    out = ops.mask_rows(out, view.mask)
    return FeatureMap(out, view.mask, view.mass, view.cell_com)
