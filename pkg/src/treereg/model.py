"""The registration network: encoder, contextual scores and SVD head, run once or iteratively."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .bh_tree import build_tree
from .cloud_io import NormalizationInfo, PointCloud, normalize
from .config import RunConfig
from .encoder import FeatureMap, TreeView, encode, init_encoder_params
from .matcher import HeadOutput, init_transformer_params, score, svd_head
from .rigid import RigidTransform


class Model:
    """Parameter set plus the forward computations that use it."""

    def __init__(self, cfg: RunConfig, params: Optional[dict] = None, seed: Optional[int] = None):
        self.cfg = cfg
        self.enc_cfg = cfg.encoder()
        self.tr_cfg = cfg.transformer()
        if params is None:
            rng = np.random.default_rng(cfg.seed if seed is None else seed)
            raw = init_encoder_params(self.enc_cfg, rng)
            raw.update(init_transformer_params(self.tr_cfg, rng))
            raw["loss.sigma_r"] = np.zeros(())
            raw["loss.sigma_t"] = np.zeros(())
            params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        self.params = params

    # ------------------------------------------------------------ plumbing

    def names(self) -> list[str]:
        return sorted(self.params)

    def network_names(self) -> list[str]:
        return [k for k in self.names() if not k.startswith("loss.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def view(self, tree) -> TreeView:
        return TreeView.from_tree(tree, self.enc_cfg.depths_used)

    def build_view(self, cloud: PointCloud) -> TreeView:
        return self.view(build_tree(cloud, self.cfg.max_depth))

    # ------------------------------------------------------------ forward

    def encode(self, view: TreeView, density_ones: bool = False) -> FeatureMap:
        return encode(view, self.params, self.enc_cfg, density_ones=density_ones)

    def score(self, fmap_x: FeatureMap, fmap_y: FeatureMap) -> Tensor:
        return score(fmap_x, fmap_y, self.params, self.tr_cfg, self.cfg.logit_scale)

    def register_views(self, view_y: TreeView, view_x: TreeView, fmap_x: Optional[FeatureMap] = None) -> HeadOutput:
        fy = self.encode(view_y)
        fx = fmap_x if fmap_x is not None else self.encode(view_x)
        s = self.score(fx, fy)
        return svd_head(s, view_y.cell_com, view_x.cell_com, view_y.mass)

    def register_once(self, tree_y, tree_x) -> RigidTransform:
        with no_grad():
            out = self.register_views(self.view(tree_y), self.view(tree_x))
        return RigidTransform.nearest(out.rotation.data, out.translation.data)

    def passes(self, source: PointCloud, target: PointCloud, k0: int, first_views=None) -> "PassTrace":
        """Run ``k0`` passes, re-building the moved source's tree each time.

        Each pass registers in the union-normalized frame of (moved source,
        target); its estimate is mapped back to the working frame and
        composed onto the running total.  Returned rotations/translations are
        the accumulated estimates after each pass, still on the tape.
        """
        trace = PassTrace()
        r_acc: Optional[Tensor] = None
        t_acc: Optional[Tensor] = None
        frame: Optional[NormalizationInfo] = None
        view_x = fmap_x = None
        for k in range(k0):
            if r_acc is None:
                moved = source
            else:
                r_np, t_np = r_acc.data.astype(np.float64), t_acc.data.astype(np.float64)
                moved = source.with_points(source.points @ r_np.T + t_np)
            if k == 0 and first_views is not None:
                view_y, view_x = first_views
                frame = NormalizationInfo(np.zeros(3), 1.0)
                fmap_x = None
            else:
                fits = frame is not None and np.all(np.abs(frame.apply(moved.points)) <= 1.0)
                if not fits:
                    ny, nx, frame = normalize((moved, target))
                    view_x = self.build_view(nx)
                    fmap_x = None
                    view_y = self.build_view(ny)
                else:
                    view_y = self.build_view(moved.with_points(np.clip(frame.apply(moved.points), -1.0, 1.0)))
            if fmap_x is None:
                fmap_x = self.encode(view_x)
            head = self.register_views(view_y, view_x, fmap_x)
            r = head.rotation
            # map y' -> R y' + t' back from the normalized frame
            t = ops.add(ops.mul(head.translation, frame.scale), ops.sub(frame.center, ops.matmul(r, Tensor(frame.center))))
            if r_acc is None:
                r_acc, t_acc = r, t
            else:
                r_acc = ops.matmul(r, r_acc)
                t_acc = ops.add(ops.matmul(r, t_acc), t)
            trace.step_rotations.append(r)
            trace.step_translations.append(t)
            trace.rotations.append(r_acc)
            trace.translations.append(t_acc)
        return trace

    def register_iterative(self, source: PointCloud, target: PointCloud, k0: int = 1):
        """Return (total transform, per-pass transforms) without recording gradients."""
        if k0 < 1:
            raise ValueError("k0 must be >= 1")
        with no_grad():
            trace = self.passes(source, target, k0)
        steps = [RigidTransform.nearest(r.data, t.data) for r, t in zip(trace.step_rotations, trace.step_translations)]
        total = RigidTransform.nearest(trace.rotations[-1].data, trace.translations[-1].data)
        return total, steps


@dataclass
class PassTrace:
    rotations: list = field(default_factory=list)
    translations: list = field(default_factory=list)
    step_rotations: list = field(default_factory=list)
    step_translations: list = field(default_factory=list)
