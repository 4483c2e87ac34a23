"""Gradient-check suite and micro-benchmarks shared by the CLI and the tests."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad, ops, profile, svd3
from .autodiff.gradcheck import check
from .bh_tree import build_tree
from .cloud_io import PointCloud, euler_rotation, normalize, synth_shapes
from .config import RunConfig
from .model import Model
from .training import loss_pass

OP_TOL = 1e-4
SVD_TOL = 1e-3

TINY_CONFIG = dict(
    max_depth=4,
    depths_used=[4, 3],
    channel_widths=[3, 4],
    lift_width=3,
    voxel_width=4,
    output_cols=8,
    heads=2,
    feedforward_dim=8,
)


@dataclass
class GradCase:
    name: str
    fn: Callable[[], Tensor]
    inputs: list
    tol: float = OP_TOL


def _scalar(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Reduce ``fn()`` to a scalar by a fixed random projection."""
    probe = fn()
    if probe.data.size == 1:
        return lambda: ops.reshape(fn(), ())
    w = Tensor(rng.normal(size=probe.shape))
    return lambda: ops.sum(ops.mul(fn(), w))


def op_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)

    def T(*shape, positive=False, spread=False):
        if spread:
            # distinct values 0.1 apart keep max and relu away from ties and kinks
            n = int(np.prod(shape))
            return Tensor(((rng.permutation(n) - n / 2 + 0.5) * 0.1).reshape(shape))
        v = rng.normal(size=shape)
        return Tensor(np.abs(v) + 0.5 if positive else v)

    a, b = T(4, 3), T(4, 3)
    bc = T(3)
    m1, m2 = T(4, 5), T(5, 3)
    b1, b2 = T(2, 4, 5), T(2, 5, 3)
    vec = T(5)
    pos = T(4, 3, positive=True)
    r = T(5, 4, spread=True)
    sm = T(3, 6)
    key = np.array([True, False, True, True, False, True])
    bnx, gam, bet = T(6, 4), T(4), T(4)
    row_mask = np.array([True, True, False, True, True, False])
    lnx, lng, lnb = T(3, 5), T(5), T(5)
    gx = T(5, 2)
    gidx = np.array([[0, 3, -1], [3, 3, 1]])
    px = T(7, 3, spread=True)
    groups = np.array([[0, 2, -1, 5], [1, -1, -1, -1], [3, 4, 6, -1]])
    ovl = np.array([[0, 2, 5], [2, 5, 1]])
    nx = T(4, 2)
    # mirror-symmetric 3-tap window: left neighbour, self, right neighbour on a line
    window = np.array([[-1, 0, 1], [0, 1, 2], [1, 2, 3], [2, 3, -1]])
    sv = Tensor(rng.normal(size=(3, 3)))
    cases = [
        ("add", lambda: ops.add(a, b), [a, b]),
        ("add_broadcast", lambda: ops.add(a, bc), [a, bc]),
        ("sub", lambda: ops.sub(a, b), [a, b]),
        ("hadamard", lambda: ops.hadamard(a, b), [a, b]),
        ("neg", lambda: ops.neg(a), [a]),
        ("exp", lambda: ops.exp(a), [a]),
        ("log", lambda: ops.log(pos), [pos]),
        ("relu", lambda: ops.relu(r), [r]),
        ("transpose", lambda: ops.transpose(b1, (2, 0, 1)), [b1]),
        ("reshape", lambda: ops.reshape(a, (2, 6)), [a]),
        ("getitem", lambda: ops.getitem(a, (slice(1, 3), [0, 2, 2])), [a]),
        ("concat", lambda: ops.concat([a, b], axis=1), [a, b]),
        ("stack", lambda: ops.stack([a, b], axis=0), [a, b]),
        ("sum", lambda: ops.sum(a, axis=0), [a]),
        ("mean", lambda: ops.mean(a, axis=1, keepdims=True), [a]),
        ("mse", lambda: ops.mse(a, b), [a, b]),
        ("sum_squares", lambda: ops.sum_squares(a), [a]),
        ("matmul", lambda: ops.matmul(m1, m2), [m1, m2]),
        ("matmul_batched", lambda: ops.matmul(b1, b2), [b1, b2]),
        ("matmul_vector", lambda: ops.matmul(m1, vec), [m1, vec]),
        ("linear", lambda: ops.linear(m1, m2, bc), [m1, m2, bc]),
        ("softmax_rows", lambda: ops.softmax_rows(sm, key), [sm]),
        ("batch_norm_1d", lambda: ops.batch_norm_1d(bnx, gam, bet), [bnx, gam, bet]),
        ("batch_norm_1d_masked", lambda: ops.batch_norm_1d(bnx, gam, bet, row_mask), [bnx, gam, bet]),
        ("layer_norm", lambda: ops.layer_norm(lnx, lng, lnb), [lnx, lng, lnb]),
        ("gather_rows", lambda: ops.gather_rows(gx, gidx), [gx]),
        ("max_pool_grouped", lambda: ops.max_pool_grouped(px, groups, disjoint=True), [px]),
        ("max_pool_overlapping", lambda: ops.max_pool_grouped(px, ovl), [px]),
        ("mask_rows", lambda: ops.mask_rows(a, np.array([True, False, True, True])), [a]),
        ("neighborhood_gather", lambda: ops.neighborhood_gather(nx, window), [nx]),
    ]
    out = [GradCase(n, _scalar(f, rng), i) for n, f, i in cases]
    out.append(GradCase("svd3", _scalar(lambda: ops.concat([ops.reshape(t, (-1,)) for t in svd3(sv)]), rng), [sv], SVD_TOL))
    return out


def pipeline_case(seed: int = 0, n_points: int = 300) -> GradCase:
    """encode -> score -> svd_head -> iterative loss on a tiny float64 model."""
    # a scaled softmax keeps S smooth on random weights so the check is not vacuous
    cfg = RunConfig(**TINY_CONFIG, seed=seed, logit_scale=0.1).validate()
    model = Model(cfg)
    cloud = synth_shapes(1, seed, n_points, n_points)[0]
    rng = np.random.default_rng(seed)
    ang = rng.uniform(-0.3, 0.3, 3)
    r = euler_rotation(*ang)
    t = rng.uniform(-0.1, 0.1, 3)
    tgt = cloud.with_points(cloud.points @ r.T + t)
    src_n, tgt_n, info = normalize((cloud, tgt))
    r_n, t_n = info.normalize_transform(r, t)
    vy, vx = model.build_view(src_n), model.build_view(tgt_n)
    sr, st = model.params["loss.sigma_r"], model.params["loss.sigma_t"]

    def fn():
        head = model.register_views(vy, vx)
        return loss_pass(head.rotation, head.translation, r_n, t_n, sr, st)

    return GradCase("pipeline", fn, [model.params[k] for k in model.names()])


def run_gradchecks(seed: int = 0, include_pipeline: bool = True) -> list[tuple[str, float, float]]:
    """(name, relative error, tolerance) for every op case and the composed pipeline."""
    rows = []
    with profile("float64"):
        cases = op_cases(seed)
        if include_pipeline:
            cases.append(pipeline_case(seed))
        for c in cases:
            rows.append((c.name, check(c.fn, c.inputs), c.tol))
    return rows


# ---------------------------------------------------------------- benchmarks


@dataclass
class Timing:
    stage: str
    reps: int
    mean_ms: float
    std_ms: float
    median_ms: float


def _time(fn: Callable[[], object], reps: int) -> np.ndarray:
    out = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out * 1e3


def _timing(stage: str, ms: np.ndarray) -> Timing:
    return Timing(stage, len(ms), float(ms.mean()), float(ms.std()), float(np.median(ms)))


def bench_tree(cloud: PointCloud, depth: int = 6, reps: int = 20) -> Timing:
    build_tree(cloud, depth)  # warm-up
    return _timing("tree_build", _time(lambda: build_tree(cloud, depth), reps))


def bench_inference(model: Model, source: PointCloud, target: PointCloud, reps: int = 20, passes: int = 1) -> Timing:
    def run():
        with no_grad():
            model.passes(source, target, passes)

    run()
    return _timing(f"inference_{passes}pass", _time(run, reps))
