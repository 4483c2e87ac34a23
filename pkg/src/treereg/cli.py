"""Command-line entry point.

Result rows go to stdout as CSV with a header line; the resolved
configuration and progress go to stderr, one line each.  Failures exit
nonzero with a single ``error: ...`` line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

RESULT_SCHEMAS = {
    "build-tree": ["depth", "nodes", "internal", "leaf", "virtual", "points"],
    "register": ["method", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "t1", "t2", "t3",
                 "iterations", "phi_deg", "dt"],
    "make-pair": ["name", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "t1", "t2", "t3"],
    "train": ["epoch", "train_loss", "val_loss", "sigma_r", "sigma_t", "skipped"],
    "eval": ["sample", "phi_deg", "dt"],
    "trajectory": ["frame", "x", "y", "z"],
    "gradcheck": ["check", "rel_error", "tol", "ok"],
    "bench": ["stage", "reps", "mean_ms", "std_ms", "median_ms"],
}


class CliError(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if v == v else ""
    return str(v)


def _emit(cmd: str, rows) -> None:
    out = sys.stdout
    out.write(",".join(RESULT_SCHEMAS[cmd]) + "\n")
    for r in rows:
        out.write(",".join(_fmt(v) for v in r) + "\n")
    out.flush()


def _log(msg: str) -> None:
    sys.stderr.write(msg.rstrip("\n") + "\n")


# ---------------------------------------------------------------- helpers


def _read_cloud(path: str):
    from .cloud_io import read_kitti_bin, read_xyz

    if not os.path.exists(path):
        raise CliError(f"no such file: {path}")
    if path.endswith(".bin"):
        return read_kitti_bin(path)
    return read_xyz(path)


def _read_transform(path: str):
    import numpy as np

    from .rigid import RigidTransform

    vals = np.loadtxt(path, dtype=np.float64).reshape(-1)
    if vals.size != 12:
        raise CliError(f"{path}: expected 12 numbers (3x4 [R|t]), got {vals.size}")
    m = vals.reshape(3, 4)
    return RigidTransform.nearest(m[:, :3], m[:, 3])


def _read_poses(path: str):
    import numpy as np

    from .rigid import RigidTransform

    rows = np.atleast_2d(np.loadtxt(path, dtype=np.float64, ndmin=2))
    if rows.shape[1] != 12:
        raise CliError(f"{path}: expected 12 numbers per line, got {rows.shape[1]}")
    return [RigidTransform.nearest(r.reshape(3, 4)[:, :3], r.reshape(3, 4)[:, 3]) for r in rows]


def _transform_row(t) -> list:
    return [float(v) for v in t.rotation.reshape(-1)] + [float(v) for v in t.translation]


def _load_model(path: str):
    from .training import Checkpoint

    if not os.path.exists(path):
        raise CliError(f"no such checkpoint: {path}")
    return Checkpoint.load(path).model()


# ---------------------------------------------------------------- subcommands


def cmd_build_tree(args) -> int:
    import numpy as np

    from .bh_tree import INTERNAL, LEAF, VIRTUAL, build_tree, dump_tree
    from .cloud_io import normalize_cloud

    cloud = _read_cloud(args.input)
    if args.normalize == "always" or (args.normalize == "auto" and np.abs(cloud.points).max() > 1.0):
        cloud, info = normalize_cloud(cloud)
        _log(f"normalized center={info.center.tolist()} scale={info.scale!r}")
    tree = build_tree(cloud, args.depth)
    if args.dump:
        dump_tree(tree, args.dump, include_virtual=args.include_virtual)
    rows = []
    for d in range(tree.max_depth + 1):
        lv = tree[d]
        kind = lv.kind
        rows.append((d, len(lv.codes), int(np.sum(kind == INTERNAL)), int(np.sum(kind == LEAF)),
                     int(np.sum(kind == VIRTUAL)), int(lv.count.sum())))
    _emit("build-tree", rows)
    return 0


def _register_rpsrnet(model, source, target, passes: int):
    from .cloud_io import normalize

    src_n, tgt_n, info = normalize((source, target))
    total, _ = model.register_iterative(src_n, tgt_n, passes)
    from .rigid import RigidTransform

    r, t = info.denormalize_transform(total.rotation, total.translation)
    return RigidTransform.nearest(r, t)


def cmd_register(args) -> int:
    from .rigid import angular_error, icp, procrustes, translation_error

    source, target = _read_cloud(args.source), _read_cloud(args.target)
    iterations = 1
    if args.method == "icp":
        res = icp(source, target, max_iters=args.max_iters)
        est, iterations = res.transform, res.iterations
    elif args.method == "procrustes-gt":
        if len(source) != len(target):
            raise CliError("procrustes-gt needs index-aligned clouds of equal size")
        est = procrustes(source.points, target.points)
    else:
        if not args.model:
            raise CliError("--model is required for --method rpsrnet")
        est = _register_rpsrnet(_load_model(args.model), source, target, args.passes)
        iterations = args.passes
    phi = dt = float("nan")
    if args.gt:
        gt = _read_transform(args.gt)
        phi = angular_error(gt.rotation, est.rotation)
        dt = translation_error(gt.translation, est.translation)
    _emit("register", [[args.method, *_transform_row(est), iterations, phi, dt]])
    return 0


def cmd_make_pair(args) -> int:
    from .cloud_io import PerturbationSpec, make_pair, write_xyz
    from .rigid import RigidTransform

    cloud = _read_cloud(args.input)
    seed = args.seed or 0
    spec = PerturbationSpec(args.perturbation, args.level, seed)
    pair = make_pair(cloud, spec, seed, args.max_angle, args.max_translation)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.join(args.out_dir, args.name)
    write_xyz(stem + "_source.xyz", pair.source)
    write_xyz(stem + "_target.xyz", pair.target)
    gt = RigidTransform(pair.rotation, pair.translation)
    with open(stem + "_gt.txt", "w") as fh:
        for row in gt.matrix[:3]:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    _emit("make-pair", [[args.name, *_transform_row(gt)]])
    return 0


def _resolved_config(args):
    from .config import load_config

    overrides = {"seed": args.seed, "profile": args.profile, "threads": args.threads}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return load_config(getattr(args, "config", None), overrides)


def cmd_train(args) -> int:
    from .training import desk_datasets, train, train_shapes

    cfg = _resolved_config(args)
    _log("config " + json.dumps(cfg.to_dict(), sort_keys=True))
    train_set, val_set = desk_datasets(cfg)
    result = train(cfg, train_set, val_set, log=lambda s: _log("epoch " + s), time_limit=args.time_limit,
                   shapes=train_shapes(cfg))
    result.best.save(args.out)
    _log(f"saved best checkpoint (epoch {result.best.epoch}) to {args.out}")
    _emit("train", [[h["epoch"], h["train_loss"], h["val_loss"], h["sigma_r"], h["sigma_t"], h["skipped"]]
                    for h in result.history])
    return 0


def _pair_dir_samples(path: str):
    """Pairs ``<name>_source.xyz``, ``<name>_target.xyz``, ``<name>_gt.txt`` under ``path``."""
    from .cloud_io import normalize
    from .training import Sample

    names = sorted(f[: -len("_source.xyz")] for f in os.listdir(path) if f.endswith("_source.xyz"))
    if not names:
        raise CliError(f"{path}: no *_source.xyz files")
    out = []
    for n in names:
        stem = os.path.join(path, n)
        src, tgt = _read_cloud(stem + "_source.xyz"), _read_cloud(stem + "_target.xyz")
        gt = _read_transform(stem + "_gt.txt")
        src_n, tgt_n, info = normalize((src, tgt))
        r, t = info.normalize_transform(gt.rotation, gt.translation)
        out.append(Sample(src_n, tgt_n, r, t, info, False))
    return names, out


def cmd_eval(args) -> int:
    from .training import Checkpoint, desk_datasets, evaluate

    if not os.path.exists(args.model):
        raise CliError(f"no such checkpoint: {args.model}")
    ckpt = Checkpoint.load(args.model)
    model = ckpt.model()
    if args.data == "desk-val":
        _, samples = desk_datasets(ckpt.config)
        names = [f"val{i:03d}" for i in range(len(samples))]
    elif os.path.isdir(args.data):
        names, samples = _pair_dir_samples(args.data)
    else:
        raise CliError(f"--data must be a directory of pairs or 'desk-val', got {args.data!r}")
    res = evaluate(model, samples, args.passes)
    rows = [[names[i], phi, dt] for i, phi, dt in res.rows]
    rows.append(["rmse", res.phi_rmse, res.t_rmse])
    rows.append(["mean", res.phi_mean, res.t_mean])
    _emit("eval", rows)
    if res.failures:
        _log(f"{res.failures} samples fell back to the identity (rank-deficient head)")
    return 0


def cmd_trajectory(args) -> int:
    from .rigid import compose_trajectory

    poses = _read_poses(args.poses)
    pts = compose_trajectory(poses, probe=tuple(args.probe))
    _emit("trajectory", [[i + 1, *map(float, p)] for i, p in enumerate(pts)])
    return 0


def cmd_gradcheck(args) -> int:
    from .diagnostics import run_gradchecks

    rows = run_gradchecks(args.seed or 0, include_pipeline=not args.no_pipeline)
    _emit("gradcheck", [[n, e, tol, int(e <= tol)] for n, e, tol in rows])
    bad = [n for n, e, tol in rows if e > tol]
    if bad:
        _log("gradient check failed: " + " ".join(bad))
        return 1
    return 0


def cmd_bench(args) -> int:
    import numpy as np

    from .cloud_io import euler_rotation, normalize, normalize_cloud
    from .config import RunConfig
    from .diagnostics import bench_inference, bench_tree
    from .model import Model

    if args.reps < 20:
        raise CliError("--reps must be at least 20")
    cloud = _read_cloud(args.input)
    if np.abs(cloud.points).max() > 1.0:
        cloud, _ = normalize_cloud(cloud)
    rows = [bench_tree(cloud, args.depth, args.reps)]
    if not args.skip_inference:
        model = _load_model(args.model) if args.model else Model(RunConfig(max_depth=max(args.depth, 5)))
        rng = np.random.default_rng(args.seed or 0)
        moved = cloud.with_points(cloud.points @ euler_rotation(*rng.uniform(-0.2, 0.2, 3)).T)
        src, tgt, _ = normalize((cloud, moved))
        rows.append(bench_inference(model, src, tgt, args.reps))
    _emit("bench", [[t.stage, t.reps, t.mean_ms, t.std_ms, t.median_ms] for t in rows])
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (env TREEREG_SEED)")
    common.add_argument("--profile", choices=("float64", "float32"), default=None, help="dtype profile (env TREEREG_PROFILE)")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads; 0 keeps the library default")

    p = argparse.ArgumentParser(prog="treereg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-tree", parents=[common], help="build a tree and report per-depth node counts")
    s.add_argument("--input", required=True)
    s.add_argument("--depth", type=int, default=6)
    s.add_argument("--dump")
    s.add_argument("--include-virtual", action="store_true")
    s.add_argument("--normalize", choices=("auto", "always", "never"), default="auto")
    s.set_defaults(func=cmd_build_tree)

    s = sub.add_parser("register", parents=[common], help="estimate the transform mapping source onto target")
    s.add_argument("--method", choices=("icp", "procrustes-gt", "rpsrnet"), required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--model")
    s.add_argument("--passes", type=int, default=1)
    s.add_argument("--gt", help="3x4 [R|t] ground truth for error columns")
    s.add_argument("--max-iters", type=int, default=50)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("make-pair", parents=[common], help="write a perturbed source/target pair with ground truth")
    s.add_argument("--input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--name", default="pair")
    s.add_argument("--perturbation", default="clean", choices=("clean", "gaussian_noise", "uniform_noise", "crop", "jitter"))
    s.add_argument("--level", type=float, default=0.0)
    s.add_argument("--max-angle", type=float, default=45.0)
    s.add_argument("--max-translation", type=float, default=0.5)
    s.set_defaults(func=cmd_make_pair)

    s = sub.add_parser("train", parents=[common], help="train on synthetic shapes, keep the best checkpoint")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--time-limit", type=float, help="time budget in seconds; no epoch starts that would overrun it")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="per-sample errors and RMSE of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, help="directory of pairs, or 'desk-val'")
    s.add_argument("--passes", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("trajectory", parents=[common], help="compose relative poses into probe positions")
    s.add_argument("--poses", required=True, help="one 3x4 [R|t] per line")
    s.add_argument("--probe", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every differentiable op")
    s.add_argument("--no-pipeline", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="tree build and inference wall times")
    s.add_argument("--input", required=True)
    s.add_argument("--depth", type=int, default=6)
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--model")
    s.add_argument("--skip-inference", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .autodiff import set_profile
    from .config import ENV_PROFILE, ENV_SEED

    if args.seed is None and ENV_SEED in os.environ:
        args.seed = int(os.environ[ENV_SEED])
    if args.profile is None:
        args.profile = os.environ.get(ENV_PROFILE)
    if args.command != "train":
        _log("config " + json.dumps({k: v for k, v in sorted(vars(args).items()) if k != "func"}))
    try:
        set_profile(args.profile or "float64")
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        _log(f"error: {' '.join(str(exc).split())}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
