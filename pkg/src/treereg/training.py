"""Iterative registration loss, optimizer, training loop, evaluation and checkpoints."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, no_grad, ops, profile
from .cloud_io import NormalizationInfo, PerturbationSpec, PointCloud, make_pair, normalize, normalize_cloud, random_rotation, synth_shapes
from .config import RunConfig
from .model import Model
from .rigid import RankDeficientError, angular_error, rmse_aggregate, translation_error

CHECKPOINT_MAGIC = b"TREEREG-CHECKPOINT"
CHECKPOINT_VERSION = 1
VAL_SEED_OFFSET = 7919
RESAMPLE_STRIDE = 104729
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- loss


@dataclass
class LossState:
    sigma_r: float = 0.0
    sigma_t: float = 0.0


def loss_pass(r_pred, t_pred, r_gt: np.ndarray, t_gt: np.ndarray, sigma_r, sigma_t) -> Tensor:
    """exp(-s_R) ||R_pred^T R_gt - I||_F^2 + s_R + exp(-s_t) ||t_pred - t_gt||^2 + s_t."""
    lr = ops.sum_squares(ops.sub(ops.matmul(ops.transpose(r_pred), Tensor(r_gt)), Tensor(np.eye(3))))
    lt = ops.sum_squares(ops.sub(t_pred, Tensor(t_gt)))
    sigma_r, sigma_t = ops._t(sigma_r), ops._t(sigma_t)
    rot = ops.add(ops.mul(ops.exp(ops.neg(sigma_r)), lr), sigma_r)
    trans = ops.add(ops.mul(ops.exp(ops.neg(sigma_t)), lt), sigma_t)
    return ops.add(rot, trans)


def pass_weights(k0: int, start: int = 0) -> np.ndarray:
    return 0.5 ** (np.arange(k0) + start)


def total_loss(pass_losses: Sequence, start: int = 0) -> Tensor:
    """Sum of per-pass losses weighted (1/2)^k, k counted from ``start``."""
    if not pass_losses:
        raise ValueError("need at least one pass")
    total = None
    for w, l in zip(pass_weights(len(pass_losses), start), pass_losses):
        term = ops.mul(l, float(w))
        total = term if total is None else ops.add(total, term)
    return total


# ---------------------------------------------------------------- optimizer


class Adam:
    """Per-parameter first/second moment estimates with bias correction."""

    def __init__(self, names: Sequence[str], lr: float = 1e-3, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.names = list(names)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name in self.names:
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params: dict, names: Sequence[str], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * scale
    return norm


# ---------------------------------------------------------------- data


@dataclass
class Sample:
    """A registration pair in its union-normalized frame with ground truth mapping source onto target."""

    source: PointCloud
    target: PointCloud
    rotation: np.ndarray
    translation: np.ndarray
    info: NormalizationInfo
    noisy: bool
    views: Optional[tuple] = field(default=None, repr=False)

    def world_error(self, rotation: np.ndarray, translation: np.ndarray) -> tuple[float, float]:
        """Angular (deg) and translation errors measured in the original units."""
        r_gt, t_gt = self.info.denormalize_transform(self.rotation, self.translation)
        r_p, t_p = self.info.denormalize_transform(rotation, translation)
        return angular_error(r_gt, r_p), translation_error(t_gt, t_p)


def make_samples(count: int, seed: int, cfg: RunConfig, shapes: Optional[Sequence[PointCloud]] = None,
                 pair_seed: Optional[int] = None) -> list[Sample]:
    """Synthetic pairs: rotations up to ``max_angle``, translations up to ``max_translation``,
    a ``noise_share`` fraction of sources with ``noise_level`` Gaussian outliers added.

    ``shapes`` reuses existing clouds; ``pair_seed`` (default ``seed``) drives the
    transforms and noise, so fresh pairs can be drawn from fixed shapes.
    """
    shapes = synth_shapes(count, seed) if shapes is None else list(shapes)[:count]
    pair_seed = seed if pair_seed is None else pair_seed
    rng = np.random.default_rng([pair_seed, 1])
    noisy = rng.random(len(shapes)) < cfg.noise_share
    out = []
    for i, shape in enumerate(shapes):
        spec = PerturbationSpec("gaussian_noise", cfg.noise_level, i) if noisy[i] else PerturbationSpec("clean", 0.0, i)
        pair = make_pair(shape, spec, pair_seed, cfg.max_angle, cfg.max_translation)
        src, tgt, info = normalize((pair.source, pair.target))
        r, t = info.normalize_transform(pair.rotation, pair.translation)
        out.append(Sample(src, tgt, r, t, info, bool(noisy[i])))
    return out


def desk_datasets(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    return make_samples(cfg.train_count, cfg.seed, cfg), make_samples(cfg.val_count, cfg.seed + VAL_SEED_OFFSET, cfg)


def train_shapes(cfg: RunConfig) -> list[PointCloud]:
    return synth_shapes(cfg.train_count, cfg.seed)


def rotate_shapes(shapes: Sequence[PointCloud], seed: int) -> list[PointCloud]:
    """Each shape under its own uniform random rotation about the origin, renormalized."""
    rng = np.random.default_rng([seed, 3])
    return [normalize_cloud(c.with_points(c.points @ random_rotation(rng).T))[0] for c in shapes]


def _first_views(model: Model, sample: Sample):
    if sample.views is None:
        sample.views = (model.build_view(sample.source), model.build_view(sample.target))
    return sample.views


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    rows: list  # (index, angular error deg, translation error)
    phi_rmse: float
    t_rmse: float
    phi_mean: float
    t_mean: float
    failures: int = 0


def _summarize(rows: list, failures: int = 0) -> EvalResult:
    phi = [r[1] for r in rows]
    tr = [r[2] for r in rows]
    return EvalResult(rows, rmse_aggregate(phi), rmse_aggregate(tr), float(np.mean(phi)), float(np.mean(tr)), failures)


def evaluate(model: Model, samples: Sequence[Sample], passes: int) -> EvalResult:
    """Per-sample errors after ``passes`` passes; a rank-deficient head counts as the identity."""
    rows = []
    failures = 0
    with no_grad():
        for i, s in enumerate(samples):
            try:
                trace = model.passes(s.source, s.target, passes, _first_views(model, s))
                r, t = trace.rotations[-1].data, trace.translations[-1].data
            except RankDeficientError:
                failures += 1
                r, t = np.eye(3), np.zeros(3)
            rows.append((i, *s.world_error(r, t)))
    return _summarize(rows, failures)


def evaluate_identity(samples: Sequence[Sample]) -> EvalResult:
    return _summarize([(i, *s.world_error(np.eye(3), np.zeros(3))) for i, s in enumerate(samples)])


def validation_loss(model: Model, samples: Sequence[Sample], passes: int) -> float:
    """Mean unweighted L_R + L_t of the last pass; independent of the learned scales."""
    vals = []
    with no_grad():
        for s in samples:
            try:
                trace = model.passes(s.source, s.target, passes, _first_views(model, s))
                l = loss_pass(trace.rotations[-1], trace.translations[-1], s.rotation, s.translation, 0.0, 0.0)
                vals.append(float(l.data))
            except RankDeficientError:
                vals.append(float(np.sum((np.eye(3) - s.rotation) ** 2) + np.sum(s.translation**2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict  # name -> ndarray
    optimizer: dict  # {"step": int, "m": {...}, "v": {...}}
    epoch: int
    rng_state: dict
    metrics: dict = field(default_factory=dict)

    @property
    def loss_state(self) -> LossState:
        return LossState(float(self.params["loss.sigma_r"]), float(self.params["loss.sigma_t"]))

    def model(self) -> Model:
        return Model(self.config, {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        arrays = []
        for name in sorted(self.params):
            arrays.append(("param/" + name, self.params[name]))
        for kind in ("m", "v"):
            for name in sorted(self.optimizer.get(kind, {})):
                arrays.append((f"adam.{kind}/" + name, self.optimizer[kind][name]))
        entries = []
        blobs = []
        offset = 0
        for name, arr in arrays:
            a = np.ascontiguousarray(arr, dtype="<f8")
            raw = a.tobytes()
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "dtype": "<f8",
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "adam_step": int(self.optimizer.get("step", 0)),
            "rng_state": self.rng_state,
            "metrics": self.metrics,
            "arrays": entries,
        }
        text = json.dumps(header, sort_keys=True).encode()
        return b"%s %d\n%d\n" % (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)) + text + b"\n" + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            magic_line, rest = data.split(b"\n", 1)
            magic, version = magic_line.split(b" ")
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError("not a checkpoint file")
            if int(version) != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {int(version)}")
            size_line, rest = rest.split(b"\n", 1)
            size = int(size_line)
            header = json.loads(rest[:size])
            blob = rest[size + 1:]
        except CheckpointError:
            raise
        except (ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None
        params, m, v = {}, {}, {}
        for e in header["arrays"]:
            chunk = blob[e["offset"]: e["offset"] + e["nbytes"]]
            if len(chunk) != e["nbytes"]:
                raise CheckpointError("truncated checkpoint")
            arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
            kind, name = e["name"].split("/", 1)
            {"param": params, "adam.m": m, "adam.v": v}[kind][name] = arr
        cfg = RunConfig.from_dict(header["config"])
        return cls(cfg, params, {"step": header["adam_step"], "m": m, "v": v}, header["epoch"], header["rng_state"], header["metrics"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def snapshot(model: Model, opt: Adam, epoch: int, rng: np.random.Generator, metrics: Optional[dict] = None) -> Checkpoint:
    params = {k: np.array(p.data, dtype=np.float64) for k, p in model.params.items()}
    optim = {
        "step": opt.step_count,
        "m": {k: np.array(a, dtype=np.float64) for k, a in opt.m.items()},
        "v": {k: np.array(a, dtype=np.float64) for k, a in opt.v.items()},
    }
    return Checkpoint(model.cfg, params, optim, epoch, rng.bit_generator.state, dict(metrics or {}))


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list  # one dict per epoch
    elapsed: float


def sample_loss(model: Model, sample: Sample, cfg: RunConfig) -> Tensor:
    trace = model.passes(sample.source, sample.target, cfg.k0, _first_views(model, sample))
    sr, st = model.params["loss.sigma_r"], model.params["loss.sigma_t"]
    per_pass = [loss_pass(r, t, sample.rotation, sample.translation, sr, st) for r, t in zip(trace.rotations, trace.translations)]
    return total_loss(per_pass, cfg.pass_index_start)


def train(
    cfg: RunConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    epochs: Optional[int] = None,
    log: Optional[Callable[[str], None]] = None,
    time_limit: Optional[float] = None,
    model: Optional[Model] = None,
    shapes: Optional[Sequence[PointCloud]] = None,
) -> TrainResult:
    """Minimize the iterative loss with Adam; keeps the checkpoint with the lowest validation loss.

    With ``shapes`` and ``cfg.resample_pairs`` every epoch after the first draws
    fresh transforms and noise for the same shapes; ``cfg.augment_rotation``
    also turns each shape by a random rotation first.  ``time_limit`` (seconds)
    is a budget: no epoch is started that would end past it if it took as long
    as the previous one.
    """
    cfg.validate()
    epochs = cfg.epochs if epochs is None else epochs
    start = time.perf_counter()
    with profile(cfg.profile):
        model = model or Model(cfg)
        opt = Adam(model.names(), cfg.learning_rate)
        rng = np.random.default_rng([cfg.seed, 2])
        names = model.names()
        history = []
        best: Optional[Checkpoint] = None
        best_score = math.inf
        last = snapshot(model, opt, 0, rng)
        for epoch in range(1, epochs + 1):
            epoch_start = time.perf_counter()
            if shapes is not None and cfg.resample_pairs and epoch > 1:
                pair_seed = cfg.seed + RESAMPLE_STRIDE * epoch
                epoch_shapes = rotate_shapes(shapes, pair_seed) if cfg.augment_rotation else shapes
                train_set = make_samples(len(shapes), cfg.seed, cfg, epoch_shapes, pair_seed=pair_seed)
            order = rng.permutation(len(train_set))
            losses = []
            skipped = 0
            for b in range(0, len(order), cfg.batch):
                batch = order[b: b + cfg.batch]
                model.zero_grad()
                used = 0
                for i in batch:
                    try:
                        with Tape() as tape:
                            loss = sample_loss(model, train_set[i], cfg)
                            if not np.isfinite(loss.data):
                                raise TrainingError(f"loss diverged at epoch {epoch}")
                            backward(tape, loss)
                    except RankDeficientError:
                        skipped += 1
                        continue
                    losses.append(float(loss.data))
                    used += 1
                if not used:
                    continue
                for n in names:
                    if model.params[n].grad is not None:
                        model.params[n].grad = model.params[n].grad / used
                clip_grad_norm(model.params, names, cfg.grad_clip)
                opt.step(model.params)
            val = validation_loss(model, val_set, cfg.k0) if val_set else float(np.mean(losses))
            rec = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else math.nan,
                "val_loss": val,
                "skipped": skipped,
                "sigma_r": float(model.params["loss.sigma_r"].data),
                "sigma_t": float(model.params["loss.sigma_t"].data),
                "elapsed": time.perf_counter() - start,
            }
            history.append(rec)
            if log:
                log(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
            last = snapshot(model, opt, epoch, rng, {"val_loss": val})
            if val < best_score:
                best_score = val
                best = last
            if time_limit is not None:
                # stop when another epoch as long as this one would overrun the budget
                now = time.perf_counter()
                if (now - start) + (now - epoch_start) > time_limit:
                    break
    return TrainResult(best or last, last, history, time.perf_counter() - start)
