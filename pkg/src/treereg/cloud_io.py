"""Point cloud ingestion, normalization and synthetic pair generation."""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class CloudError(ValueError):
    """Raised for unreadable or invalid point clouds."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    channels: Optional[np.ndarray] = None
    frame_id: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must have shape (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise CloudError("empty cloud")
        if not np.all(np.isfinite(pts)):
            raise CloudError("non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.channels is not None:
            ch = np.asarray(self.channels, dtype=np.float64)
            if ch.ndim == 1:
                ch = ch[:, None]
            if len(ch) != len(pts):
                raise CloudError("channel rows do not match point count")
            object.__setattr__(self, "channels", _frozen(ch))

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray, keep: Optional[np.ndarray] = None) -> "PointCloud":
        """Copy with new positions; ``keep`` selects the surviving channel rows."""
        ch = self.channels
        if ch is not None:
            ch = ch[keep] if keep is not None else ch
            if len(ch) != len(points):
                ch = None
        return PointCloud(points, ch, self.frame_id)


@dataclass(frozen=True)
class NormalizationInfo:
    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.center

    def denormalize_transform(self, rotation: np.ndarray, translation: np.ndarray):
        """Map a transform estimated in the normalized frame back to input units.

        With x' = (x - c)/s, a normalized-frame map y' -> R y' + t' becomes
        y -> R y + s t' + c - R c.
        """
        rotation = np.asarray(rotation, dtype=np.float64)
        t = self.scale * np.asarray(translation, dtype=np.float64) + self.center - rotation @ self.center
        return rotation, t

    def normalize_transform(self, rotation: np.ndarray, translation: np.ndarray):
        rotation = np.asarray(rotation, dtype=np.float64)
        t = (rotation @ self.center + np.asarray(translation, dtype=np.float64) - self.center) / self.scale
        return rotation, t


# ---------------------------------------------------------------- readers


def read_xyz(path: str | os.PathLike) -> PointCloud:
    """Read whitespace-separated ASCII points; '#' starts a comment."""
    rows = []
    width = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) < 3:
                raise CloudError(f"{path}:{lineno}: expected at least 3 fields, got {len(fields)}")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise CloudError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise CloudError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise CloudError("empty cloud")
    data = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0])
        raise CloudError(f"{path}: non-finite value in data row {bad + 1}")
    channels = data[:, 3:] if data.shape[1] > 3 else None
    return PointCloud(data[:, :3], channels)


def write_xyz(path: str | os.PathLike, cloud: PointCloud) -> None:
    data = cloud.points
    if cloud.channels is not None:
        data = np.hstack([data, cloud.channels])
    np.savetxt(path, data, fmt="%.17g")


def read_kitti_bin(path: str | os.PathLike, frame_id: Optional[int] = None) -> PointCloud:
    """Decode a KITTI velodyne scan: little-endian float32 (x, y, z, reflectance)."""
    size = os.path.getsize(path)
    if size == 0:
        raise CloudError("empty cloud")
    if size % 16:
        raise CloudError(f"{path}: size {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(raw)):
        raise CloudError(f"{path}: non-finite values")
    return PointCloud(raw[:, :3], raw[:, 3:4], frame_id)


def write_kitti_bin(path: str | os.PathLike, cloud: PointCloud) -> None:
    refl = cloud.channels[:, :1] if cloud.channels is not None else np.zeros((len(cloud), 1))
    np.hstack([cloud.points, refl]).astype("<f4").tofile(path)


def kitti_pairs(paths: Sequence[str], stride: int = 5) -> list[tuple[str, str]]:
    """Pair frame f with frame f + stride over a sorted sequence of scans."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ordered = sorted(paths)
    return [(ordered[i], ordered[i + stride]) for i in range(len(ordered) - stride)]


# ---------------------------------------------------------------- normalization


def _bbox_info(points: np.ndarray) -> NormalizationInfo:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(np.max(0.5 * (hi - lo)))
    if not scale > 0:
        raise CloudError("degenerate bounding box: all points identical")
    return NormalizationInfo(center, scale)


def _clip_unit(p: np.ndarray) -> np.ndarray:
    # rounding in (p - c)/s can overshoot the box by an ulp
    return np.clip(p, -1.0, 1.0)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizationInfo]:
    info = _bbox_info(cloud.points)
    return cloud.with_points(_clip_unit(info.apply(cloud.points))), info


def normalize(pair: tuple[PointCloud, PointCloud]) -> tuple[PointCloud, PointCloud, NormalizationInfo]:
    """Scale both clouds into [-1, 1]^3 with one shared center and scale."""
    a, b = pair
    info = _bbox_info(np.vstack([a.points, b.points]))
    return (
        a.with_points(_clip_unit(info.apply(a.points))),
        b.with_points(_clip_unit(info.apply(b.points))),
        info,
    )


# ---------------------------------------------------------------- perturbations


class Perturbation(str, enum.Enum):
    CLEAN = "clean"
    GAUSSIAN_NOISE = "gaussian_noise"
    UNIFORM_NOISE = "uniform_noise"
    CROP = "crop"
    JITTER = "jitter"


GAUSSIAN_SIGMA = 0.02
UNIFORM_RANGE = 1.0


@dataclass(frozen=True)
class PerturbationSpec:
    kind: Perturbation = Perturbation.CLEAN
    level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Perturbation(self.kind))
        lvl = float(self.level)
        if not math.isfinite(lvl) or lvl < 0:
            raise ValueError(f"invalid level {self.level!r} for {self.kind.value}")
        if self.kind in (Perturbation.GAUSSIAN_NOISE, Perturbation.UNIFORM_NOISE) and lvl > 1:
            raise ValueError(f"noise fraction must lie in [0, 1], got {lvl}")
        if self.kind is Perturbation.CROP and lvl >= 1:
            raise ValueError(f"crop fraction must lie in [0, 1), got {lvl}")
        if self.kind is Perturbation.JITTER and lvl > 1:
            raise ValueError(f"jitter tolerance must lie in [0, 1], got {lvl}")


@dataclass(frozen=True)
class TrainSample:
    source: PointCloud
    target: PointCloud
    rotation: np.ndarray
    translation: np.ndarray
    spec: PerturbationSpec
    angles_deg: np.ndarray
    crop_plane: Optional[tuple[np.ndarray, float]] = None
    extra: dict = field(default_factory=dict)


def euler_rotation(ax: float, ay: float, az: float) -> np.ndarray:
    """R = Rz @ Ry @ Rx for angles in radians."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _uniform_open_low(rng: np.random.Generator, high: float, size) -> np.ndarray:
    # samples in (0, high]
    return high - rng.uniform(0.0, high, size)


def perturb(cloud: PointCloud, spec: PerturbationSpec, rng: np.random.Generator):
    """Apply ``spec`` to ``cloud``; returns (cloud, crop_plane or None)."""
    pts = cloud.points
    n = len(pts)
    kind = spec.kind
    if kind is Perturbation.CLEAN or spec.level == 0:
        return cloud, None
    if kind is Perturbation.GAUSSIAN_NOISE:
        k = int(round(spec.level * n))
        base = pts[rng.integers(0, n, size=k)]
        extra = base + rng.normal(0.0, GAUSSIAN_SIGMA, size=(k, 3))
        return PointCloud(np.vstack([pts, extra]), None, cloud.frame_id), None
    if kind is Perturbation.UNIFORM_NOISE:
        k = int(round(spec.level * n))
        extra = rng.uniform(-UNIFORM_RANGE, UNIFORM_RANGE, size=(k, 3))
        return PointCloud(np.vstack([pts, extra]), None, cloud.frame_id), None
    if kind is Perturbation.CROP:
        k = int(round(spec.level * n))
        if k >= n:
            raise ValueError("crop would remove every point")
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        proj = pts @ normal
        order = np.argsort(proj, kind="stable")
        keep = np.sort(order[: n - k])
        if k == 0:
            return cloud, None
        offset = 0.5 * (proj[order[n - k - 1]] + proj[order[n - k]])
        return cloud.with_points(pts[keep], keep), (normal, float(offset))
    if kind is Perturbation.JITTER:
        moved = pts + rng.uniform(-spec.level, spec.level, size=pts.shape)
        return cloud.with_points(moved), None
    raise ValueError(f"unknown perturbation {kind}")


def make_pair(
    source: PointCloud,
    spec: PerturbationSpec,
    rng_seed: int,
    max_angle_deg: float = 45.0,
    max_translation: float = 0.5,
) -> TrainSample:
    """Target = R source + t from the clean source; the perturbation hits the source.

    Euler angles are drawn from (0, max_angle_deg], translations from
    [-max_translation, max_translation].
    """
    rng = np.random.default_rng([int(rng_seed), int(spec.seed)])
    angles = _uniform_open_low(rng, max_angle_deg, 3)
    rot = euler_rotation(*np.deg2rad(angles))
    trans = rng.uniform(-max_translation, max_translation, 3)
    target = PointCloud(source.points @ rot.T + trans, source.channels, source.frame_id)
    src, plane = perturb(source, spec, rng)
    return TrainSample(src, target, rot, trans, spec, angles, plane)


# ---------------------------------------------------------------- synthetic shapes

PRIMITIVES = ("sphere", "box", "plane", "lines")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sample_primitive(kind: str, n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    """Sample ``n`` points of a unit-sized primitive centered at the origin."""
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        p = v / np.linalg.norm(v, axis=1, keepdims=True)
    elif kind == "box":
        half = rng.uniform(0.3, 1.0, 3)
        areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        p = rng.uniform(-1, 1, size=(n, 3)) * half
        sign = rng.choice([-1.0, 1.0], size=n)
        p[np.arange(n), axis] = sign * half[axis]
    elif kind == "plane":
        extent = rng.uniform(0.4, 1.0, 2)
        p = np.zeros((n, 3))
        p[:, :2] = rng.uniform(-1, 1, size=(n, 2)) * extent
    elif kind == "lines":
        k = int(rng.integers(2, 5))
        which = rng.integers(0, k, size=n)
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        offs = rng.uniform(-0.5, 0.5, size=(k, 3))
        s = rng.uniform(-1, 1, size=n)
        p = offs[which] + s[:, None] * dirs[which]
    else:
        raise ValueError(f"unknown primitive {kind!r}")
    if noise:
        p = p + rng.normal(0.0, noise, size=p.shape)
    return p


def synth_shapes(count: int, rng_seed: int, min_points: int = 512, max_points: int = 4096) -> list[PointCloud]:
    """Deterministic mixtures of 2-4 randomly placed primitives, each normalized."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(int(rng_seed))
    clouds = []
    for _ in range(count):
        total = int(rng.integers(min_points, max_points + 1))
        parts = int(rng.integers(2, 5))
        kinds = rng.choice(PRIMITIVES, size=parts)
        split = rng.multinomial(total - 8 * parts, np.full(parts, 1.0 / parts)) + 8
        chunks = []
        for kind, m in zip(kinds, split):
            p = sample_primitive(str(kind), int(m), rng, noise=0.005)
            p = p * rng.uniform(0.2, 0.6) @ random_rotation(rng).T + rng.uniform(-0.7, 0.7, 3)
            chunks.append(p)
        cloud, _ = normalize_cloud(PointCloud(np.vstack(chunks)))
        clouds.append(cloud)
    return clouds
