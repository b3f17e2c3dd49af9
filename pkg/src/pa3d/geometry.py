"""Point-cloud normalization, farthest-point sampling, kNN patching,
and training-time geometric augmentation.

Tie rules are total: distances compare on exact squared values, ties break
to the smallest index, so every result is reproducible and oracle-checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class DegenerateCloudError(ValueError):
    """All points coincide; the cloud cannot be scaled to the unit sphere."""


@dataclass
class PointCloud:
    """N xyz points with optional per-point multi-label part annotations.

    `labels[i]` is the list of part ids carried by point i (empty list =
    unlabeled); label ids index into a per-shape part list kept elsewhere.
    """

    points: np.ndarray                      # (N, 3) float64
    labels: list[list[int]] | None = None   # per-point part-id lists
    shape_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.labels is not None and len(self.labels) != len(self.points):
            raise ValueError("labels length does not match point count")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    """G patch centers plus per-patch membership of exactly k point indices.

    membership rows are sorted ascending and always contain the center's own
    index; centers[i] == points[center_index[i]].
    """

    centers: np.ndarray       # (G, 3)
    membership: np.ndarray    # (G, k) int64, each row sorted ascending
    center_index: np.ndarray  # (G,) int64

    @property
    def g(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.membership.shape[1]


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center at the origin and scale so the farthest point has norm 1."""
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    max_norm = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if max_norm <= 0.0:
        raise DegenerateCloudError(
            f"cloud '{cloud.shape_id}': all points coincide, max norm is 0")
    return PointCloud(points=centered / max_norm, labels=cloud.labels,
                      shape_id=cloud.shape_id)


def farthest_point_sampling(points: np.ndarray, g: int, seed_index: int) -> np.ndarray:
    """Greedy FPS: start at seed_index, then repeatedly take the point with
    the largest min squared distance to the selected set (ties -> smallest
    index). Returns (g,) int64 indices."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= g <= n:
        raise ValueError(f"FPS needs 1 <= G <= N, got G={g}, N={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range [0, {n})")

    selected = np.empty(g, dtype=np.int64)
    selected[0] = seed_index
    diff = points - points[seed_index]
    dist = (diff * diff).sum(axis=1)
    dist[seed_index] = -1.0  # selected points can never win argmax
    for i in range(1, g):
        nxt = int(np.argmax(dist))  # first occurrence = smallest index
        selected[i] = nxt
        diff = points - points[nxt]
        dist = np.minimum(dist, (diff * diff).sum(axis=1))
        dist[nxt] = -1.0
    return selected


def build_patches(points: np.ndarray, center_indices: np.ndarray, k: int) -> PatchSet:
    """kNN patches around each center: the center itself plus its k-1 nearest
    other points (ties -> smallest index). Membership rows sorted ascending."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"patch size k={k} exceeds point count N={n}")
    if k < 1:
        raise ValueError("patch size k must be >= 1")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    g = center_indices.shape[0]

    membership = np.empty((g, k), dtype=np.int64)
    for i, ci in enumerate(center_indices):
        diff = points - points[ci]
        d = (diff * diff).sum(axis=1)
        # stable sort on exact squared values: ascending distance, ties by index
        order = np.argsort(d, kind="stable")
        picked = [int(ci)]
        for idx in order:
            if len(picked) == k:
                break
            if idx != ci:
                picked.append(int(idx))
        membership[i] = np.sort(np.array(picked, dtype=np.int64))
    return PatchSet(centers=points[center_indices].copy(),
                    membership=membership,
                    center_index=center_indices.copy())


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for rotate -> scale -> translate -> jitter (applied in that order)."""

    rotation: str = "so3"          # "so3" | "z" | "none"
    translation: float = 0.1       # uniform in [-t, t]^3
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02

    def __post_init__(self):
        if self.rotation not in ("so3", "z", "none"):
            raise ValueError(f"unknown rotation mode '{self.rotation}'")
        if self.scale_lo <= 0:
            raise ValueError("scale_lo must be positive")
        if self.scale_hi < self.scale_lo:
            raise ValueError("scale_hi must be >= scale_lo")
        if self.jitter_clip < 0:
            raise ValueError("jitter_clip must be >= 0")
        if self.translation < 0:
            raise ValueError("translation range must be >= 0")

    def is_identity(self) -> bool:
        return (self.rotation == "none" and self.translation == 0.0
                and self.scale_lo == 1.0 and self.scale_hi == 1.0
                and self.jitter_sigma == 0.0)


IDENTITY_AUG = AugmentConfig(rotation="none", translation=0.0,
                             scale_lo=1.0, scale_hi=1.0,
                             jitter_sigma=0.0, jitter_clip=0.0)


def _random_rotation(rng: np.random.Generator, mode: str) -> np.ndarray:
    if mode == "none":
        return np.eye(3)
    if mode == "z":
        a = rng.uniform(0.0, 2.0 * math.pi)
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    # uniform over SO(3) via a random unit quaternion
    q = rng.standard_normal(4)
    q /= np.sqrt((q * q).sum())
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud: PointCloud, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> PointCloud:
    """Apply rotate -> scale -> translate -> jitter. Labels pass through
    untouched; an identity config returns the input points bitwise."""
    if cfg.is_identity():
        return replace(cloud, points=cloud.points.copy())
    pts = cloud.points
    rot = _random_rotation(rng, cfg.rotation)
    pts = pts @ rot.T
    s = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    pts = pts * s
    if cfg.translation > 0:
        pts = pts + rng.uniform(-cfg.translation, cfg.translation, size=3)
    if cfg.jitter_sigma > 0:
        noise = rng.standard_normal(pts.shape) * cfg.jitter_sigma
        np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip, out=noise)
        pts = pts + noise
    return replace(cloud, points=pts)
