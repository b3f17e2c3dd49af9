"""Multi-view pinhole projection with z-buffer visibility, and
back-projection of dense 2D feature fields to per-point / per-patch
features.

Visibility rule: a point is visible in a view iff it lands inside the
frustum and its depth is within DEPTH_TOLERANCE of the per-pixel minimum
depth (1-pixel splats). Lifting averages observing views in ascending
view_id order; points seen nowhere inherit the feature of their nearest
visible neighbor.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import PatchSet

DEPTH_TOLERANCE = 1e-3   # z-buffer acceptance band, normalized units
DEFAULT_RESOLUTION = 128
DEFAULT_FOV = math.radians(50.0)
DEFAULT_RADIUS = 2.2


class LiftError(RuntimeError):
    """Raised when no point is visible in any view."""


@dataclass
class Camera:
    position: np.ndarray      # (3,)
    look_at: np.ndarray       # (3,)
    up: np.ndarray            # (3,)
    vertical_fov: float       # radians
    resolution: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        fwd = self.look_at - self.position
        nf = np.linalg.norm(fwd)
        if nf == 0:
            raise ValueError("camera position coincides with look_at")
        if not 0 < self.vertical_fov < math.pi:
            raise ValueError(f"vertical_fov {self.vertical_fov} outside (0, pi)")
        cross = np.cross(fwd / nf, self.up / np.linalg.norm(self.up))
        if np.linalg.norm(cross) < 1e-9:
            raise ValueError("camera up vector is parallel to the view direction")


@dataclass
class FeatureField:
    """Dense 2D features of one rendered view at pixel resolution."""

    view_id: int
    grid: np.ndarray   # (H, W, D)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValueError(f"feature grid must be (H, W, D), got {self.grid.shape}")


@dataclass
class FeatureCache:
    """Cached lifting products for one shape: the patch centers the targets
    were computed at, the per-patch target vectors, and (optionally) the
    per-point lifted features. Carries the source cloud and its labels so a
    cache directory is a self-contained training sample.
    """

    shape_id: str
    centers: np.ndarray                     # (G_c, 3)
    patch_targets: np.ndarray               # (G_c, D)
    membership: np.ndarray | None = None    # (G_c, k) int
    point_features: np.ndarray | None = None  # (N, D)
    points: np.ndarray | None = None        # (N, 3)
    labels: list[list[int]] | None = None
    part_ids: list[str] = field(default_factory=list)
    provenance: str = "synthetic"
    category: str = ""
    seed: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.patch_targets = np.asarray(self.patch_targets, dtype=np.float64)
        if self.centers.shape[0] != self.patch_targets.shape[0]:
            raise ValueError(
                f"cache rows disagree: {self.centers.shape[0]} centers vs "
                f"{self.patch_targets.shape[0]} targets")
        if not np.all(np.isfinite(self.patch_targets)):
            raise ValueError("cache targets contain non-finite values")

    @property
    def feature_dim(self) -> int:
        return self.patch_targets.shape[1]


def worker_count() -> int:
    """PA3D_THREADS caps per-view workers; 0 (default) means serial."""
    try:
        return max(0, int(os.environ.get("PA3D_THREADS", "0")))
    except ValueError:
        return 0


def make_view_rig(n_views: int, radius: float, elevations: list[float],
                  fov: float = DEFAULT_FOV,
                  resolution: int = DEFAULT_RESOLUTION) -> list[Camera]:
    """Cameras looking at the origin, spread evenly in azimuth over the
    given elevation rings (radians). View r sits on ring r % len(rings)."""
    if n_views < 1:
        raise ValueError("need at least one view")
    if radius <= 1.0:
        raise ValueError(
            f"rig radius {radius} must exceed 1 (unit-sphere clouds)")
    if not elevations:
        raise ValueError("need at least one elevation ring")

    n_rings = len(elevations)
    per_ring = [n_views // n_rings + (1 if r < n_views % n_rings else 0)
                for r in range(n_rings)]
    cams = []
    for elev, count in zip(elevations, per_ring):
        for j in range(count):
            azim = 2.0 * math.pi * j / count
            ce, se = math.cos(elev), math.sin(elev)
            pos = radius * np.array([ce * math.cos(azim), ce * math.sin(azim), se])
            up = np.array([0.0, 0.0, 1.0]) if abs(se) < 0.99 \
                else np.array([1.0, 0.0, 0.0])
            cams.append(Camera(position=pos, look_at=np.zeros(3), up=up,
                               vertical_fov=fov, resolution=(resolution, resolution)))
    return cams


def _camera_basis(cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    fwd = cam.look_at - cam.position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, cam.up)
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    return right, true_up, fwd


def project_visible(points: np.ndarray, cam: Camera):
    """Pinhole projection with a per-pixel min-depth buffer.

    Returns (u, v, depth, visible): integer pixel coords, camera-space
    depth, and the visibility flags. Points behind the camera or outside
    the image are not visible.
    """
    points = np.asarray(points, dtype=np.float64)
    right, true_up, fwd = _camera_basis(cam)
    rel = points - cam.position
    x = rel @ right
    y = rel @ true_up
    z = rel @ fwd
    w, h = cam.resolution
    focal = (h / 2.0) / math.tan(cam.vertical_fov / 2.0)

    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    uc = w / 2.0 + focal * (x / zs)
    vc = h / 2.0 + focal * (y / zs)
    u = np.floor(uc).astype(np.int64)
    v = np.floor(vc).astype(np.int64)
    in_frame = in_front & (u >= 0) & (u < w) & (v >= 0) & (v < h)

    zbuf = np.full((h, w), np.inf)
    idx = np.nonzero(in_frame)[0]
    np.minimum.at(zbuf, (v[idx], u[idx]), z[idx])

    visible = np.zeros(len(points), dtype=bool)
    visible[idx] = z[idx] <= zbuf[v[idx], u[idx]] + DEPTH_TOLERANCE

    u = np.where(in_frame, u, -1)
    v = np.where(in_frame, v, -1)
    return u, v, z, visible


def lift_point_features(points: np.ndarray, cameras: list[Camera],
                        fields: list[FeatureField]) -> np.ndarray:
    """Per-point features: mean of observed field values over views
    (ascending view_id), nearest-visible fill for unobserved points."""
    if len(cameras) != len(fields):
        raise ValueError(f"{len(cameras)} cameras but {len(fields)} fields")
    dims = {f.grid.shape[2] for f in fields}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims across views: {sorted(dims)}")
    ids = [f.view_id for f in fields]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate view_id in fields")

    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    dim = dims.pop()
    order = sorted(range(len(fields)), key=lambda r: fields[r].view_id)

    nthreads = worker_count()
    if nthreads > 0:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            projections = list(pool.map(
                lambda r: project_visible(points, cameras[r]), order))
    else:
        projections = [project_visible(points, cameras[r]) for r in order]

    sums = np.zeros((n, dim))
    counts = np.zeros(n, dtype=np.int64)
    for pos, r in enumerate(order):
        u, v, _, vis = projections[pos]
        grid = fields[r].grid
        sums[vis] += grid[v[vis], u[vis]]
        counts[vis] += 1

    seen = counts > 0
    if not seen.any():
        raise LiftError("no point is visible in any view")
    out = np.zeros((n, dim))
    out[seen] = sums[seen] / counts[seen, None]

    if not seen.all():
        vis_idx = np.nonzero(seen)[0]
        vis_pts = points[vis_idx]
        for i in np.nonzero(~seen)[0]:
            diff = vis_pts - points[i]
            j = int(np.argmin((diff * diff).sum(axis=1)))  # ties: smallest index
            out[i] = out[vis_idx[j]]
    return out


def aggregate_patch_targets(point_features: np.ndarray, patches: PatchSet) -> np.ndarray:
    """Per-patch mean of member features, accumulated in ascending point
    index order (membership rows are stored sorted)."""
    point_features = np.asarray(point_features, dtype=np.float64)
    g, k = patches.membership.shape
    out = np.zeros((g, point_features.shape[1]))
    for i in range(g):
        acc = np.zeros(point_features.shape[1])
        for m in patches.membership[i]:
            acc += point_features[m]
        out[i] = acc / k
    return out


def lift_shape_cache(points: np.ndarray, labels: list[list[int]] | None,
                     part_ids: list[str], cameras: list[Camera],
                     fields: list[FeatureField], num_patches: int,
                     patch_size: int, seed_index: int, shape_id: str,
                     provenance: str, category: str = "",
                     seed: int = 0) -> FeatureCache:
    """Full caching path for one (already normalized) shape: lift the view
    fields to points, FPS + kNN patch, aggregate per-patch targets."""
    from .geometry import build_patches, farthest_point_sampling

    point_features = lift_point_features(points, cameras, fields)
    centers = farthest_point_sampling(points, num_patches, seed_index)
    patches = build_patches(points, centers, patch_size)
    targets = aggregate_patch_targets(point_features, patches)
    return FeatureCache(
        shape_id=shape_id, category=category,
        centers=patches.centers, patch_targets=targets,
        membership=patches.membership, point_features=point_features,
        points=np.asarray(points, dtype=np.float64),
        labels=labels if labels is not None else [[] for _ in range(len(points))],
        part_ids=list(part_ids), provenance=provenance, seed=seed)
