"""Flat-shaded depth-colored splat renderer.

The view rig and pinhole conventions replicate the core pipeline's
documented cache-lift geometry exactly (even azimuth spacing per elevation
ring, look-at origin, z-up except near the poles, vertical fov, pixel =
floor(W/2 + f*x/z)); the rendered images must be pixel-aligned with the
projections the core uses when it lifts the exported fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RigSpec:
    views: int = 10
    radius: float = 2.2
    elevations_deg: tuple[float, ...] = (0.0, 35.0)
    fov_deg: float = 50.0
    resolution: int = 128


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    max_norm = float(np.sqrt((centered * centered).sum(axis=1).max()))
    if max_norm <= 0.0:
        raise ValueError("degenerate cloud: all points coincide")
    return centered / max_norm


def camera_positions(spec: RigSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """(position, up) per view, matching the core rig layout."""
    n_rings = len(spec.elevations_deg)
    per_ring = [spec.views // n_rings + (1 if r < spec.views % n_rings else 0)
                for r in range(n_rings)]
    cams = []
    for elev_deg, count in zip(spec.elevations_deg, per_ring):
        elev = math.radians(elev_deg)
        for j in range(count):
            azim = 2.0 * math.pi * j / count
            ce, se = math.cos(elev), math.sin(elev)
            pos = spec.radius * np.array(
                [ce * math.cos(azim), ce * math.sin(azim), se])
            up = np.array([0.0, 0.0, 1.0]) if abs(se) < 0.99 \
                else np.array([1.0, 0.0, 0.0])
            cams.append((pos, up))
    return cams


def render_view(points: np.ndarray, pos: np.ndarray, up: np.ndarray,
                spec: RigSpec, shading: str = "depth") -> np.ndarray:
    """One (H, W, 3) float image: nearest-point splats shaded by inverse
    depth ("depth") or constant gray ("flat"); background 0.1 gray."""
    fwd = -pos / np.linalg.norm(pos)
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)

    rel = points - pos
    x = rel @ right
    y = rel @ true_up
    z = rel @ fwd
    res = spec.resolution
    focal = (res / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)

    img = np.full((res, res, 3), 0.1)
    zbuf = np.full((res, res), np.inf)
    zmin, zmax = spec.radius - 1.0, spec.radius + 1.0
    for i in range(points.shape[0]):
        if z[i] <= 1e-9:
            continue
        u = int(math.floor(res / 2.0 + focal * (x[i] / z[i])))
        v = int(math.floor(res / 2.0 + focal * (y[i] / z[i])))
        if not (0 <= u < res and 0 <= v < res):
            continue
        if z[i] < zbuf[v, u]:
            zbuf[v, u] = z[i]
            if shading == "flat":
                img[v, u] = 0.8
            else:
                shade = 1.0 - (z[i] - zmin) / (zmax - zmin)
                img[v, u] = min(max(shade, 0.0), 1.0)
    return img
