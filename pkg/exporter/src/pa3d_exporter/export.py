"""Export jobs: render -> dense features -> field files, then core lifting
via the `pa3d cache-lift` CLI; and part-name -> text-table export."""

from __future__ import annotations

import os
import shutil
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .encoders import make_dense_encoder, make_text_encoder
from .formats import (ExportFormatError, dataset_shape_dirs, read_shape,
                      write_fields_dir, write_text_table)
from .render import RigSpec, camera_positions, normalize_unit_sphere, render_view

DEFAULT_TEMPLATES = ("{part}", "a {part}", "{part} part")


@dataclass(frozen=True)
class ExportJob:
    cloud_dir: str
    out_dir: str
    encoder_id: str = "toy-spectral-v1"
    feature_dim: int = 16
    rig: RigSpec = field(default_factory=RigSpec)
    num_patches: int = 32
    patch_size: int = 16
    seed: int = 0
    shading: str = "depth"
    pa3d_bin: str = "pa3d"


def _core_cli(job: ExportJob) -> str:
    path = shutil.which(job.pa3d_bin)
    if path is None:
        raise ExportFormatError(
            f"core CLI '{job.pa3d_bin}' not found on PATH; install the pa3d "
            f"package to lift exported fields")
    return path


def export_2d_features(job: ExportJob) -> dict:
    """Render every shape of the cloud dir, encode dense per-view features,
    write field directories, then invoke the core CLI to lift them into
    cache directories. Returns a summary with the produced paths."""
    encoder = make_dense_encoder(job.encoder_id, job.feature_dim)
    cams = camera_positions(job.rig)
    fields_root = os.path.join(job.out_dir, "fields")
    caches_root = os.path.join(job.out_dir, "caches")
    os.makedirs(fields_root, exist_ok=True)

    shape_dirs = dataset_shape_dirs(job.cloud_dir)
    provenance = f"{job.encoder_id} shading={job.shading}"
    for sdir in shape_dirs:
        points, _labels, _parts, shape_id, _cat = read_shape(sdir)
        norm = normalize_unit_sphere(points)
        grids = []
        for pos, up in cams:
            img = render_view(norm, pos, up, job.rig, shading=job.shading)
            grid = encoder.encode(img)
            if grid.shape != (job.rig.resolution, job.rig.resolution,
                              job.feature_dim):
                raise ExportFormatError(
                    f"encoder produced {grid.shape}, job expects "
                    f"({job.rig.resolution}, {job.rig.resolution}, "
                    f"{job.feature_dim})")
            grids.append(np.asarray(grid, dtype=np.float64))
        write_fields_dir(os.path.join(fields_root, shape_id), shape_id,
                         grids, provenance)

    cli = _core_cli(job)
    cmd = [cli, "cache-lift",
           "--cloud", job.cloud_dir,
           "--fields", fields_root,
           "--views", str(job.rig.views),
           "--resolution", str(job.rig.resolution),
           "--radius", str(job.rig.radius),
           "--fov", str(job.rig.fov_deg),
           "--elevations", ",".join(str(e) for e in job.rig.elevations_deg),
           "--num-patches", str(job.num_patches),
           "--patch-size", str(job.patch_size),
           "--seed", str(job.seed),
           "--out", caches_root]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ExportFormatError(
            f"core cache-lift failed ({proc.returncode}): {proc.stderr.strip()}")
    return {"fields": fields_root, "caches": caches_root,
            "shapes": len(shape_dirs), "provenance": provenance}


def export_text_embeddings(part_names: list[str], out_dir: str,
                           encoder_id: str = "hashed-ngrams-v1",
                           dim: int = 16,
                           templates: tuple[str, ...] = DEFAULT_TEMPLATES) -> dict:
    """Embed each template per part, average, L2-normalize, and write a
    text-table directory the core accepts."""
    if not part_names:
        raise ValueError("empty part list")
    dupes = sorted({n for n in part_names if part_names.count(n) > 1})
    if dupes:
        raise ValueError(f"duplicate part names: {dupes}")
    if not templates:
        raise ValueError("need at least one prompt template")
    encoder = make_text_encoder(encoder_id, dim)

    rows = np.empty((len(part_names), dim))
    for i, name in enumerate(part_names):
        acc = np.zeros(dim)
        for tpl in templates:
            acc += encoder.embed(tpl.format(part=name))
        acc /= len(templates)
        norm = np.linalg.norm(acc)
        if norm == 0.0:
            raise ValueError(f"templates for part '{name}' embed to zero")
        rows[i] = acc / norm
    write_text_table(out_dir, part_names, rows,
                     [f"{encoder_id}: {t}" for t in templates])
    return {"table": out_dir, "parts": len(part_names),
            "provenance": encoder_id}
