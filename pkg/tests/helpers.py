"""Shared fixtures-in-code for the training / inference / acceptance tests:
a small synthetic dataset lifted into feature caches."""

from __future__ import annotations

import math

import numpy as np

from pa3d.dataio import FamilyBlock, SynthSpec, synth_generate
from pa3d.geometry import normalize_unit_sphere
from pa3d.liftproj import lift_shape_cache, make_view_rig
from pa3d.model import EncoderConfig, init_model
from pa3d.training import TrainingSet

MICRO = EncoderConfig(d_model=8, n_layers=1, n_heads=2, mlp_ratio=2,
                      pointnet_hidden=6, head_2d_out=6, head_text_out=6,
                      num_patches=3, patch_size=3)

SMALL = EncoderConfig(d_model=32, n_layers=2, n_heads=4, mlp_ratio=2,
                      pointnet_hidden=32, head_2d_out=8, head_text_out=8,
                      num_patches=12, patch_size=12)


def build_training_set(spec: SynthSpec, num_patches: int, patch_size: int,
                       n_views: int = 4, resolution: int = 48) -> TrainingSet:
    ds = synth_generate(spec)
    cams = make_view_rig(n_views, radius=2.2,
                         elevations=[0.0, math.radians(30)],
                         resolution=resolution)
    rng = np.random.default_rng(spec.seed)
    samples = []
    for i, cloud in enumerate(ds.clouds):
        norm = normalize_unit_sphere(cloud)
        fields = ds.paint_fields(i, norm.points, cams)
        samples.append(lift_shape_cache(
            norm.points, norm.labels, ds.shape_parts[i], cams, fields,
            num_patches, patch_size, seed_index=int(rng.integers(norm.n)),
            shape_id=cloud.shape_id, provenance="synthetic",
            category=ds.categories[i], seed=spec.seed))
    return TrainingSet(samples=samples, text_table=ds.text_table())


def micro_set(seed=0, count=3) -> TrainingSet:
    spec = SynthSpec(families=(FamilyBlock("barbell", count, 96),),
                     feature_dim=6, noise_sigma=0.0, seed=seed)
    return build_training_set(spec, MICRO.num_patches, MICRO.patch_size,
                              n_views=3, resolution=32)


def micro_model(seed=0):
    return init_model(MICRO, np.random.default_rng(seed))
