import json
import math
import os

import numpy as np
import pytest

from pa3d import dataio
from pa3d.dataio import (
    CacheFormatError,
    CheckpointFormatError,
    DataFormatError,
    FamilyBlock,
    SynthSpec,
    TextTableFormatError,
    fnv1a64,
    load_checkpoint,
    make_prototypes,
    read_cache,
    read_fields,
    read_fields_spec,
    read_labeled_ply,
    read_shape,
    read_text_table,
    sample_family_shape,
    save_checkpoint,
    synth_generate,
    write_cache,
    write_fields,
    write_labeled_ply,
    write_shape,
    write_synth_dataset,
    write_text_table,
)
from pa3d.geometry import PointCloud, build_patches, farthest_point_sampling, \
    normalize_unit_sphere
from pa3d.inference import TextTable
from pa3d.liftproj import FeatureCache, lift_point_features, make_view_rig
from pa3d.model import EncoderConfig, init_model


def _random_cache(seed=0, n=40, g=6, k=5, dim=7):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (n, 3)).astype(np.float32).astype(np.float64)
    centers = farthest_point_sampling(pts, g, 0)
    patches = build_patches(pts, centers, k)
    return FeatureCache(
        shape_id="toy_0000",
        category="toy",
        centers=patches.centers,
        patch_targets=rng.uniform(-1, 1, (g, dim)).astype(np.float32),
        membership=patches.membership,
        point_features=rng.uniform(-1, 1, (n, dim)).astype(np.float32),
        points=pts,
        labels=[[int(i % 2)] for i in range(n)],
        part_ids=["a", "b"],
        provenance="synthetic",
        seed=seed,
    )


# ---------------------------------------------------------------------------
# fnv + cache round trips


def test_fnv1a64_known_vectors():
    # standard FNV-1a test vectors
    assert fnv1a64(b"") == "cbf29ce484222325"
    assert fnv1a64(b"a") == "af63dc4c8601ec8c"
    assert fnv1a64(b"foobar") == "85944171f73967e8"


def test_cache_roundtrip_bit_identical_blobs(tmp_path):
    cache = _random_cache()
    d1, d2 = str(tmp_path / "c1"), str(tmp_path / "c2")
    write_cache(cache, d1)
    loaded = read_cache(d1)
    write_cache(loaded, d2)
    for name in ["points.f32", "centers.f32", "targets.f32", "membership.u32",
                 "pointfeat.f32", "labels.jsonl", "parts.json", "manifest.json"]:
        with open(os.path.join(d1, name), "rb") as f:
            a = f.read()
        with open(os.path.join(d2, name), "rb") as f:
            b = f.read()
        assert a == b, name


def test_cache_bitflip_detected(tmp_path):
    cache = _random_cache()
    d = str(tmp_path / "c")
    write_cache(cache, d)
    blob = os.path.join(d, "targets.f32")
    with open(blob, "r+b") as f:
        f.seek(5)
        byte = f.read(1)
        f.seek(5)
        f.write(bytes([byte[0] ^ 0x10]))
    with pytest.raises(CacheFormatError, match="checksum"):
        read_cache(d)


def test_cache_dim_mismatch_names_values(tmp_path):
    cache = _random_cache()
    d = str(tmp_path / "c")
    write_cache(cache, d)
    man_path = os.path.join(d, "manifest.json")
    with open(man_path) as f:
        man = json.load(f)
    man["feature_dim"] = 9
    with open(man_path, "w") as f:
        json.dump(man, f)
    with pytest.raises(CacheFormatError, match="54"):  # 6 patches x 9 dims
        read_cache(d)


def test_cache_version_mismatch(tmp_path):
    cache = _random_cache()
    d = str(tmp_path / "c")
    write_cache(cache, d)
    man_path = os.path.join(d, "manifest.json")
    with open(man_path) as f:
        man = json.load(f)
    man["format_version"] = "PA3D-0"
    with open(man_path, "w") as f:
        json.dump(man, f)
    with pytest.raises(CacheFormatError, match="PA3D-1"):
        read_cache(d)


def test_cache_fuzz_never_crashes(tmp_path):
    cache = _random_cache()
    d = str(tmp_path / "c")
    write_cache(cache, d)
    rng = np.random.default_rng(5)
    files = ["manifest.json", "points.f32", "targets.f32", "membership.u32",
             "labels.jsonl", "parts.json"]
    for trial in range(40):
        victim = files[trial % len(files)]
        path = os.path.join(d, victim)
        with open(path, "rb") as f:
            original = f.read()
        try:
            mutated = bytearray(original)
            if trial % 2 == 0 and len(mutated) > 1:
                mutated = mutated[: int(rng.integers(0, len(mutated)))]
            elif mutated:
                pos = int(rng.integers(0, len(mutated)))
                mutated[pos] ^= 1 << int(rng.integers(0, 8))
            with open(path, "wb") as f:
                f.write(bytes(mutated))
            try:
                read_cache(d)
            except DataFormatError:
                pass  # structured failure is the contract
        finally:
            with open(path, "wb") as f:
                f.write(original)
    read_cache(d)  # still intact afterwards


# ---------------------------------------------------------------------------
# shapes, text tables, fields


def test_shape_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    cloud = PointCloud(points=rng.uniform(-1, 1, (20, 3)),
                       labels=[[0] if i < 10 else [1] for i in range(20)],
                       shape_id="s0")
    d = str(tmp_path / "s")
    write_shape(cloud, ["x", "y"], "family", d)
    loaded, parts, cat = read_shape(d)
    assert parts == ["x", "y"] and cat == "family"
    assert loaded.shape_id == "s0"
    assert loaded.labels == cloud.labels
    np.testing.assert_allclose(loaded.points, cloud.points, atol=1e-6)


def test_text_table_roundtrip_and_validation(tmp_path):
    emb = make_prototypes(["a", "b", "c"], 8, seed=3)
    table = TextTable(names=["a", "b", "c"], embeddings=emb, prompts=["{part}"])
    d = str(tmp_path / "t")
    write_text_table(table, d)
    loaded = read_text_table(d)
    assert loaded.names == ["a", "b", "c"]
    assert np.abs(np.linalg.norm(loaded.embeddings, axis=1) - 1).max() < 1e-6

    with pytest.raises(ValueError, match="duplicate"):
        TextTable(names=["a", "a"], embeddings=emb[:2])


def test_text_table_bad_norm_rejected(tmp_path):
    emb = make_prototypes(["a", "b"], 8, seed=4)
    table = TextTable(names=["a", "b"], embeddings=emb)
    d = str(tmp_path / "t")
    write_text_table(table, d)
    blob = os.path.join(d, "embeddings.f32")
    data = np.fromfile(blob, dtype="<f4") * 2.0  # break the norms
    data.tofile(blob)
    man_path = os.path.join(d, "manifest.json")
    with open(man_path) as f:
        man = json.load(f)
    man["checksums"]["embeddings.f32"] = fnv1a64(data.tobytes())
    with open(man_path, "w") as f:
        json.dump(man, f)
    with pytest.raises(TextTableFormatError, match="unit-norm"):
        read_text_table(d)


def test_fields_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    from pa3d.liftproj import FeatureField
    fields = [FeatureField(view_id=r, grid=rng.uniform(-1, 1, (8, 8, 3)))
              for r in range(2)]
    d = str(tmp_path / "f")
    write_fields(fields, "s0", "test", d)
    loaded = read_fields(d)
    assert [f.view_id for f in loaded] == [0, 1]
    np.testing.assert_allclose(loaded[0].grid, fields[0].grid, atol=1e-6)


# ---------------------------------------------------------------------------
# checkpoints


TINY = EncoderConfig(d_model=16, n_layers=2, n_heads=2, mlp_ratio=2,
                     pointnet_hidden=12, head_2d_out=6, head_text_out=6,
                     num_patches=4, patch_size=4)


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    params = init_model(TINY, np.random.default_rng(7))
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(params, path, meta={"stage": 1})
    loaded, meta = load_checkpoint(path)
    assert meta == {"stage": 1}
    assert loaded.cfg == TINY
    assert loaded.trainable == params.trainable
    for name in params.tensors:
        assert np.array_equal(loaded[name].data, params[name].data), name


def test_checkpoint_wrong_config_rejected(tmp_path):
    params = init_model(TINY, np.random.default_rng(8))
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(params, path)
    other = EncoderConfig(d_model=32, n_layers=2, n_heads=2, mlp_ratio=2,
                          pointnet_hidden=12, head_2d_out=6, head_text_out=6,
                          num_patches=4, patch_size=4)
    with pytest.raises(CheckpointFormatError, match="config"):
        load_checkpoint(path, expect_config=other)


def test_checkpoint_fuzz_never_crashes(tmp_path):
    params = init_model(TINY, np.random.default_rng(9))
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(params, path)
    with open(path, "rb") as f:
        original = f.read()
    rng = np.random.default_rng(10)
    for trial in range(30):
        mutated = bytearray(original)
        if trial % 2 == 0:
            mutated = mutated[: int(rng.integers(0, len(mutated)))]
        else:
            pos = int(rng.integers(0, len(mutated)))
            mutated[pos] ^= 1 << int(rng.integers(0, 8))
        with open(path, "wb") as f:
            f.write(bytes(mutated))
        try:
            load_checkpoint(path)
        except DataFormatError:
            pass
    with open(path, "wb") as f:
        f.write(original)
    load_checkpoint(path)


# ---------------------------------------------------------------------------
# PLY


def test_labeled_ply_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1, 1, (12, 3))
    labels = rng.integers(0, 3, 12)
    path = str(tmp_path / "out.ply")
    write_labeled_ply(path, pts, labels)
    rpts, rlabels = read_labeled_ply(path)
    np.testing.assert_array_equal(rpts, pts)  # %.17g round-trips f64 exactly
    np.testing.assert_array_equal(rlabels, labels)


def test_ply_malformed_rejected(tmp_path):
    path = str(tmp_path / "bad.ply")
    with open(path, "w") as f:
        f.write("not a ply\n")
    with pytest.raises(DataFormatError):
        read_labeled_ply(path)


# ---------------------------------------------------------------------------
# synthetic data


def test_prototypes_orthonormal():
    proto = make_prototypes(["a", "b", "c", "d"], 16, seed=0)
    gram = proto @ proto.T
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-12)


def test_prototypes_deterministic():
    a = make_prototypes(["a", "b"], 8, seed=5)
    b = make_prototypes(["a", "b"], 8, seed=5)
    assert np.array_equal(a, b)


def test_prototypes_need_enough_dims():
    with pytest.raises(ValueError):
        make_prototypes(["a", "b", "c"], 2, seed=0)


def test_family_shapes_have_analytic_labels():
    for family in ("barbell", "chair", "table", "lamp"):
        pts, labels = sample_family_shape(family, 128, np.random.default_rng(1))
        assert pts.shape == (128, 3)
        assert len(labels) == 128
        assert len(set(labels)) >= 2


def test_synth_same_spec_same_dataset():
    spec = SynthSpec(families=(FamilyBlock("barbell", 2, 64),
                               FamilyBlock("table", 1, 64)),
                     feature_dim=8, seed=12)
    a, b = synth_generate(spec), synth_generate(spec)
    assert [c.shape_id for c in a.clouds] == [c.shape_id for c in b.clouds]
    for ca, cb in zip(a.clouds, b.clouds):
        assert np.array_equal(ca.points, cb.points)
        assert ca.labels == cb.labels
    assert np.array_equal(a.prototypes, b.prototypes)


def test_barbell_sigma0_lift_is_exact_prototype():
    spec = SynthSpec(families=(FamilyBlock("barbell", 1, 256),),
                     feature_dim=8, noise_sigma=0.0, seed=21)
    ds = synth_generate(spec)
    cloud = normalize_unit_sphere(ds.clouds[0])
    cams = make_view_rig(6, radius=2.2, elevations=[0.0, math.radians(30)])
    fields = ds.paint_fields(0, cloud.points, cams)
    lifted = lift_point_features(cloud.points, cams, fields)
    proto = {p: ds.prototypes[ds.part_names.index(p)] for p in ("ball", "handle")}
    for i, lab in enumerate(cloud.labels):
        expect = proto[ds.shape_parts[0][lab[0]]]
        np.testing.assert_allclose(lifted[i], expect, atol=1e-14)


def test_painted_fields_deterministic():
    spec = SynthSpec(families=(FamilyBlock("lamp", 1, 128),),
                     feature_dim=8, noise_sigma=0.05, seed=22)
    ds = synth_generate(spec)
    cloud = normalize_unit_sphere(ds.clouds[0])
    cams = make_view_rig(2, radius=2.2, elevations=[0.0], resolution=32)
    f1 = ds.paint_fields(0, cloud.points, cams)
    f2 = ds.paint_fields(0, cloud.points, cams)
    for a, b in zip(f1, f2):
        assert np.array_equal(a.grid, b.grid)


def test_synth_dataset_write_read(tmp_path):
    spec = SynthSpec(families=(FamilyBlock("barbell", 2, 64),),
                     feature_dim=8, seed=23)
    ds = synth_generate(spec)
    out = str(tmp_path / "data")
    write_synth_dataset(ds, out)
    ids = dataio.dataset_shape_ids(out)
    assert ids == [c.shape_id for c in ds.clouds]
    cloud, parts, cat = read_shape(os.path.join(out, "shapes", ids[0]))
    assert parts == ["ball", "handle"] and cat == "barbell"
    painter = read_fields_spec(os.path.join(out, "fields_spec.json"))
    assert np.array_equal(painter.prototypes, ds.prototypes)
    table = read_text_table(os.path.join(out, "text_table"))
    assert table.names == ds.part_names
