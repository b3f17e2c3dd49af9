"""On-disk formats and the synthetic known-answer data generator.

Everything is little-endian and row-major: JSON manifests plus raw f32/u32
blobs for bulk data (f64 for checkpoints), each blob integrity-checked with
a 64-bit FNV-1a checksum recorded in the manifest. Formats are versioned
with FORMAT_VERSION and fail with structured errors, never crashes.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .inference import TextTable
from .liftproj import Camera, FeatureCache, FeatureField, project_visible
from .model import EncoderConfig, ModelParams, params_from_arrays

FORMAT_VERSION = "PA3D-1"
CHECKPOINT_MAGIC = b"PA3DCKPT1\n"


class DataFormatError(RuntimeError):
    """Base for all structured load/validation failures."""


class CacheFormatError(DataFormatError):
    pass


class CheckpointFormatError(DataFormatError):
    pass


class TextTableFormatError(DataFormatError):
    pass


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a, hex encoded."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


# ---------------------------------------------------------------------------
# low-level helpers


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _read_json(path: str, err: type[DataFormatError]):
    if not os.path.isfile(path):
        raise err(f"missing file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise err(f"unparseable JSON in {path}: {e}") from e


def _write_blob(path: str, arr: np.ndarray, dtype: str) -> str:
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(data)
    return fnv1a64(data)


def _read_blob(path: str, dtype: str, checksum: str, count: int,
               what: str, err: type[DataFormatError]) -> np.ndarray:
    if not os.path.isfile(path):
        raise err(f"missing blob: {path}")
    with open(path, "rb") as f:
        data = f.read()
    got = fnv1a64(data)
    if got != checksum:
        raise err(f"checksum mismatch for {what}: manifest {checksum}, file {got}")
    dt = np.dtype(dtype).newbyteorder("<")
    if len(data) != count * dt.itemsize:
        raise err(f"{what}: expected {count} x {dt.itemsize} bytes "
                  f"({count * dt.itemsize}), file has {len(data)}")
    return np.frombuffer(data, dtype=dt).astype(
        np.float64 if dtype.startswith("f") else np.int64)


def _checked_version(manifest, path: str, err: type[DataFormatError]) -> None:
    if not isinstance(manifest, dict):
        raise err(f"{path}: manifest is not a JSON object")
    v = manifest.get("format_version")
    if v != FORMAT_VERSION:
        raise err(f"{path}: format_version {v!r}, expected {FORMAT_VERSION!r}")


def _man_int(manifest: dict, key: str, path: str,
             err: type[DataFormatError]) -> int:
    try:
        return int(manifest[key])
    except (KeyError, TypeError, ValueError) as e:
        raise err(f"{path}: bad or missing field '{key}': {e}") from e


def _file_checksum(path: str) -> str:
    with open(path, "rb") as f:
        return fnv1a64(f.read())


def _verify_file(dirpath: str, name: str, checksums: dict,
                 err: type[DataFormatError]) -> str:
    path = os.path.join(dirpath, name)
    if not os.path.isfile(path):
        raise err(f"missing file: {path}")
    if name not in checksums:
        raise err(f"manifest lists no checksum for {name}")
    got = _file_checksum(path)
    if got != checksums[name]:
        raise err(f"checksum mismatch for {name}: manifest {checksums[name]}, "
                  f"file {got}")
    return path


# ---------------------------------------------------------------------------
# feature caches


def write_cache(cache: FeatureCache, dirpath: str) -> None:
    """Write one shape's cache directory (self-contained training sample)."""
    if cache.points is None or cache.labels is None or cache.membership is None:
        raise ValueError("write_cache needs points, labels and membership")
    os.makedirs(dirpath, exist_ok=True)
    checks = {
        "points.f32": _write_blob(os.path.join(dirpath, "points.f32"),
                                  cache.points, "f4"),
        "centers.f32": _write_blob(os.path.join(dirpath, "centers.f32"),
                                   cache.centers, "f4"),
        "targets.f32": _write_blob(os.path.join(dirpath, "targets.f32"),
                                   cache.patch_targets, "f4"),
        "membership.u32": _write_blob(os.path.join(dirpath, "membership.u32"),
                                      cache.membership, "u4"),
    }
    if cache.point_features is not None:
        checks["pointfeat.f32"] = _write_blob(
            os.path.join(dirpath, "pointfeat.f32"), cache.point_features, "f4")
    lab_path = os.path.join(dirpath, "labels.jsonl")
    with open(lab_path, "w", encoding="utf-8") as f:
        for lab in cache.labels:
            f.write(json.dumps([int(x) for x in lab]) + "\n")
    checks["labels.jsonl"] = _file_checksum(lab_path)
    parts_path = os.path.join(dirpath, "parts.json")
    _write_json(parts_path, list(cache.part_ids))
    checks["parts.json"] = _file_checksum(parts_path)

    _write_json(os.path.join(dirpath, "manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "feature-cache",
        "shape_id": cache.shape_id,
        "category": cache.category,
        "num_points": int(cache.points.shape[0]),
        "feature_dim": int(cache.patch_targets.shape[1]),
        "num_patches": int(cache.centers.shape[0]),
        "patch_size": int(cache.membership.shape[1]),
        "has_point_features": cache.point_features is not None,
        "seed": int(cache.seed),
        "provenance": cache.provenance,
        "checksums": checks,
    })


def read_cache(dirpath: str) -> FeatureCache:
    man_path = os.path.join(dirpath, "manifest.json")
    man = _read_json(man_path, CacheFormatError)
    _checked_version(man, man_path, CacheFormatError)
    if man.get("kind") != "feature-cache":
        raise CacheFormatError(f"{man_path}: kind {man.get('kind')!r}, "
                               f"expected 'feature-cache'")
    try:
        n = int(man["num_points"])
        dim = int(man["feature_dim"])
        g = int(man["num_patches"])
        k = int(man["patch_size"])
        checks = man["checksums"]
    except (KeyError, TypeError, ValueError) as e:
        raise CacheFormatError(f"{man_path}: bad or missing field: {e}") from e

    points = _read_blob(os.path.join(dirpath, "points.f32"), "f4",
                        checks.get("points.f32", ""), n * 3,
                        "points.f32", CacheFormatError).reshape(n, 3)
    centers = _read_blob(os.path.join(dirpath, "centers.f32"), "f4",
                         checks.get("centers.f32", ""), g * 3,
                         "centers.f32", CacheFormatError).reshape(g, 3)
    targets = _read_blob(os.path.join(dirpath, "targets.f32"), "f4",
                         checks.get("targets.f32", ""), g * dim,
                         "targets.f32", CacheFormatError).reshape(g, dim)
    membership = _read_blob(os.path.join(dirpath, "membership.u32"), "u4",
                            checks.get("membership.u32", ""), g * k,
                            "membership.u32", CacheFormatError).reshape(g, k)
    point_features = None
    if man.get("has_point_features"):
        point_features = _read_blob(os.path.join(dirpath, "pointfeat.f32"), "f4",
                                    checks.get("pointfeat.f32", ""), n * dim,
                                    "pointfeat.f32", CacheFormatError).reshape(n, dim)

    lab_path = _verify_file(dirpath, "labels.jsonl", checks, CacheFormatError)
    labels = []
    with open(lab_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            try:
                labels.append([int(x) for x in json.loads(line)])
            except (json.JSONDecodeError, TypeError, ValueError) as e:
                raise CacheFormatError(
                    f"labels.jsonl line {line_no}: {e}") from e
    if len(labels) != n:
        raise CacheFormatError(
            f"labels.jsonl has {len(labels)} rows, manifest says {n} points")

    parts_path = _verify_file(dirpath, "parts.json", checks, CacheFormatError)
    parts = _read_json(parts_path, CacheFormatError)
    if not isinstance(parts, list) or not all(isinstance(p, str) for p in parts):
        raise CacheFormatError(f"{parts_path}: expected a list of part names")
    for lab in labels:
        for pid in lab:
            if not 0 <= pid < len(parts):
                raise CacheFormatError(
                    f"label id {pid} out of range for {len(parts)} parts")

    if int(membership.max(initial=0)) >= n:
        raise CacheFormatError(
            f"membership index {int(membership.max())} out of range for {n} points")
    try:
        return FeatureCache(
            shape_id=str(man.get("shape_id", "")),
            category=str(man.get("category", "")),
            centers=centers, patch_targets=targets, membership=membership,
            point_features=point_features, points=points, labels=labels,
            part_ids=parts, provenance=str(man.get("provenance", "")),
            seed=int(man.get("seed", 0)))
    except ValueError as e:
        raise CacheFormatError(str(e)) from e


# ---------------------------------------------------------------------------
# dataset shape dirs


def write_shape(cloud: PointCloud, part_ids: list[str], category: str,
                dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    labels = cloud.labels if cloud.labels is not None \
        else [[] for _ in range(cloud.n)]
    checks = {"points.f32": _write_blob(os.path.join(dirpath, "points.f32"),
                                        cloud.points, "f4")}
    lab_path = os.path.join(dirpath, "labels.jsonl")
    with open(lab_path, "w", encoding="utf-8") as f:
        for lab in labels:
            f.write(json.dumps([int(x) for x in lab]) + "\n")
    checks["labels.jsonl"] = _file_checksum(lab_path)
    parts_path = os.path.join(dirpath, "parts.json")
    _write_json(parts_path, list(part_ids))
    checks["parts.json"] = _file_checksum(parts_path)
    _write_json(os.path.join(dirpath, "manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "shape",
        "shape_id": cloud.shape_id,
        "category": category,
        "num_points": int(cloud.n),
        "checksums": checks,
    })


def read_shape(dirpath: str) -> tuple[PointCloud, list[str], str]:
    man_path = os.path.join(dirpath, "manifest.json")
    man = _read_json(man_path, DataFormatError)
    _checked_version(man, man_path, DataFormatError)
    if man.get("kind") != "shape":
        raise DataFormatError(f"{man_path}: kind {man.get('kind')!r}, expected 'shape'")
    n = _man_int(man, "num_points", man_path, DataFormatError)
    checks = man.get("checksums", {})
    if not isinstance(checks, dict):
        raise DataFormatError(f"{man_path}: checksums is not an object")
    points = _read_blob(os.path.join(dirpath, "points.f32"), "f4",
                        checks.get("points.f32", ""), n * 3,
                        "points.f32", DataFormatError).reshape(n, 3)
    lab_path = _verify_file(dirpath, "labels.jsonl", checks, DataFormatError)
    labels = []
    with open(lab_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            try:
                labels.append([int(x) for x in json.loads(line)])
            except (json.JSONDecodeError, TypeError, ValueError) as e:
                raise DataFormatError(f"labels.jsonl line {line_no}: {e}") from e
    if len(labels) != n:
        raise DataFormatError(f"labels.jsonl rows {len(labels)} != points {n}")
    parts_path = _verify_file(dirpath, "parts.json", checks, DataFormatError)
    parts = _read_json(parts_path, DataFormatError)
    cloud = PointCloud(points=points, labels=labels,
                       shape_id=str(man.get("shape_id", "")))
    return cloud, list(parts), str(man.get("category", ""))


# ---------------------------------------------------------------------------
# text tables


def write_text_table(table: TextTable, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    checks = {"embeddings.f32": _write_blob(
        os.path.join(dirpath, "embeddings.f32"), table.embeddings, "f4")}
    parts_path = os.path.join(dirpath, "parts.json")
    _write_json(parts_path, table.names)
    checks["parts.json"] = _file_checksum(parts_path)
    prompts_path = os.path.join(dirpath, "prompts.json")
    _write_json(prompts_path, table.prompts)
    checks["prompts.json"] = _file_checksum(prompts_path)
    _write_json(os.path.join(dirpath, "manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "text-table",
        "dim": int(table.embeddings.shape[1]),
        "count": len(table.names),
        "checksums": checks,
    })


def read_text_table(dirpath: str) -> TextTable:
    man_path = os.path.join(dirpath, "manifest.json")
    man = _read_json(man_path, TextTableFormatError)
    _checked_version(man, man_path, TextTableFormatError)
    if man.get("kind") != "text-table":
        raise TextTableFormatError(
            f"{man_path}: kind {man.get('kind')!r}, expected 'text-table'")
    dim = _man_int(man, "dim", man_path, TextTableFormatError)
    count = _man_int(man, "count", man_path, TextTableFormatError)
    checks = man.get("checksums", {})
    if not isinstance(checks, dict):
        raise TextTableFormatError(f"{man_path}: checksums is not an object")
    emb = _read_blob(os.path.join(dirpath, "embeddings.f32"), "f4",
                     checks.get("embeddings.f32", ""), count * dim,
                     "embeddings.f32", TextTableFormatError).reshape(count, dim)
    names = _read_json(_verify_file(dirpath, "parts.json", checks,
                                    TextTableFormatError), TextTableFormatError)
    prompts = _read_json(_verify_file(dirpath, "prompts.json", checks,
                                      TextTableFormatError), TextTableFormatError)
    # rows were rounded to f32 on disk; re-normalize the widened values and
    # let TextTable's own invariant checks do the rest
    try:
        return TextTable(names=list(names), embeddings=emb, prompts=list(prompts))
    except ValueError as e:
        raise TextTableFormatError(str(e)) from e


# ---------------------------------------------------------------------------
# feature-field directories (real 2D features, exporter output)


def write_fields(fields: list[FeatureField], shape_id: str, provenance: str,
                 dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    views = []
    h, w, d = fields[0].grid.shape
    for f in fields:
        if f.grid.shape != (h, w, d):
            raise ValueError("all views of one shape must share grid shape")
        name = f"view_{f.view_id:03d}.f32"
        chk = _write_blob(os.path.join(dirpath, name), f.grid, "f4")
        views.append({"view_id": int(f.view_id), "file": name, "checksum": chk})
    _write_json(os.path.join(dirpath, "fields_manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "feature-fields",
        "shape_id": shape_id,
        "resolution": [int(h), int(w)],
        "feature_dim": int(d),
        "provenance": provenance,
        "views": views,
    })


def read_fields(dirpath: str) -> list[FeatureField]:
    man_path = os.path.join(dirpath, "fields_manifest.json")
    man = _read_json(man_path, DataFormatError)
    _checked_version(man, man_path, DataFormatError)
    try:
        h, w = (int(x) for x in man["resolution"])
        views = list(man["views"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{man_path}: bad manifest structure: {e}") from e
    d = _man_int(man, "feature_dim", man_path, DataFormatError)
    fields = []
    for view in views:
        try:
            fname, vid = view["file"], int(view["view_id"])
            chk = view.get("checksum", "")
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{man_path}: bad view entry: {e}") from e
        grid = _read_blob(os.path.join(dirpath, fname), "f4", chk, h * w * d,
                          fname, DataFormatError).reshape(h, w, d)
        fields.append(FeatureField(view_id=vid, grid=grid))
    return fields


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str, meta: dict | None = None) -> None:
    """Single-file container: magic, u64 header length, JSON header, then
    concatenated f64 blobs. Everything round-trips bit-exactly."""
    entries = []
    blobs = []
    offset = 0
    for name, t in params.tensors.items():
        data = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "offset": offset,
            "count": int(t.size),
            "checksum": fnv1a64(data),
        })
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "config": params.cfg.to_dict(),
        "trainable": {g: bool(v) for g, v in params.trainable.items()},
        "meta": meta or {},
        "params": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str,
                    expect_config: EncoderConfig | None = None
                    ) -> tuple[ModelParams, dict]:
    if not os.path.isfile(path):
        raise CheckpointFormatError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unparseable header: {e}") from e
    pos += hlen
    _checked_version(header, path, CheckpointFormatError)
    try:
        cfg = EncoderConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: bad config: {e}") from e
    if expect_config is not None and cfg != expect_config:
        raise CheckpointFormatError(
            f"{path}: checkpoint config {cfg.to_dict()} does not match "
            f"expected {expect_config.to_dict()}")

    body = raw[pos:]
    arrays = {}
    for e in header.get("params", []):
        try:
            name, shape = e["name"], tuple(int(s) for s in e["shape"])
            off, count, chk = int(e["offset"]), int(e["count"]), e["checksum"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: bad param entry: {exc}") from exc
        seg = body[off:off + count * 8]
        if len(seg) != count * 8:
            raise CheckpointFormatError(
                f"{path}: param {name} truncated ({len(seg)} of {count * 8} bytes)")
        if fnv1a64(seg) != chk:
            raise CheckpointFormatError(f"{path}: checksum mismatch for {name}")
        arrays[name] = np.frombuffer(seg, dtype="<f8").reshape(shape)
    trainable = {g: bool(v) for g, v in header.get("trainable", {}).items()}
    try:
        params = params_from_arrays(cfg, arrays, trainable)
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: {e}") from e
    missing_groups = set(params.groups()) - set(trainable)
    if missing_groups:
        raise CheckpointFormatError(
            f"{path}: trainable flags missing for {sorted(missing_groups)}")
    return params, header.get("meta", {})


# ---------------------------------------------------------------------------
# PLY output


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_labeled_ply(path: str, points: np.ndarray, labels: np.ndarray) -> None:
    """ASCII PLY with double coords and a per-vertex int part_id."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lines = ["ply", "format ascii 1.0",
             f"element vertex {points.shape[0]}",
             "property double x", "property double y", "property double z",
             "property int part_id", "end_header"]
    for p, lab in zip(points, labels):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(lab)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_labeled_ply(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise DataFormatError(f"missing PLY: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != "ply":
        raise DataFormatError(f"{path}: not a PLY file")
    try:
        n = next(int(ln.split()[-1]) for ln in lines if ln.startswith("element vertex"))
        start = lines.index("end_header") + 1
    except (StopIteration, ValueError) as e:
        raise DataFormatError(f"{path}: malformed PLY header") from e
    body = lines[start:start + n]
    if len(body) != n:
        raise DataFormatError(f"{path}: expected {n} vertices, found {len(body)}")
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(body):
        cols = ln.split()
        if len(cols) < 4:
            raise DataFormatError(f"{path}: vertex line {i} has {len(cols)} columns")
        pts[i] = [float(c) for c in cols[:3]]
        labels[i] = int(cols[3])
    return pts, labels


def write_color_ply(path: str, points: np.ndarray, rgb01: np.ndarray) -> None:
    """ASCII PLY with double coords and uchar red/green/blue in [0, 255]."""
    points = np.asarray(points, dtype=np.float64)
    rgb = np.clip(np.rint(np.asarray(rgb01) * 255.0), 0, 255).astype(int)
    lines = ["ply", "format ascii 1.0",
             f"element vertex {points.shape[0]}",
             "property double x", "property double y", "property double z",
             "property uchar red", "property uchar green", "property uchar blue",
             "end_header"]
    for p, c in zip(points, rgb):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} "
                     f"{c[0]} {c[1]} {c[2]}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# synthetic data


FAMILY_PARTS: dict[str, list[str]] = {
    "barbell": ["ball", "handle"],
    "chair": ["seat", "back", "leg"],
    "table": ["top", "leg"],
    "lamp": ["base", "pole", "shade"],
}


@dataclass(frozen=True)
class FamilyBlock:
    family: str
    count: int
    points: int = 512

    def __post_init__(self):
        if self.family not in FAMILY_PARTS:
            raise ValueError(f"unknown family '{self.family}', "
                             f"choose from {sorted(FAMILY_PARTS)}")
        if self.count < 1 or self.points < 8:
            raise ValueError("family block needs count >= 1 and points >= 8")


@dataclass(frozen=True)
class SynthSpec:
    families: tuple[FamilyBlock, ...]
    feature_dim: int = 16
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.families:
            raise ValueError("spec needs at least one family block")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "families": [{"family": b.family, "count": b.count, "points": b.points}
                         for b in self.families],
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthSpec":
        blocks = tuple(FamilyBlock(family=b["family"], count=int(b["count"]),
                                   points=int(b.get("points", 512)))
                       for b in d["families"])
        return SynthSpec(families=blocks,
                         feature_dim=int(d.get("feature_dim", 16)),
                         noise_sigma=float(d.get("noise_sigma", 0.0)),
                         seed=int(d.get("seed", 0)))


def _sample_sphere(rng, n, center, r):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + r * d


def _sample_cylinder_x(rng, n, radius, x0, x1):
    x = rng.uniform(x0, x1, n)
    th = rng.uniform(0, 2 * math.pi, n)
    return np.stack([x, radius * np.cos(th), radius * np.sin(th)], axis=1)


def _sample_cylinder_z(rng, n, radius, z0, z1, cx=0.0, cy=0.0):
    z = rng.uniform(z0, z1, n)
    th = rng.uniform(0, 2 * math.pi, n)
    return np.stack([cx + radius * np.cos(th), cy + radius * np.sin(th), z], axis=1)


def _sample_box_surface(rng, n, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[2],
                      ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(0, 1, (n, 3)) * ext + lo
    for i in range(n):
        axis = face[i] // 2
        pts[i, axis] = hi[axis] if face[i] % 2 else lo[axis]
    return pts


def _sample_disc(rng, n, z, r):
    rho = r * np.sqrt(rng.uniform(0, 1, n))
    th = rng.uniform(0, 2 * math.pi, n)
    return np.stack([rho * np.cos(th), rho * np.sin(th), np.full(n, z)], axis=1)


def _sample_cone(rng, n, z0, z1, r0, r1):
    t = rng.uniform(0, 1, n)
    z = z0 + t * (z1 - z0)
    r = r0 + t * (r1 - r0)
    th = rng.uniform(0, 2 * math.pi, n)
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def _split(n: int, fractions: list[float]) -> list[int]:
    counts = [int(round(n * f)) for f in fractions]
    counts[-1] = n - sum(counts[:-1])
    return counts


def sample_family_shape(family: str, n: int, rng: np.random.Generator
                        ) -> tuple[np.ndarray, list[int]]:
    """Points plus per-point part index into FAMILY_PARTS[family].

    Barbell parts keep a >= 0.05 gap so different parts can never share a
    pixel while co-visible at the default rig settings.
    """
    if family == "barbell":
        nb, nh = _split(n, [0.6, 0.4])
        balls = np.vstack([
            _sample_sphere(rng, nb // 2, np.array([0.85, 0, 0]), 0.28),
            _sample_sphere(rng, nb - nb // 2, np.array([-0.85, 0, 0]), 0.28),
        ])
        handle = _sample_cylinder_x(rng, nh, 0.08, -0.52, 0.52)
        pts = np.vstack([balls, handle])
        labels = [0] * nb + [1] * nh
    elif family == "chair":
        ns, nb, nl = _split(n, [0.35, 0.3, 0.35])
        seat = _sample_box_surface(rng, ns, [-0.45, -0.45, 0.33], [0.45, 0.45, 0.42])
        back = _sample_box_surface(rng, nb, [-0.45, 0.36, 0.42], [0.45, 0.45, 1.0])
        legs = []
        for j, (cx, cy) in enumerate([(-0.37, -0.37), (0.37, -0.37),
                                      (-0.37, 0.37), (0.37, 0.37)]):
            m = nl // 4 if j < 3 else nl - 3 * (nl // 4)
            legs.append(_sample_box_surface(
                rng, m, [cx - 0.04, cy - 0.04, -0.45], [cx + 0.04, cy + 0.04, 0.33]))
        pts = np.vstack([seat, back] + legs)
        labels = [0] * ns + [1] * nb + [2] * nl
    elif family == "table":
        nt, nl = _split(n, [0.5, 0.5])
        top = _sample_box_surface(rng, nt, [-0.55, -0.55, 0.3], [0.55, 0.55, 0.4])
        legs = []
        for j, (cx, cy) in enumerate([(-0.45, -0.45), (0.45, -0.45),
                                      (-0.45, 0.45), (0.45, 0.45)]):
            m = nl // 4 if j < 3 else nl - 3 * (nl // 4)
            legs.append(_sample_box_surface(
                rng, m, [cx - 0.04, cy - 0.04, -0.5], [cx + 0.04, cy + 0.04, 0.3]))
        pts = np.vstack([top] + legs)
        labels = [0] * nt + [1] * nl
    elif family == "lamp":
        nb, np_, ns = _split(n, [0.3, 0.3, 0.4])
        base = np.vstack([
            _sample_disc(rng, nb // 2, -0.62, 0.32),
            _sample_cylinder_z(rng, nb - nb // 2, 0.32, -0.62, -0.55),
        ])
        pole = _sample_cylinder_z(rng, np_, 0.05, -0.55, 0.25)
        shade = _sample_cone(rng, ns, 0.25, 0.62, 0.38, 0.18)
        pts = np.vstack([base, pole, shade])
        labels = [0] * nb + [1] * np_ + [2] * ns
    else:
        raise ValueError(f"unknown family '{family}'")
    return pts, labels


def make_prototypes(part_names: list[str], dim: int, seed: int) -> np.ndarray:
    """Deterministic orthonormal prototype rows via QR with a positive
    diagonal sign convention."""
    c = len(part_names)
    if c > dim:
        raise ValueError(f"{c} parts need feature_dim >= {c}, got {dim}")
    rng = np.random.default_rng([seed, 9001])
    m = rng.standard_normal((dim, c))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))[None, :]
    return q.T.copy()


class FieldPainter:
    """Paints per-view prototype fields: each pixel takes the prototype of
    its min-depth visible point (plus seeded gaussian noise)."""

    def __init__(self, prototypes: np.ndarray, part_names: list[str],
                 sigma: float, seed: int):
        self.prototypes = np.asarray(prototypes, dtype=np.float64)
        self.part_names = list(part_names)
        self.sigma = float(sigma)
        self.seed = int(seed)

    def paint(self, shape_index: int, points: np.ndarray,
              labels: list[list[int]], shape_parts: list[str],
              cameras: list[Camera]) -> list[FeatureField]:
        gid = [self.part_names.index(p) for p in shape_parts]
        dim = self.prototypes.shape[1]
        fields = []
        for r, cam in enumerate(cameras):
            w, h = cam.resolution
            u, v, z, _ = project_visible(points, cam)
            winner: dict[tuple[int, int], tuple[float, int]] = {}
            for i in range(points.shape[0]):
                if u[i] < 0:
                    continue
                key = (int(v[i]), int(u[i]))
                cand = (float(z[i]), i)
                if key not in winner or cand < winner[key]:
                    winner[key] = cand
            grid = np.zeros((h, w, dim))
            rng = np.random.default_rng([self.seed, 7001, shape_index, r])
            for (vi, ui) in sorted(winner):
                _, idx = winner[(vi, ui)]
                proto = self.prototypes[gid[labels[idx][0]]]
                if self.sigma > 0:
                    proto = proto + self.sigma * rng.standard_normal(dim)
                grid[vi, ui] = proto
            fields.append(FeatureField(view_id=r, grid=grid))
        return fields

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "synth-fields",
            "part_names": self.part_names,
            "prototypes": [[float(x) for x in row] for row in self.prototypes],
            "noise_sigma": self.sigma,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "FieldPainter":
        if d.get("kind") != "synth-fields":
            raise DataFormatError(f"not a synth fields spec: kind={d.get('kind')!r}")
        try:
            return FieldPainter(prototypes=np.asarray(d["prototypes"], dtype=np.float64),
                                part_names=list(d["part_names"]),
                                sigma=float(d["noise_sigma"]),
                                seed=int(d["seed"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"bad synth fields spec: {e}") from e


@dataclass
class SynthDataset:
    spec: SynthSpec
    clouds: list[PointCloud]
    categories: list[str]
    shape_parts: list[list[str]]   # per-shape part-name list (label id order)
    part_names: list[str]          # global, deduplicated
    prototypes: np.ndarray         # (C_global, feature_dim), orthonormal rows
    painter: FieldPainter = field(init=False)

    def __post_init__(self):
        self.painter = FieldPainter(self.prototypes, self.part_names,
                                    self.spec.noise_sigma, self.spec.seed)

    def paint_fields(self, shape_index: int, points: np.ndarray,
                     cameras: list[Camera]) -> list[FeatureField]:
        return self.painter.paint(shape_index, points,
                                  self.clouds[shape_index].labels,
                                  self.shape_parts[shape_index], cameras)

    def text_table(self) -> TextTable:
        return TextTable(names=list(self.part_names),
                         embeddings=self.prototypes.copy(),
                         prompts=["{part}"])


def synth_generate(spec: SynthSpec) -> SynthDataset:
    """Sample analytic part surfaces per family; prototypes are orthonormal
    rows shared by the painted fields and the text table. All randomness
    derives from spec.seed via per-shape child streams."""
    part_names: list[str] = []
    for block in spec.families:
        for p in FAMILY_PARTS[block.family]:
            if p not in part_names:
                part_names.append(p)
    prototypes = make_prototypes(part_names, spec.feature_dim, spec.seed)

    clouds, categories, shape_parts = [], [], []
    index = 0
    for block in spec.families:
        for _ in range(block.count):
            srng = np.random.default_rng([spec.seed, 101, index])
            pts, labs = sample_family_shape(block.family, block.points, srng)
            clouds.append(PointCloud(points=pts, labels=[[l] for l in labs],
                                     shape_id=f"{block.family}_{index:04d}"))
            categories.append(block.family)
            shape_parts.append(list(FAMILY_PARTS[block.family]))
            index += 1
    return SynthDataset(spec=spec, clouds=clouds, categories=categories,
                        shape_parts=shape_parts, part_names=part_names,
                        prototypes=prototypes)


def write_synth_dataset(ds: SynthDataset, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    _write_json(os.path.join(outdir, "manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "synth-dataset",
        "spec": ds.spec.to_dict(),
        "shape_ids": [c.shape_id for c in ds.clouds],
    })
    _write_json(os.path.join(outdir, "fields_spec.json"), ds.painter.to_dict())
    write_text_table(ds.text_table(), os.path.join(outdir, "text_table"))
    for cloud, cat, parts in zip(ds.clouds, ds.categories, ds.shape_parts):
        write_shape(cloud, parts, cat, os.path.join(outdir, "shapes", cloud.shape_id))


def read_fields_spec(path: str) -> FieldPainter:
    d = _read_json(path, DataFormatError)
    _checked_version(d, path, DataFormatError)
    return FieldPainter.from_dict(d)


# public aliases for the JSON/blob helpers used by the CLI and exporters
def read_json(path: str, err: type[DataFormatError] = DataFormatError):
    return _read_json(path, err)


def write_json(path: str, obj) -> None:
    _write_json(path, obj)


def write_blob(path: str, arr: np.ndarray, dtype: str) -> str:
    return _write_blob(path, arr, dtype)


def dataset_shape_ids(datadir: str) -> list[str]:
    man_path = os.path.join(datadir, "manifest.json")
    man = _read_json(man_path, DataFormatError)
    _checked_version(man, man_path, DataFormatError)
    try:
        return [str(s) for s in man["shape_ids"]]
    except (KeyError, TypeError) as e:
        raise DataFormatError(f"{man_path}: bad shape_ids: {e}") from e


def list_cache_dirs(cachedir: str) -> list[str]:
    """Immediate subdirectories holding cache manifests, sorted by name."""
    out = []
    for name in sorted(os.listdir(cachedir)):
        sub = os.path.join(cachedir, name)
        if os.path.isdir(sub) and os.path.isfile(os.path.join(sub, "manifest.json")):
            out.append(sub)
    return out
