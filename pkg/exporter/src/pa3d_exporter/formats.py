"""Readers/writers for the PA3D-1 on-disk formats this exporter touches.

Deliberately self-contained: the format (little-endian raw blobs + JSON
manifests with 64-bit FNV-1a checksums) is the contract with the core
package, so this module re-implements exactly what the format documents
rather than importing core internals.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_VERSION = "PA3D-1"


class ExportFormatError(RuntimeError):
    pass


def fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def read_json(path: str):
    if not os.path.isfile(path):
        raise ExportFormatError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_blob(path: str, arr: np.ndarray, dtype: str) -> str:
    data = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(data)
    return fnv1a64(data)


def file_checksum(path: str) -> str:
    with open(path, "rb") as f:
        return fnv1a64(f.read())


def read_shape(dirpath: str) -> tuple[np.ndarray, list[list[int]], list[str], str, str]:
    """Load one cloud directory: points, labels, part names, shape id,
    category."""
    man = read_json(os.path.join(dirpath, "manifest.json"))
    if man.get("format_version") != FORMAT_VERSION or man.get("kind") != "shape":
        raise ExportFormatError(f"{dirpath}: not a {FORMAT_VERSION} shape dir")
    n = int(man["num_points"])
    raw = open(os.path.join(dirpath, "points.f32"), "rb").read()
    if len(raw) != n * 3 * 4:
        raise ExportFormatError(f"{dirpath}: points.f32 has {len(raw)} bytes, "
                                f"expected {n * 3 * 4}")
    points = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, 3)
    labels = []
    with open(os.path.join(dirpath, "labels.jsonl"), "r", encoding="utf-8") as f:
        for line in f:
            labels.append([int(x) for x in json.loads(line)])
    parts = read_json(os.path.join(dirpath, "parts.json"))
    return points, labels, list(parts), str(man.get("shape_id", "")), \
        str(man.get("category", ""))


def dataset_shape_dirs(root: str) -> list[str]:
    """Shape directories of a dataset root (or the root itself if it is a
    single shape dir)."""
    man_path = os.path.join(root, "manifest.json")
    if os.path.isfile(man_path):
        man = read_json(man_path)
        if man.get("kind") == "synth-dataset":
            return [os.path.join(root, "shapes", sid)
                    for sid in man["shape_ids"]]
        if man.get("kind") == "shape":
            return [root]
    raise ExportFormatError(f"{root}: neither a dataset root nor a shape dir")


def write_fields_dir(dirpath: str, shape_id: str, grids: list[np.ndarray],
                     provenance: str) -> None:
    """Per-view f32 feature grids in the core's feature-fields layout."""
    os.makedirs(dirpath, exist_ok=True)
    h, w, d = grids[0].shape
    views = []
    for r, grid in enumerate(grids):
        if grid.shape != (h, w, d):
            raise ExportFormatError("view grids must share one shape")
        name = f"view_{r:03d}.f32"
        chk = write_blob(os.path.join(dirpath, name), grid, "f4")
        views.append({"view_id": r, "file": name, "checksum": chk})
    write_json(os.path.join(dirpath, "fields_manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "feature-fields",
        "shape_id": shape_id,
        "resolution": [int(h), int(w)],
        "feature_dim": int(d),
        "provenance": provenance,
        "views": views,
    })


def write_text_table(dirpath: str, names: list[str], embeddings: np.ndarray,
                     prompts: list[str]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    checks = {"embeddings.f32": write_blob(
        os.path.join(dirpath, "embeddings.f32"), embeddings, "f4")}
    parts_path = os.path.join(dirpath, "parts.json")
    write_json(parts_path, list(names))
    checks["parts.json"] = file_checksum(parts_path)
    prompts_path = os.path.join(dirpath, "prompts.json")
    write_json(prompts_path, list(prompts))
    checks["prompts.json"] = file_checksum(prompts_path)
    write_json(os.path.join(dirpath, "manifest.json"), {
        "format_version": FORMAT_VERSION,
        "kind": "text-table",
        "dim": int(embeddings.shape[1]),
        "count": len(names),
        "checksums": checks,
    })
