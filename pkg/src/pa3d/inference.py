"""Zero-shot segmentation and open-vocabulary similarity queries.

One transformer forward per cloud: patch scores are cosine similarities
between the normalized text-head outputs and the text table rows; points
inherit the label of their nearest patch centroid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PatchSet, PointCloud, build_patches, farthest_point_sampling
from .model import ModelParams, encode_tokens, project, transformer_forward


@dataclass
class TextTable:
    """Part names mapped to unit-norm embedding rows."""

    names: list[str]
    embeddings: np.ndarray          # (C, d_t), rows unit-norm
    prompts: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.names) != self.embeddings.shape[0]:
            raise ValueError(
                f"{len(self.names)} names but {self.embeddings.shape[0]} rows")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise ValueError(f"duplicate part names in text table: {dupes}")
        norms = np.linalg.norm(self.embeddings, axis=1)
        bad = np.abs(norms - 1.0) > 1e-6
        if bad.any():
            raise ValueError(
                f"text rows not unit-norm: {[self.names[i] for i in np.nonzero(bad)[0]]}")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, names: list[str]) -> "TextTable":
        idx = []
        for n in names:
            if n not in self.names:
                raise KeyError(f"part '{n}' missing from text table")
            idx.append(self.names.index(n))
        return TextTable(names=list(names), embeddings=self.embeddings[idx].copy(),
                         prompts=self.prompts)


@dataclass
class Segmentation:
    point_labels: np.ndarray   # (N,) int, index into the text table
    patch_labels: np.ndarray   # (G,) int
    patch_scores: np.ndarray   # (G, C)
    patches: PatchSet


def _nearest_patch(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest patch centroid per point (squared distance, ties to the
    smallest patch index)."""
    assign = np.empty(points.shape[0], dtype=np.int64)
    for i, pt in enumerate(points):
        diff = centers - pt
        assign[i] = int(np.argmin((diff * diff).sum(axis=1)))
    return assign


def patch_tokens(params: ModelParams, cloud: PointCloud,
                 seed_index: int = 0) -> tuple[PatchSet, np.ndarray]:
    """FPS + kNN patching followed by the single encoder forward.
    Returns the patches and the normalized text-head embeddings."""
    cfg = params.cfg
    centers = farthest_point_sampling(cloud.points, cfg.num_patches, seed_index)
    patches = build_patches(cloud.points, centers, cfg.patch_size)
    toks = encode_tokens(params, patches, cloud.points)
    z = transformer_forward(params, toks)
    return patches, project(params, "htext", z).data


def segment(params: ModelParams, cloud: PointCloud, text_table: TextTable,
            seed_index: int = 0) -> Segmentation:
    """Label every point with the argmax part of its nearest patch."""
    if len(text_table.names) == 0:
        raise ValueError("text table is empty")
    if text_table.dim != params.cfg.head_text_out:
        raise ValueError(
            f"text table dim {text_table.dim} != head output "
            f"{params.cfg.head_text_out}")
    patches, emb = patch_tokens(params, cloud, seed_index)
    scores = emb @ text_table.embeddings.T          # (G, C)
    patch_labels = np.argmax(scores, axis=1)        # ties: smallest part index
    assign = _nearest_patch(cloud.points, patches.centers)
    return Segmentation(point_labels=patch_labels[assign],
                        patch_labels=patch_labels,
                        patch_scores=scores,
                        patches=patches)


def query_similarity(params: ModelParams, cloud: PointCloud,
                     query_vec: np.ndarray, top_k: int,
                     seed_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-point scores against a single query embedding plus the top_k
    point indices (score descending, ties to the smallest index)."""
    query_vec = np.asarray(query_vec, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(query_vec)
    if qn == 0.0:
        raise ValueError("query vector is zero")
    if query_vec.shape[0] != params.cfg.head_text_out:
        raise ValueError(
            f"query dim {query_vec.shape[0]} != head output "
            f"{params.cfg.head_text_out}")
    n = cloud.points.shape[0]
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k {top_k} outside [1, {n}]")

    patches, emb = patch_tokens(params, cloud, seed_index)
    patch_scores = emb @ (query_vec / qn)
    assign = _nearest_patch(cloud.points, patches.centers)
    point_scores = patch_scores[assign]
    order = np.lexsort((np.arange(n), -point_scores))
    return point_scores, order[:top_k]
