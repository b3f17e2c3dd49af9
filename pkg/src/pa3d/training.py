"""Two-stage pre-training: cosine distillation onto cached 2D-lifted patch
targets (stage 1), then sigmoid BCE alignment of patch embeddings with
part text rows using fractional labels and within-sample negatives
(stage 2). A joint mode optimizes the 1:1 sum of both losses.

Per-shape patching is re-sampled every epoch; stage-1 targets come from the
nearest cached center, stage-2 labels are recomputed on the (possibly
augmented) cloud.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import (AugmentConfig, PatchSet, PointCloud, augment,
                       build_patches, farthest_point_sampling)
from .inference import TextTable
from .liftproj import FeatureCache
from .model import (ModelParams, encode_tokens, project, set_trainable,
                    transformer_forward)
from .tensor import Graph, Tensor, backward

log = logging.getLogger("pa3d.training")

STAGES = ("1", "2", "joint")


@dataclass
class StageConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    freeze_policy: str | None = None   # None = per-stage default
    aug: AugmentConfig | None = None   # None = no augmentation
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def effective_policy(self) -> str:
        if self.freeze_policy is not None:
            return self.freeze_policy
        return "last_block_and_heads" if self.stage == "2" else "all"


@dataclass
class FractionalLabels:
    """y[i, j] = fraction of patch i's members carrying part j. Rows can sum
    past 1 (multi-label points) or to 0 (fully unlabeled patch)."""

    y: np.ndarray            # (G, C_s) in [0, 1]
    part_ids: list[str]


@dataclass
class TrainingSet:
    samples: list[FeatureCache]
    text_table: TextTable | None = None


def match_patches(online_centers: np.ndarray,
                  cached_centers: np.ndarray) -> np.ndarray:
    """Index of the nearest cached center per online center (squared
    distance, ties to the smallest index; many-to-one allowed)."""
    cached_centers = np.asarray(cached_centers, dtype=np.float64)
    if cached_centers.shape[0] < 1:
        raise ValueError("cached center set is empty")
    out = np.empty(online_centers.shape[0], dtype=np.int64)
    for i, c in enumerate(np.asarray(online_centers, dtype=np.float64)):
        diff = cached_centers - c
        out[i] = int(np.argmin((diff * diff).sum(axis=1)))
    return out


def compute_fractional_labels(patches: PatchSet, point_labels: list[list[int]],
                              part_ids: list[str]) -> FractionalLabels:
    """Count-based fractional labels; multi-label points contribute to every
    part they carry."""
    c = len(part_ids)
    g, k = patches.membership.shape
    y = np.zeros((g, c))
    for i in range(g):
        for m in patches.membership[i]:
            for pid in point_labels[m]:
                if not 0 <= pid < c:
                    raise ValueError(
                        f"point {m} carries part id {pid}, but the shape "
                        f"declares only {c} parts")
                y[i, pid] += 1.0
    y /= k
    return FractionalLabels(y=y, part_ids=list(part_ids))


def stage1_loss(pred: Tensor, targets: Tensor) -> Tensor:
    """Mean over patches of (1 - cosine similarity); range [0, 2]."""
    cos = T.cosine_similarity_rows(pred, targets)
    return T.reduce_mean(T.scalar_add(T.scalar_mul(cos, -1.0), 1.0))


def stage2_loss(z_text: Tensor, text_rows: np.ndarray, y: np.ndarray,
                log_tau: Tensor, bias: Tensor) -> Tensor:
    """Sigmoid BCE over this sample's G x C_s grid (raw sum, no
    normalization):  sum y*softplus(-s) + (1-y)*softplus(s)  with
    s = <z, t>/tau + b. Rows of z_text and text_rows must be unit-norm.
    """
    text_rows = np.asarray(text_rows, dtype=np.float64)
    if text_rows.ndim != 2 or text_rows.shape[0] < 1:
        raise ValueError("stage2_loss needs at least one text row")
    if z_text.shape[0] != y.shape[0] or text_rows.shape[0] != y.shape[1]:
        raise ValueError(
            f"label grid {y.shape} does not match {z_text.shape[0]} patches "
            f"x {text_rows.shape[0]} parts")
    sims = T.matmul(z_text, T.transpose(Tensor(text_rows)))
    inv_tau = T.exp(T.neg(log_tau))
    s = T.add(T.mul(sims, inv_tau), bias)
    y_t = Tensor(np.asarray(y, dtype=np.float64))
    one_minus_y = Tensor(1.0 - y_t.data)
    loss = T.add(T.mul(y_t, T.softplus(T.neg(s))),
                 T.mul(one_minus_y, T.softplus(s)))
    return T.reduce_sum(loss)


class AdamW:
    """Decoupled-weight-decay Adam. Parameters without an accumulated
    gradient are skipped entirely (no decay either), matching the usual
    torch semantics and keeping untouched groups bit-identical."""

    def __init__(self, lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, tensors: list[Tensor]) -> None:
        for t in tensors:
            if not t.requires_grad or t.grad is None:
                continue
            st = self.state.setdefault(t.param_id(), {
                "m": np.zeros(t.shape), "v": np.zeros(t.shape), "t": 0})
            st["t"] += 1
            g = t.grad
            st["m"] = self.b1 * st["m"] + (1 - self.b1) * g
            st["v"] = self.b2 * st["v"] + (1 - self.b2) * (g * g)
            mhat = st["m"] / (1 - self.b1 ** st["t"])
            vhat = st["v"] / (1 - self.b2 ** st["t"])
            t.data = t.data - self.lr * (mhat / (np.sqrt(vhat) + self.eps)) \
                - self.lr * self.wd * t.data

    @staticmethod
    def zero_grads(tensors: list[Tensor]) -> None:
        for t in tensors:
            t.zero_grad()


def _grad_norm(tensors: list[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def _shape_loss(params: ModelParams, sample: FeatureCache, cfg: StageConfig,
                text_table: TextTable | None,
                rng: np.random.Generator) -> Tensor | None:
    """Forward one shape to its (unscaled) loss on the active graph.
    Returns None when a stage-2 shape has no valid parts."""
    cloud = PointCloud(points=sample.points, labels=sample.labels,
                       shape_id=sample.shape_id)
    if cfg.aug is not None:
        cloud = augment(cloud, rng, cfg.aug)
    pts = cloud.points
    seed_index = int(rng.integers(pts.shape[0]))

    need_text = cfg.stage in ("2", "joint")
    if need_text and len(sample.part_ids) == 0:
        log.warning("shape %s has no valid parts; skipped for stage %s",
                    sample.shape_id, cfg.stage)
        return None

    centers = farthest_point_sampling(pts, params.cfg.num_patches, seed_index)
    patches = build_patches(pts, centers, params.cfg.patch_size)
    toks = encode_tokens(params, patches, pts)
    z = transformer_forward(params, toks)

    losses = []
    if cfg.stage in ("1", "joint"):
        matched = match_patches(patches.centers, sample.centers)
        targets = Tensor(sample.patch_targets[matched])
        losses.append(stage1_loss(project(params, "h2d", z), targets))
    if need_text:
        rows = text_table.subset(sample.part_ids).embeddings
        y = compute_fractional_labels(patches, cloud.labels,
                                      sample.part_ids).y
        losses.append(stage2_loss(project(params, "htext", z), rows, y,
                                  params["tau_bias/log_tau"],
                                  params["tau_bias/bias"]))
    return losses[0] if len(losses) == 1 else T.add(losses[0], losses[1])


def run_stage(dataset: TrainingSet, params: ModelParams, cfg: StageConfig,
              log_path: str | None = None) -> list[dict]:
    """Optimize the configured stage over the dataset. Mutates params in
    place; returns the per-step metric records (also written as JSONL when
    log_path is given)."""
    if cfg.stage in ("2", "joint") and dataset.text_table is None:
        raise ValueError(f"stage {cfg.stage} requires a text table")
    if not dataset.samples:
        raise ValueError("empty training set")

    set_trainable(params, cfg.effective_policy())
    if cfg.stage in ("2", "joint"):
        # tau and b always learn during text alignment
        params.trainable["tau_bias"] = True
        params._sync_flags()

    opt = AdamW(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    tensors = list(params.tensors.values())
    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []
    step = 0
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for _epoch in range(cfg.epochs):
            order = rng.permutation(len(dataset.samples))
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                AdamW.zero_grads(tensors)
                batch_loss = 0.0
                used = 0
                for si in batch:
                    with Graph():
                        loss = _shape_loss(params, dataset.samples[si], cfg,
                                           dataset.text_table, rng)
                        if loss is None:
                            continue
                        used += 1
                        batch_loss += loss.item()
                        backward(T.scalar_mul(loss, 1.0 / len(batch)))
                if used == 0:
                    continue
                mean_loss = batch_loss / used
                if not np.isfinite(mean_loss):
                    raise FloatingPointError(
                        f"non-finite loss at step {step} (stage {cfg.stage}); "
                        f"aborting before the parameters are poisoned")
                gnorm = _grad_norm(tensors)
                opt.step(tensors)
                params.check_finite()
                rec = {"step": step, "stage": cfg.stage,
                       "loss": mean_loss, "lr": cfg.learning_rate,
                       "grad_norm": gnorm}
                records.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                step += 1
    finally:
        if logf:
            logf.close()
    return records
