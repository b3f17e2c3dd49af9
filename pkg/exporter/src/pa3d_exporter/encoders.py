"""Dense 2D and text encoder registry.

Real pretrained entries ("dinov2-base", "openclip-vitbigg14") require local
weights and raise MissingWeightsError when they cannot be loaded; the
"toy-*" entries are deterministic procedural stand-ins so the export
pipeline and its conformance tests run with no downloads. Provenance
records whichever id produced the artifact.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import zoom

from .formats import fnv1a64


class MissingWeightsError(RuntimeError):
    """Pretrained weights are not available locally."""


class UnknownEncoderError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dense 2D encoders


class ToySpectralEncoder:
    """Deterministic dense encoder: per-cell image statistics pushed through
    a seeded random projection, computed on a coarse patch grid and
    bicubically upsampled to pixel resolution (the same patch-grid-then-
    upsample shape real ViT features go through)."""

    patch = 4

    def __init__(self, dim: int, seed: int = 12061):
        self.dim = dim
        rng = np.random.default_rng([seed, dim])
        self.proj = rng.standard_normal((12, dim)) / np.sqrt(12)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) image -> (H, W, dim) feature grid."""
        h, w, _ = image.shape
        p = self.patch
        gh, gw = h // p, w // p
        cells = image[: gh * p, : gw * p].reshape(gh, p, gw, p, 3)
        mean = cells.mean(axis=(1, 3))
        std = cells.std(axis=(1, 3))
        gray = cells.mean(axis=(1, 3, 4))
        gx = np.diff(gray, axis=1, append=gray[:, -1:])  # edge-replicated
        gy = np.diff(gray, axis=0, append=gray[-1:, :])
        stats = np.concatenate(
            [mean, std, mean * std,
             gx[..., None], gy[..., None], (gx * gy)[..., None]], axis=2)
        grid = np.tanh(stats @ self.proj)
        scale = (h / gh, w / gw)
        up = np.stack([zoom(grid[:, :, c], scale, order=3, grid_mode=True,
                            mode="nearest")
                       for c in range(self.dim)], axis=2)
        return up


class Dinov2Encoder:
    """Real DINOv2 via transformers; only instantiable when torch and the
    local weights are present."""

    def __init__(self, dim: int, variant: str = "facebook/dinov2-base"):
        self.dim = dim
        self.variant = variant
        try:
            import torch  # noqa: F401
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as e:
            raise MissingWeightsError(
                f"torch/transformers unavailable for {variant}: {e}") from e
        try:
            self.processor = AutoImageProcessor.from_pretrained(
                variant, local_files_only=True)
            self.model = AutoModel.from_pretrained(variant,
                                                   local_files_only=True)
        except Exception as e:  # hub raises several unrelated types here
            raise MissingWeightsError(
                f"weights for {variant} not found locally: {e}") from e

    def encode(self, image: np.ndarray) -> np.ndarray:
        import torch

        h, w, _ = image.shape
        inputs = self.processor(images=(image * 255).astype(np.uint8),
                                return_tensors="pt")
        with torch.no_grad():
            out = self.model(**inputs).last_hidden_state[0, 1:]
        side = int(np.sqrt(out.shape[0]))
        grid = out.reshape(side, side, -1).numpy()[:, :, : self.dim]
        scale = (h / side, w / side)
        return np.stack([zoom(grid[:, :, c], scale, order=3, grid_mode=True,
                              mode="nearest")
                         for c in range(self.dim)], axis=2)


DENSE_ENCODERS = {
    "toy-spectral-v1": ToySpectralEncoder,
    "dinov2-base": Dinov2Encoder,
}


def make_dense_encoder(encoder_id: str, dim: int):
    if encoder_id not in DENSE_ENCODERS:
        raise UnknownEncoderError(
            f"unknown dense encoder '{encoder_id}', "
            f"choose from {sorted(DENSE_ENCODERS)}")
    return DENSE_ENCODERS[encoder_id](dim)


# ---------------------------------------------------------------------------
# text encoders


class HashedNgramTextEncoder:
    """Deterministic text embedding: signed character-trigram feature
    hashing, L2-normalized."""

    def __init__(self, dim: int):
        if dim < 2:
            raise ValueError("text embedding dim must be >= 2")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim)
        padded = f"^^{text.lower()}$$"
        for i in range(len(padded) - 2):
            gram = padded[i:i + 3].encode("utf-8")
            h = int(fnv1a64(gram), 16)
            idx = h % self.dim
            sign = 1.0 if (h >> 63) & 1 else -1.0
            out[idx] += sign
        norm = np.linalg.norm(out)
        if norm == 0.0:
            out[0] = 1.0
            norm = 1.0
        return out / norm


class OpenClipTextEncoder:
    def __init__(self, dim: int, variant: str = "ViT-bigG-14"):
        self.dim = dim
        try:
            import open_clip  # noqa: F401
        except ImportError as e:
            raise MissingWeightsError(
                f"open_clip unavailable for {variant}: {e}") from e
        raise MissingWeightsError(
            f"no local weights configured for OpenCLIP {variant}")


TEXT_ENCODERS = {
    "hashed-ngrams-v1": HashedNgramTextEncoder,
    "openclip-vitbigg14": OpenClipTextEncoder,
}


def make_text_encoder(encoder_id: str, dim: int):
    if encoder_id not in TEXT_ENCODERS:
        raise UnknownEncoderError(
            f"unknown text encoder '{encoder_id}', "
            f"choose from {sorted(TEXT_ENCODERS)}")
    return TEXT_ENCODERS[encoder_id](dim)
