"""Image -> feature-vector maps used by the Frechet distance."""
from __future__ import annotations

import numpy as np

from ..errors import DataError, ParameterDomainError


class FeatureEmbedder:
    kind: str = ""
    output_dim: int = 0

    def __call__(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "output_dim": self.output_dim}


class DownsampleEmbedder(FeatureEmbedder):
    """Block-average each image to ``side x side`` pixels and flatten."""

    kind = "downsample_pixel_embedder"

    def __init__(self, side: int = 8):
        if side < 1:
            raise ParameterDomainError("side must be positive")
        self.side = side
        self.output_dim = side * side

    def __call__(self, images):
        import torch
        import torch.nn.functional as F

        t = torch.as_tensor(np.asarray(images, dtype=np.float64))[:, None]
        return F.adaptive_avg_pool2d(t, self.side).flatten(1).numpy()

    def describe(self):
        return {**super().describe(), "side": self.side}


class RandomProjectionEmbedder(FeatureEmbedder):
    """Fixed Gaussian random projection of the flattened pixels."""

    kind = "random_projection_embedder"

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ParameterDomainError("dim must be positive")
        self.output_dim = dim
        self.seed = seed
        self._matrices: dict[int, np.ndarray] = {}

    def _matrix(self, n_pixels: int) -> np.ndarray:
        if n_pixels not in self._matrices:
            rng = np.random.default_rng([self.seed, n_pixels])
            self._matrices[n_pixels] = rng.standard_normal((n_pixels, self.output_dim)) / np.sqrt(n_pixels)
        return self._matrices[n_pixels]

    def __call__(self, images):
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return flat @ self._matrix(flat.shape[1])

    def describe(self):
        return {**super().describe(), "seed": self.seed}


class CanonicalEmbedder(FeatureEmbedder):
    """TorchScript feature extractor loaded from an external asset file.

    The module receives (N, 1, H, W) float32 images in [-1, 1] and must return
    (N, D) features; any resizing or channel replication is its own concern.
    """

    kind = "canonical_fid_embedder"

    def __init__(self, path: str, batch_size: int = 50):
        import torch

        try:
            self.module = torch.jit.load(path, map_location="cpu").eval()
        except Exception as exc:
            raise DataError(f"cannot load embedder asset {path}: {exc}") from exc
        self.path = path
        self.batch_size = batch_size
        self.output_dim = 0

    def __call__(self, images):
        import torch

        images = np.asarray(images, dtype=np.float32)
        feats = []
        with torch.no_grad():
            for s in range(0, len(images), self.batch_size):
                out = self.module(torch.from_numpy(images[s : s + self.batch_size])[:, None])
                feats.append(out.reshape(out.shape[0], -1).double().numpy())
        result = np.concatenate(feats)
        self.output_dim = result.shape[1]
        return result

    def describe(self):
        return {**super().describe(), "path": self.path}


def make_embedder(kind: str, dim: int = 64, seed: int = 0, path: str | None = None) -> FeatureEmbedder:
    if kind in ("random_projection", "random_projection_embedder"):
        return RandomProjectionEmbedder(dim, seed)
    if kind in ("downsample", "downsample_pixel_embedder"):
        return DownsampleEmbedder(int(round(np.sqrt(dim))))
    if kind in ("canonical", "canonical_fid_embedder"):
        if not path:
            raise ParameterDomainError("the canonical embedder needs an asset path")
        return CanonicalEmbedder(path)
    raise ParameterDomainError(f"unknown embedder kind {kind!r}")
