"""Measurement operator: identity system response plus additive noise.

``apply_measurement`` works on numpy images for dataset simulation;
``MeasurementOperator`` is the torch version that sits inside the training
graph so gradients flow from simulated measurements back into the generator.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .clb import ObjectImage
from .errors import ParameterDomainError

SYSTEM_OPERATORS = ("identity",)
NOISE_MODELS = ("gaussian_additive", "none")
SEED_POLICIES = ("fresh_per_call", "fixed")


@dataclass(frozen=True)
class MeasurementConfig:
    system_operator: str = "identity"
    noise_model: str = "gaussian_additive"
    noise_mean: float = 0.0
    noise_std: float = 0.04
    seed_policy: str = "fresh_per_call"

    def __post_init__(self):
        if self.system_operator not in SYSTEM_OPERATORS:
            raise ParameterDomainError(f"unknown system operator {self.system_operator!r}")
        if self.noise_model not in NOISE_MODELS:
            raise ParameterDomainError(f"unknown noise model {self.noise_model!r}")
        if self.seed_policy not in SEED_POLICIES:
            raise ParameterDomainError(f"unknown seed policy {self.seed_policy!r}")
        if not (np.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ParameterDomainError(f"noise_std must be >= 0, got {self.noise_std}")
        if not np.isfinite(self.noise_mean):
            raise ParameterDomainError("noise_mean must be finite")

    @classmethod
    def noiseless(cls) -> "MeasurementConfig":
        return cls(noise_model="none", noise_std=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementConfig":
        return cls(**d)


@dataclass
class MeasurementImage:
    pixels: np.ndarray
    provenance: str = "simulated"
    domain_tag: str = "Y"

    def __post_init__(self):
        if self.provenance not in ("real_measurement", "simulated"):
            raise ParameterDomainError(f"bad provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.pixels)):
            raise ParameterDomainError("measurement pixels must be finite")


def _system(pixels, cfg: MeasurementConfig):
    # identity is the only operator; the hook keeps the call structure for linear extensions
    return pixels


def apply_measurement(img: ObjectImage | np.ndarray, cfg: MeasurementConfig, seed: int) -> MeasurementImage:
    pixels = img.pixels if isinstance(img, ObjectImage) else np.asarray(img)
    if not np.all(np.isfinite(pixels)):
        raise ParameterDomainError("input image must be finite")
    out = _system(pixels, cfg)
    if cfg.noise_model == "gaussian_additive":
        rng = np.random.default_rng(seed)
        noise = rng.normal(cfg.noise_mean, cfg.noise_std, size=pixels.shape)
        out = (out + noise).astype(pixels.dtype, copy=False)
    else:
        out = np.array(out, copy=True)
    return MeasurementImage(out, "simulated")


class MeasurementOperator:
    """Differentiable H_n for torch tensors of shape (B, C, H, W).

    With ``fresh_per_call`` noise comes from ``generator`` and advances it on
    every call; with ``fixed`` every call re-seeds from ``seed`` so repeated
    calls on equal shapes add the same noise.
    """

    def __init__(self, cfg: MeasurementConfig, seed: int = 0, generator: torch.Generator | None = None):
        self.cfg = cfg
        self.seed = int(seed)
        if generator is None:
            generator = torch.Generator().manual_seed(self.seed)
        self.generator = generator

    @property
    def is_noiseless(self) -> bool:
        return self.cfg.noise_model == "none"

    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        out = _system(img, self.cfg)
        if self.cfg.noise_model == "none":
            return out
        if self.cfg.seed_policy == "fixed":
            gen = torch.Generator(device=img.device).manual_seed(self.seed)
        else:
            gen = self.generator
        noise = torch.randn(img.shape, generator=gen, dtype=img.dtype, device=img.device)
        return out + (noise * self.cfg.noise_std + self.cfg.noise_mean)
