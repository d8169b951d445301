"""Residual encoder-decoder generator and patch discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from ..errors import ParameterDomainError


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: tuple[int, int] = (256, 256)
    base_width: int = 64
    n_residual_blocks: int | None = None
    downsampling_levels: int = 2
    norm: str = "instance"
    near_identity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.n_residual_blocks is None:
            blocks = 9 if min(self.image_size) >= 256 else 6
            object.__setattr__(self, "n_residual_blocks", blocks)
        if self.base_width < 1 or self.n_residual_blocks < 0 or self.downsampling_levels < 0:
            raise ParameterDomainError(f"bad generator spec {self}")
        if self.norm not in ("instance", "none"):
            raise ParameterDomainError(f"unknown norm {self.norm!r}")
        step = 2**self.downsampling_levels
        if any(s % step for s in self.image_size):
            raise ParameterDomainError(f"image size {self.image_size} not divisible by {step}")

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass(frozen=True)
class DiscriminatorSpec:
    n_layers: int = 3
    base_width: int = 64
    norm: str = "instance"

    def __post_init__(self):
        if self.n_layers < 1 or self.base_width < 1:
            raise ParameterDomainError(f"bad discriminator spec {self}")
        if self.norm not in ("instance", "none"):
            raise ParameterDomainError(f"unknown norm {self.norm!r}")

    def to_dict(self):
        return asdict(self)


def _norm(kind: str, ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch) if kind == "instance" else nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            _norm(norm, ch),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Single-channel image to image map with a tanh output in [-1, 1].

    With ``near_identity`` the last convolution starts scaled by 1e-2 and the
    output is ``tanh(atanh(0.99 x) + f(x))``, so an untrained network stays
    close to the identity.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w, norm = spec.base_width, spec.norm
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(1, w, 7), _norm(norm, w), nn.ReLU(True)]
        ch = w
        for _ in range(spec.downsampling_levels):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(norm, ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [ResidualBlock(ch, norm) for _ in range(spec.n_residual_blocks)]
        for _ in range(spec.downsampling_levels):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(norm, ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        last = nn.Conv2d(ch, 1, 7)
        layers += [nn.ReflectionPad2d(3), last]
        self.model = nn.Sequential(*layers)
        init_weights(self)
        if spec.near_identity:
            with torch.no_grad():
                last.weight.mul_(1e-2)

    def forward(self, x):
        h = self.model(x)
        if self.spec.near_identity:
            h = h + torch.atanh(0.99 * x.clamp(-1.0, 1.0))
        return torch.tanh(h)


class PatchDiscriminator(nn.Module):
    """Patch classifier returning a map of raw realness logits."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w, norm = spec.base_width, spec.norm
        layers = [nn.Conv2d(1, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, spec.n_layers):
            prev, mult = mult, min(2**n, 8)
            layers += [nn.Conv2d(w * prev, w * mult, 4, stride=2, padding=1), _norm(norm, w * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2**spec.n_layers, 8)
        layers += [nn.Conv2d(w * prev, w * mult, 4, stride=1, padding=1), _norm(norm, w * mult), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(w * mult, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return self.model(x)


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    """N(0, 0.02) convolution weights and zero biases."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
