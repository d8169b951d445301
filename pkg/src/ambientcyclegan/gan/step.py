"""Model construction, one alternating update, and inference helpers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from ..clb import ObjectImage
from ..errors import ParameterDomainError, TrainingDivergenceError
from ..measurement import MeasurementImage
from .losses import (
    Measure,
    ModelBundle,
    combine_generator,
    discriminator_terms,
    forward,
    generator_terms,
)
from .networks import DiscriminatorSpec, GeneratorSpec, PatchDiscriminator, ResnetGenerator

MAX_CONSECUTIVE_FAILURES = 5


def build_bundle(
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    seed: int,
    loss_family: str = "least_squares",
    lambda_cyc: float = 10.0,
    cycle_norm: str = "l2",
    lambda_identity: float = 0.0,
) -> ModelBundle:
    """Initialize all four networks from a dedicated seed without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        nets = (ResnetGenerator(gen_spec), ResnetGenerator(gen_spec), PatchDiscriminator(disc_spec), PatchDiscriminator(disc_spec))
    return ModelBundle(*nets, loss_family=loss_family, lambda_cyc=lambda_cyc, cycle_norm=cycle_norm, lambda_identity=lambda_identity)


@dataclass
class OptimizerState:
    g: torch.optim.Optimizer
    d_x: torch.optim.Optimizer
    d_y: torch.optim.Optimizer
    consecutive_failures: int = 0
    skipped_steps: int = 0

    def items(self):
        return {"g": self.g, "d_x": self.d_x, "d_y": self.d_y}.items()


def make_optimizers(bundle: ModelBundle, lr: float, betas=(0.5, 0.999)) -> OptimizerState:
    def adam(params):
        return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=0.0)

    return OptimizerState(adam(bundle.generators()), adam(bundle.d_x.parameters()), adam(bundle.d_y.parameters()))


def _set_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step(bundle: ModelBundle, x: Tensor, y: Tensor, measure: Measure, opt: OptimizerState) -> dict:
    """One alternating update: generators with discriminators frozen, then each discriminator.

    A non-finite loss skips the update entirely; the fifth consecutive skip
    raises ``TrainingDivergenceError``.
    """
    if x.shape[1:] != y.shape[1:]:
        raise ParameterDomainError(f"x and y batches differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    _set_grad(bundle.d_x, False)
    _set_grad(bundle.d_y, False)
    try:
        fp = forward(bundle, x, y, measure)
        terms = generator_terms(bundle, fp, x, y)
        g_loss = combine_generator(bundle, terms)
    finally:
        _set_grad(bundle.d_x, True)
        _set_grad(bundle.d_y, True)
    d_x_loss, d_y_loss = discriminator_terms(bundle, fp, x, y)

    logs = {k: v.item() for k, v in terms.items()}
    logs.update(generator_loss=g_loss.item(), d_x_loss=d_x_loss.item(), d_y_loss=d_y_loss.item())
    if not all(np.isfinite(v) for v in logs.values()):
        opt.consecutive_failures += 1
        opt.skipped_steps += 1
        if opt.consecutive_failures >= MAX_CONSECUTIVE_FAILURES:
            raise TrainingDivergenceError(
                f"{opt.consecutive_failures} consecutive non-finite losses; last: {logs}"
            )
        logs["skipped"] = True
        return logs
    opt.consecutive_failures = 0

    opt.g.zero_grad(set_to_none=True)
    g_loss.backward()
    opt.g.step()

    opt.d_x.zero_grad(set_to_none=True)
    opt.d_y.zero_grad(set_to_none=True)
    (d_x_loss + d_y_loss).backward()
    opt.d_x.step()
    opt.d_y.step()
    logs["skipped"] = False
    return logs


def _check_shape(g: nn.Module, shape) -> None:
    spec = getattr(g, "spec", None)
    if isinstance(spec, GeneratorSpec) and tuple(shape) != spec.image_size:
        raise ParameterDomainError(f"image shape {tuple(shape)} does not match generator size {spec.image_size}")


@torch.no_grad()
def translate_array(g: nn.Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Apply a generator to a stack (N, H, W) of images."""
    images = np.asarray(images, dtype=np.float32)
    _check_shape(g, images.shape[1:])
    was_training = g.training
    g.eval()
    p = next(g.parameters())
    out = np.empty_like(images)
    for s in range(0, len(images), batch_size):
        batch = torch.as_tensor(images[s : s + batch_size], dtype=p.dtype, device=p.device)[:, None]
        out[s : s + batch_size] = g(batch)[:, 0].cpu().numpy()
    g.train(was_training)
    return out


def translate_to_realistic(g_x: nn.Module, x: ObjectImage) -> ObjectImage:
    """Learned-SOM output: G_x applied to a normalized phantom."""
    out = translate_array(g_x, x.pixels[None])[0]
    return ObjectImage(out, "Y_clean", x.normalization)


def translate_to_mathematical(g_y: nn.Module, y: MeasurementImage | np.ndarray) -> ObjectImage:
    pixels = y.pixels if isinstance(y, MeasurementImage) else np.asarray(y)
    return ObjectImage(translate_array(g_y, pixels[None])[0], "X")
