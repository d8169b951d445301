"""CycleGAN and AmbientCycleGAN objectives.

The forward graph follows the ambient variant: the realistic-domain
discriminator only ever sees ``H(G_x(x))`` and the X-cycle reconstructs from
that simulated measurement. Passing ``measure=None`` makes ``H`` the identity,
which is plain CycleGAN.

Discriminators return raw logits. For the cross-entropy family ``D = sigmoid(logit)``;
for least squares the logit itself is the score.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ParameterDomainError

LOSS_FAMILIES = ("cross_entropy", "least_squares")
CYCLE_NORMS = ("l2", "l1")

Measure = Optional[Callable[[Tensor], Tensor]]


class ModelBundle(nn.Module):
    """Two generators, two discriminators and the loss configuration."""

    def __init__(
        self,
        g_x: nn.Module,
        g_y: nn.Module,
        d_x: nn.Module,
        d_y: nn.Module,
        loss_family: str = "least_squares",
        lambda_cyc: float = 10.0,
        cycle_norm: str = "l2",
        lambda_identity: float = 0.0,
    ):
        super().__init__()
        if loss_family not in LOSS_FAMILIES:
            raise ParameterDomainError(f"unknown loss family {loss_family!r}")
        if cycle_norm not in CYCLE_NORMS:
            raise ParameterDomainError(f"unknown cycle norm {cycle_norm!r}")
        if not lambda_cyc >= 0 or not lambda_identity >= 0:
            raise ParameterDomainError("loss weights must be nonnegative")
        self.g_x, self.g_y, self.d_x, self.d_y = g_x, g_y, d_x, d_y
        self.loss_family = loss_family
        self.lambda_cyc = float(lambda_cyc)
        self.cycle_norm = cycle_norm
        self.lambda_identity = float(lambda_identity)

    def generators(self):
        return list(self.g_x.parameters()) + list(self.g_y.parameters())

    def discriminator_scores(self, logits: Tensor) -> Tensor:
        return torch.sigmoid(logits) if self.loss_family == "cross_entropy" else logits


def _identity(t: Tensor) -> Tensor:
    return t


@dataclass
class ForwardPass:
    fake_y_clean: Tensor  # G_x(x)
    fake_y: Tensor  # H(G_x(x))
    rec_x: Tensor  # G_y(H(G_x(x)))
    fake_x: Tensor  # G_y(y)
    rec_y: Tensor  # H(G_x(G_y(y)))


def forward(bundle: ModelBundle, x: Tensor, y: Tensor, measure: Measure = None) -> ForwardPass:
    h = measure or _identity
    fake_y_clean = bundle.g_x(x)
    fake_y = h(fake_y_clean)
    rec_x = bundle.g_y(fake_y)
    fake_x = bundle.g_y(y)
    rec_y = h(bundle.g_x(fake_x))
    return ForwardPass(fake_y_clean, fake_y, rec_x, fake_x, rec_y)


def gan_value(real_logits: Tensor, fake_logits: Tensor, family: str) -> Tensor:
    """Adversarial objective evaluated on discriminator outputs.

    cross_entropy: ``mean log D(real) + mean log(1 - D(fake))`` (maximized by D).
    least_squares: ``0.5 mean (D(real) - 1)^2 + 0.5 mean D(fake)^2`` (minimized by D).
    """
    if family == "cross_entropy":
        return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()
    if family == "least_squares":
        return 0.5 * ((real_logits - 1.0) ** 2).mean() + 0.5 * (fake_logits**2).mean()
    raise ParameterDomainError(f"unknown loss family {family!r}")


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor, family: str) -> Tensor:
    value = gan_value(real_logits, fake_logits, family)
    return -value if family == "cross_entropy" else value


def generator_adv_loss(fake_logits: Tensor, family: str) -> Tensor:
    # non-saturating form for cross entropy, as in the reference CycleGAN code
    if family == "cross_entropy":
        return -F.logsigmoid(fake_logits).mean()
    return ((fake_logits - 1.0) ** 2).mean()


def _check_finite(name: str, t: Tensor) -> Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activations in {name}")
    return t


def adv_loss_xy(bundle: ModelBundle, x: Tensor, y: Tensor, measure: Measure = None) -> Tensor:
    """X->Y adversarial term; D_y compares real measurements with H(G_x(x))."""
    fake = (measure or _identity)(bundle.g_x(x))
    real_logits = _check_finite("D_y(y)", bundle.d_y(y))
    fake_logits = _check_finite("D_y(H(G_x(x)))", bundle.d_y(fake))
    return gan_value(real_logits, fake_logits, bundle.loss_family)


def adv_loss_yx(bundle: ModelBundle, y: Tensor, x: Tensor) -> Tensor:
    """Y->X adversarial term; no measurement operator on this branch."""
    real_logits = _check_finite("D_x(x)", bundle.d_x(x))
    fake_logits = _check_finite("D_x(G_y(y))", bundle.d_x(bundle.g_y(y)))
    return gan_value(real_logits, fake_logits, bundle.loss_family)


def residual_norm(residual: Tensor, norm: str) -> Tensor:
    """Per-sample norm over all non-batch axes, averaged over the batch."""
    flat = residual.flatten(1)
    if norm == "l2":
        return torch.linalg.vector_norm(flat, ord=2, dim=1).mean()
    if norm == "l1":
        return flat.abs().sum(dim=1).mean()
    raise ParameterDomainError(f"unknown cycle norm {norm!r}")


def cycle_terms(fp: ForwardPass, x: Tensor, y: Tensor, norm: str) -> tuple[Tensor, Tensor]:
    return residual_norm(fp.rec_x - x, norm), residual_norm(fp.rec_y - y, norm)


def cycle_loss(bundle: ModelBundle, x: Tensor, y: Tensor, measure: Measure = None, norm: str | None = None) -> Tensor:
    fp = forward(bundle, x, y, measure)
    a, b = cycle_terms(fp, x, y, norm or bundle.cycle_norm)
    return a + b


@dataclass
class LossTerms:
    generator_loss: Tensor
    d_x_loss: Tensor
    d_y_loss: Tensor
    terms: dict

    def scalars(self) -> dict:
        out = {k: v.item() for k, v in self.terms.items()}
        out.update(generator_loss=self.generator_loss.item(), d_x_loss=self.d_x_loss.item(), d_y_loss=self.d_y_loss.item())
        return out

    def all_finite(self) -> bool:
        return all(torch.isfinite(t).all() for t in (self.generator_loss, self.d_x_loss, self.d_y_loss))


def generator_terms(bundle: ModelBundle, fp: ForwardPass, x: Tensor, y: Tensor) -> dict:
    fam = bundle.loss_family
    cyc_x, cyc_y = cycle_terms(fp, x, y, bundle.cycle_norm)
    terms = {
        "g_adv_xy": generator_adv_loss(bundle.d_y(fp.fake_y), fam),
        "g_adv_yx": generator_adv_loss(bundle.d_x(fp.fake_x), fam),
        "cycle_x": cyc_x,
        "cycle_y": cyc_y,
    }
    if bundle.lambda_identity > 0:
        # identity terms: G_x keeps realistic images, G_y keeps phantoms (mean absolute error)
        terms["identity"] = (bundle.g_x(y) - y).abs().mean() + (bundle.g_y(x) - x).abs().mean()
    return terms


def discriminator_terms(bundle: ModelBundle, fp: ForwardPass, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    fam = bundle.loss_family
    d_y = discriminator_loss(bundle.d_y(y), bundle.d_y(fp.fake_y.detach()), fam)
    d_x = discriminator_loss(bundle.d_x(x), bundle.d_x(fp.fake_x.detach()), fam)
    return d_x, d_y


def combine_generator(bundle: ModelBundle, terms: dict) -> Tensor:
    total = terms["g_adv_xy"] + terms["g_adv_yx"] + bundle.lambda_cyc * (terms["cycle_x"] + terms["cycle_y"])
    if "identity" in terms:
        total = total + bundle.lambda_cyc * bundle.lambda_identity * terms["identity"]
    return total


def total_loss(bundle: ModelBundle, x: Tensor, y: Tensor, measure: Measure = None) -> LossTerms:
    """Generator objective and the two discriminator objectives for one batch pair."""
    fp = forward(bundle, x, y, measure)
    terms = generator_terms(bundle, fp, x, y)
    d_x, d_y = discriminator_terms(bundle, fp, x, y)
    return LossTerms(combine_generator(bundle, terms), d_x, d_y, terms)
