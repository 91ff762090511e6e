"""Adversarial, classification, cycle and identity losses and the full objectives.

Adversarial terms are trained in least-squares form. The saturating log form
is kept for evaluation only (``form="log"``). Every loss returns the mean over
the batch; L1 terms average over all elements.

Freezing: discriminator losses see detached fakes, generator losses see the
discriminator and classifier through detached parameter copies, so each
full objective only produces gradients for its own network.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch.func import functional_call


class ObjectiveVariant(str, enum.Enum):
    CLS_ONLY = "CLS_ONLY"
    T_ADV = "T_ADV"
    T_ADV_PLUS_CLS = "T_ADV_PLUS_CLS"
    ST_ADV = "ST_ADV"

    @property
    def uses_classifier(self) -> bool:
        return self in (ObjectiveVariant.CLS_ONLY, ObjectiveVariant.T_ADV_PLUS_CLS)

    @property
    def discriminator_condition(self) -> str:
        return {"CLS_ONLY": "none", "T_ADV": "target", "T_ADV_PLUS_CLS": "target", "ST_ADV": "pair"}[self.value]

    @property
    def pair_conditioned(self) -> bool:
        return self is ObjectiveVariant.ST_ADV


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_cyc, self.lambda_id) < 0:
            raise ValueError("loss weights must be non-negative")


def frozen(module):
    """Call ``module`` with detached parameters: gradients reach inputs only."""
    params = {k: v.detach() for k, v in module.named_parameters()}
    buffers = dict(module.named_buffers())

    def call(*args):
        return functional_call(module, (params, buffers), args)

    return call


def lsgan_d_loss(real_scores, fake_scores):
    return (real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean()


def lsgan_g_loss(fake_scores):
    return (fake_scores - 1).pow(2).mean()


def log_d_loss(real_scores, fake_scores):
    """Negated log-likelihood adversarial value; scores are logits."""
    return -(F.logsigmoid(real_scores).mean() + F.logsigmoid(-fake_scores).mean())


def log_g_loss(fake_scores):
    """Saturating generator term E[log(1 - D(fake))]; D = sigmoid(score)."""
    return F.logsigmoid(-fake_scores).mean()


def _adv(real_scores, fake_scores_d, fake_scores_g, form):
    if form == "lsgan":
        return lsgan_d_loss(real_scores, fake_scores_d), lsgan_g_loss(fake_scores_g)
    if form == "log":
        return log_d_loss(real_scores, fake_scores_d), log_g_loss(fake_scores_g)
    raise ValueError(f"unknown adversarial form {form!r}")


def _require(D, condition):
    if D.condition != condition:
        raise ValueError(f"expected a {condition!r} discriminator, got {D.condition!r}")


def adv_loss_target(D, x_real, c_real, x_fake, c_fake, form: str = "lsgan"):
    """Target-conditional adversarial loss. ``x_fake`` = G(x, c_fake)."""
    _require(D, "target")
    real = D(x_real, None, c_real)
    fake_d = D(x_fake.detach(), None, c_fake)
    fake_g = frozen(D)(x_fake, None, c_fake)
    return _adv(real, fake_d, fake_g, form)


def adv_loss_unconditional(D, x_real, x_fake, form: str = "lsgan"):
    _require(D, "none")
    real = D(x_real)
    fake_d = D(x_fake.detach())
    fake_g = frozen(D)(x_fake)
    return _adv(real, fake_d, fake_g, form)


def st_adv_loss(D, x_real, c, c_prime, x_fake, form: str = "lsgan"):
    """Source-and-target conditional adversarial loss.

    Real instances of domain ``c`` are scored under the pair (c', c); the fakes
    ``x_fake = G(x, c, c')`` under (c, c').
    """
    _require(D, "pair")
    real = D(x_real, c_prime, c)
    fake_d = D(x_fake.detach(), c, c_prime)
    fake_g = frozen(D)(x_fake, c, c_prime)
    return _adv(real, fake_d, fake_g, form)


def st_adv_literal(D, x_real, c, c_prime, x_fake):
    """The source-and-target value exactly as printed: E log D(real) + E log D(fake).

    Evaluation helper only; training never uses it.
    """
    _require(D, "pair")
    return F.logsigmoid(D(x_real, c_prime, c)).mean() + F.logsigmoid(D(x_fake, c, c_prime)).mean()


def cls_loss_real(C, x, c):
    return F.nll_loss(C(x), torch.as_tensor(c, dtype=torch.long).reshape(-1))


def cls_loss_fake(C, x_fake, c_prime):
    """-log C(c'|G(x, c')) with the classifier frozen."""
    return F.nll_loss(frozen(C)(x_fake), torch.as_tensor(c_prime, dtype=torch.long).reshape(-1))


def cycle_loss(G, x, c, c_prime, x_fake=None):
    if x_fake is None:
        x_fake = G(x, c, c_prime)
    return (x - G(x_fake, c_prime, c)).abs().mean()


def identity_loss(G, x, c):
    return (G(x, c, c) - x).abs().mean()


def adversarial_losses(D, variant, x, c, c_prime, x_fake, form: str = "lsgan"):
    """(d_loss, g_loss) of the adversarial term selected by ``variant``."""
    variant = ObjectiveVariant(variant)
    if variant is ObjectiveVariant.ST_ADV:
        return st_adv_loss(D, x, c, c_prime, x_fake, form)
    if variant is ObjectiveVariant.CLS_ONLY:
        return adv_loss_unconditional(D, x, x_fake, form)
    return adv_loss_target(D, x, c, x_fake, c_prime, form)


def uniform_nll(n_domains: int) -> float:
    return math.log(n_domains)


LOSS_COLUMNS = ("L_D", "L_C", "L_G", "adv_d", "adv_g", "cls_r", "cls_f", "cyc", "id")


def total_losses(
    models,
    x,
    c,
    c_prime,
    variant: ObjectiveVariant,
    weights: LossWeights,
    iteration: int = 0,
    id_cutoff: int = 10_000,
    form: str = "lsgan",
) -> dict[str, torch.Tensor]:
    """Full D, C and G objectives for one batch.

    ``models`` is a :class:`~vcstar.models.ModelBundle`. Classification terms
    are present only for CLS_ONLY and T_ADV_PLUS_CLS; CLS_ONLY pairs them with
    an unconditional adversarial loss. The identity term is active while
    ``iteration < id_cutoff``.
    """
    variant = ObjectiveVariant(variant)
    G, D, C = models.generator, models.discriminator, models.classifier
    if variant.uses_classifier and C is None:
        raise ValueError(f"variant {variant.value} needs a classifier")
    zero = x.new_zeros(())

    x_fake = G(x, c, c_prime)
    adv_d, adv_g = adversarial_losses(D, variant, x, c, c_prime, x_fake, form)

    if variant.uses_classifier:
        cls_r = cls_loss_real(C, x, c)
        cls_f = cls_loss_fake(C, x_fake, c_prime)
    else:
        cls_r = cls_f = zero

    cyc = cycle_loss(G, x, c, c_prime, x_fake)
    idl = identity_loss(G, x, c) if iteration < id_cutoff else zero

    L_G = adv_g + weights.lambda_cls * cls_f + weights.lambda_cyc * cyc + weights.lambda_id * idl
    return {
        "L_D": adv_d,
        "L_C": weights.lambda_cls * cls_r,
        "L_G": L_G,
        "adv_d": adv_d,
        "adv_g": adv_g,
        "cls_r": cls_r,
        "cls_f": cls_f,
        "cyc": cyc,
        "id": idl,
    }
