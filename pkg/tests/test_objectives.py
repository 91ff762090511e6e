import math

import pytest
import torch
import torch.nn as nn
from conftest import fd_relative_error, perturbed_bundle, reduced_config

from vcstar import objectives as O
from vcstar.models import ModelBundle
from vcstar.objectives import LossWeights, ObjectiveVariant

FD_TOL = 1e-4


class ConstD(nn.Module):
    """Discriminator stub returning a fixed score; records the codes it was called with."""

    def __init__(self, value, condition="pair"):
        super().__init__()
        self.condition = condition
        self.value = nn.Parameter(torch.tensor(float(value), dtype=torch.float64))
        self.calls = []

    def forward(self, x, src=None, tgt=None):
        self.calls.append((src, tgt))
        return self.value + 0.0 * x.sum(dim=(1, 2))


class FirstEntryD(ConstD):
    def forward(self, x, src=None, tgt=None):
        return x[:, 0, 0] + 0.0 * self.value


class IdentityG(nn.Module):
    def forward(self, x, src, tgt):
        return x


class ZeroG(nn.Module):
    def forward(self, x, src, tgt):
        return torch.zeros_like(x)


class FixedC(nn.Module):
    def __init__(self, logp):
        super().__init__()
        self.logp = nn.Parameter(torch.as_tensor(logp, dtype=torch.float64))

    def forward(self, x):
        return self.logp.expand(x.shape[0], -1) + 0.0 * x.sum(dim=(1, 2), keepdim=False)[:, None]


def _x(b=4, q=3, t=8, seed=0):
    return torch.randn(b, q, t, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


C4 = torch.tensor([0, 1, 2, 3])
CP4 = torch.tensor([1, 1, 0, 3])


# --------------------------------------------------------- adversarial


@pytest.mark.parametrize("cond", ["none", "target", "pair"])
def test_lsgan_constant_half(cond):
    D = ConstD(0.5, cond)
    x = _x()
    if cond == "pair":
        d, g = O.st_adv_loss(D, x, C4, CP4, x)
    elif cond == "target":
        d, g = O.adv_loss_target(D, x, C4, x, CP4)
    else:
        d, g = O.adv_loss_unconditional(D, x, x)
    assert abs(d.item() - 0.5) < 1e-9
    assert abs(g.item() - 0.25) < 1e-9


def test_lsgan_optimum_is_zero():
    D = FirstEntryD(0.0, "target")
    real = _x()
    real[:, 0, 0] = 1.0
    fake = _x(seed=1)
    fake[:, 0, 0] = 0.0
    d, _ = O.adv_loss_target(D, real, C4, fake, CP4)
    assert d.item() == 0.0


def test_st_adv_generator_optimum():
    # c' == c, identity generator, D scores 1 everywhere: generator term at its optimum
    D = ConstD(1.0, "pair")
    x = _x()
    fake = IdentityG()(x, C4, C4)
    _, g = O.st_adv_loss(D, x, C4, C4, fake)
    assert g.item() == 0.0


def test_log_form_constant_logit():
    D = ConstD(0.0, "target")
    x = _x()
    d, g = O.adv_loss_target(D, x, C4, x, CP4, form="log")
    assert d.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert g.item() == pytest.approx(math.log(0.5), abs=1e-12)


def test_st_adv_literal_value():
    D = ConstD(0.0, "pair")
    x = _x()
    assert O.st_adv_literal(D, x, C4, CP4, x).item() == pytest.approx(2 * math.log(0.5), abs=1e-12)


def test_st_adv_conditions_real_on_swapped_pair():
    D = ConstD(0.5, "pair")
    x = _x()
    O.st_adv_loss(D, x, C4, CP4, x)
    (rs, rt), (fs, ft) = D.calls[0], D.calls[1]
    assert torch.equal(rs, CP4) and torch.equal(rt, C4)
    assert torch.equal(fs, C4) and torch.equal(ft, CP4)


def test_variant_mismatch():
    x = _x()
    with pytest.raises(ValueError):
        O.st_adv_loss(ConstD(0.5, "target"), x, C4, CP4, x)
    with pytest.raises(ValueError):
        O.adv_loss_target(ConstD(0.5, "pair"), x, C4, x, CP4)
    with pytest.raises(ValueError):
        O.adv_loss_unconditional(ConstD(0.5, "pair"), x, x)
    with pytest.raises(ValueError):
        O.total_losses(_bundle(), x, C4, CP4, "NOPE", LossWeights())


def test_st_adv_permutation_invariant():
    m = perturbed_bundle(reduced_config())
    x = _x(4, 8, 16)
    c, cp = torch.tensor([0, 1, 2, 0]), torch.tensor([2, 2, 1, 0])
    fake = m.generator(x, c, cp)
    d, g = O.st_adv_loss(m.discriminator, x, c, cp, fake)
    perm = torch.tensor([2, 0, 3, 1])
    d2, g2 = O.st_adv_loss(m.discriminator, x[perm], c[perm], cp[perm], fake[perm])
    assert d.item() == pytest.approx(d2.item(), rel=1e-12)
    assert g.item() == pytest.approx(g2.item(), rel=1e-12)


# ------------------------------------------------------ classification


def test_cls_real_perfect_and_uniform():
    x = _x()
    perfect = torch.full((4, 4), -1e6, dtype=torch.float64)
    perfect.fill_diagonal_(0.0)

    class PerfectC(nn.Module):
        def forward(self, x):
            return perfect

    assert O.cls_loss_real(PerfectC(), x, C4).item() == 0.0
    uniform = FixedC(torch.full((4,), -math.log(4), dtype=torch.float64))
    assert abs(O.cls_loss_real(uniform, x, C4).item() - math.log(4)) < 1e-9
    assert abs(O.uniform_nll(4) - 1.3862943611198906) < 1e-12


def test_cls_fake_values_and_freezing():
    x = _x().requires_grad_(True)
    uniform = FixedC(torch.full((4,), -math.log(4), dtype=torch.float64))
    loss = O.cls_loss_fake(uniform, x, CP4)
    assert abs(loss.item() - math.log(4)) < 1e-9
    logp = torch.full((4,), -1e6, dtype=torch.float64)
    logp[1] = 0.0
    sure = FixedC(logp)
    assert O.cls_loss_fake(sure, x, torch.ones(4, dtype=torch.long)).item() == 0.0

    m = perturbed_bundle(reduced_config())
    xr = _x(2, 8, 16).requires_grad_(True)
    loss = O.cls_loss_fake(m.classifier, xr, torch.tensor([1, 2]))
    loss.backward()
    assert all(p.grad is None for p in m.classifier.parameters())
    assert xr.grad is not None and xr.grad.abs().sum() > 0


def test_cls_nonnegative():
    m = perturbed_bundle(reduced_config())
    for seed in range(5):
        x = _x(2, 8, 16, seed)
        assert O.cls_loss_real(m.classifier, x, torch.tensor([0, 2])).item() >= 0


# ---------------------------------------------------- cycle / identity


def test_cycle_identity_generator_zero():
    assert O.cycle_loss(IdentityG(), _x(), C4, CP4).item() == 0.0
    assert O.identity_loss(IdentityG(), _x(), C4).item() == 0.0


def test_cycle_hand_example():
    x = torch.tensor([[[1.0, 2.0]]], dtype=torch.float64)
    assert O.cycle_loss(ZeroG(), x, 0, 1).item() == 1.5


def test_cycle_routes_codes():
    seen = []

    class RecG(nn.Module):
        def forward(self, x, s, t):
            seen.append((s, t))
            return x

    O.cycle_loss(RecG(), _x(), C4, CP4)
    assert torch.equal(seen[0][0], C4) and torch.equal(seen[0][1], CP4)
    assert torch.equal(seen[1][0], CP4) and torch.equal(seen[1][1], C4)


def test_identity_hand_example_and_permutation():
    x = torch.ones(2, 3, 4, dtype=torch.float64)
    assert O.identity_loss(ZeroG(), x, torch.tensor([0, 1])).item() == 1.0
    m = perturbed_bundle(reduced_config())
    xs = _x(3, 8, 16)
    c = torch.tensor([0, 1, 2])
    perm = torch.tensor([2, 0, 1])
    a = O.identity_loss(m.generator, xs, c).item()
    b = O.identity_loss(m.generator, xs[perm], c[perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


# ------------------------------------------------------------- totals


def _bundle(variant="ST_ADV", **kw):
    v = ObjectiveVariant(variant)
    cfg = reduced_config(
        pair_conditioned=v.pair_conditioned,
        discriminator_condition=v.discriminator_condition,
        use_classifier=v.uses_classifier,
        **kw,
    )
    return perturbed_bundle(cfg)


def _batch():
    x = _x(2, 8, 16, seed=3)
    return x, torch.tensor([0, 2]), torch.tensor([1, 2])


def test_total_zero_weights_pure_adversarial():
    m = _bundle("T_ADV")
    x, c, cp = _batch()
    out = O.total_losses(m, x, c, cp, "T_ADV", LossWeights(0, 0, 0))
    assert out["L_G"].item() == out["adv_g"].item()
    assert out["L_C"].item() == 0.0


@pytest.mark.parametrize("variant", list(ObjectiveVariant))
def test_total_decomposition(variant):
    m = _bundle(variant.value)
    x, c, cp = _batch()
    w = LossWeights(1.0, 10.0, 5.0)
    out = O.total_losses(m, x, c, cp, variant, w)
    recomposed = out["adv_g"] + w.lambda_cls * out["cls_f"] + w.lambda_cyc * out["cyc"] + w.lambda_id * out["id"]
    assert out["L_G"].item() == recomposed.item()
    assert out["L_C"].item() == w.lambda_cls * out["cls_r"].item()
    assert out["L_D"].item() == out["adv_d"].item()
    if not variant.uses_classifier:
        assert out["cls_f"].item() == 0.0 and out["cls_r"].item() == 0.0
    for k in O.LOSS_COLUMNS:
        assert out[k].item() >= 0


def test_total_identity_schedule():
    m = _bundle()
    x, c, cp = _batch()
    before = O.total_losses(m, x, c, cp, "ST_ADV", LossWeights(), iteration=9, id_cutoff=10)
    after = O.total_losses(m, x, c, cp, "ST_ADV", LossWeights(), iteration=10, id_cutoff=10)
    assert before["id"].item() > 0
    assert after["id"].item() == 0.0


def test_total_missing_classifier():
    m = _bundle("T_ADV")
    x, c, cp = _batch()
    with pytest.raises(ValueError, match="classifier"):
        O.total_losses(m, x, c, cp, "T_ADV_PLUS_CLS", LossWeights())


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_cls, w.lambda_cyc, w.lambda_id) == (1.0, 10.0, 5.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 1.0, 1.0)


@pytest.mark.parametrize("variant", list(ObjectiveVariant))
def test_freezing_contracts(variant):
    m = _bundle(variant.value)
    x, c, cp = _batch()
    out = O.total_losses(m, x, c, cp, variant, LossWeights())
    mods = m.modules()
    for loss_name, owner in [("L_D", "discriminator"), ("L_C", "classifier"), ("L_G", "generator")]:
        if owner not in mods or (loss_name == "L_C" and not variant.uses_classifier):
            continue
        for mod in mods.values():
            mod.zero_grad(set_to_none=True)
        out[loss_name].backward(retain_graph=True)
        for name, mod in mods.items():
            touched = any(p.grad is not None and p.grad.abs().sum() > 0 for p in mod.parameters())
            assert touched == (name == owner), (loss_name, name)


# -------------------------------------------------- finite differences

GRAD_CASES = [
    ("ST_ADV", "adv_d", "discriminator"),
    ("ST_ADV", "adv_g", "generator"),
    ("T_ADV", "adv_d", "discriminator"),
    ("T_ADV", "adv_g", "generator"),
    ("CLS_ONLY", "adv_d", "discriminator"),
    ("CLS_ONLY", "adv_g", "generator"),
    ("T_ADV_PLUS_CLS", "cls_r", "classifier"),
    ("T_ADV_PLUS_CLS", "cls_f", "generator"),
    ("ST_ADV", "cyc", "generator"),
    ("ST_ADV", "id", "generator"),
    ("ST_ADV", "L_G", "generator"),
    ("T_ADV_PLUS_CLS", "L_G", "generator"),
]


@pytest.mark.parametrize("variant,term,owner", GRAD_CASES)
def test_loss_gradients(variant, term, owner):
    m = _bundle(variant)
    x, c, cp = _batch()

    def loss():
        return O.total_losses(m, x, c, cp, variant, LossWeights())[term]

    module = m.modules()[owner]
    nonzero = False
    for name, p in module.named_parameters():
        err = fd_relative_error(loss, p, n_entries=6)
        assert err < FD_TOL, (name, err)
        (g,) = torch.autograd.grad(loss(), p, allow_unused=True)
        nonzero |= g is not None and g.abs().max().item() > 1e-6
    assert nonzero


def test_log_form_gradients():
    m = _bundle("T_ADV")
    x, c, cp = _batch()
    fake = m.generator(x, c, cp).detach()
    D = m.discriminator
    for name, p in D.named_parameters():
        err = fd_relative_error(lambda: O.adv_loss_target(D, x, c, fake, cp, form="log")[0], p, n_entries=6)
        assert err < FD_TOL, (name, err)


def test_bundle_type():
    assert isinstance(_bundle(), ModelBundle)
