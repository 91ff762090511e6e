import sys

import numpy as np
import pytest
import torch

from vcstar.models import ModelConfig, init_params


def fd_relative_error(loss_fn, tensor, n_entries=10, h=1e-6, seed=0, floor=1e-3):
    """Central finite differences vs autograd on a sample of ``tensor`` entries.

    Half of the sampled entries are those with the largest analytic gradient,
    the rest are random. Returns ||analytic - numeric|| / max(norms, floor):
    the absolute floor keeps structurally zero gradients (biases feeding an
    instance norm) from turning rounding noise into a relative error.
    """
    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, tensor, allow_unused=True)
    grad = torch.zeros_like(tensor) if grad is None else grad
    flat_grad = grad.reshape(-1)
    n = flat_grad.numel()
    k = min(n, n_entries)
    top = torch.argsort(flat_grad.abs(), descending=True)[: k // 2].tolist()
    rng = np.random.default_rng(seed)
    rest = [int(i) for i in rng.permutation(n) if int(i) not in top][: k - len(top)]
    idx = top + rest
    flat = tensor.data.view(-1)
    numeric = []
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
    a = flat_grad[idx].detach().numpy()
    num = np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(num), floor)
    return float(np.linalg.norm(a - num) / scale)


def reduced_config(**kw):
    base = dict(
        n_domains=3,
        q=8,
        channels=(2, 3),
        bottleneck_channels=4,
        n_blocks=1,
        classifier_channels=(2, 2, 2),
        in_kernel=(3, 3),
        use_classifier=True,
    )
    base.update(kw)
    return ModelConfig(**base)


def perturbed_bundle(cfg, seed=0):
    """Float64 bundle with CIN tables and biases moved off their init values."""
    m = init_params(cfg, seed, torch.float64)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for module in m.modules().values():
            for name, p in module.named_parameters():
                if name.endswith("bias") or name.split(".")[0] in ("head", "embed") or "gamma" in name or "beta" in name:
                    p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return m


@pytest.fixture
def reduced():
    return reduced_config


@pytest.fixture
def batch64():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, 8, 16, generator=g, dtype=torch.float64)
    c = torch.tensor([0, 2])
    cp = torch.tensor([1, 2])
    return x, c, cp


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
