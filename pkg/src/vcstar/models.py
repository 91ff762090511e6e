"""Generator, projection discriminator and domain classifier.

The generator follows a 2-1-2D layout: two stride-2 2D convolutions, a 1D
bottleneck of gated blocks without residual skips, and a 2D upsampling stage
built from pixel shufflers. Conditioning is either modulation-based (CIN in
the bottleneck) or channel-wise (one-hot code maps concatenated to every
convolution input).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS_CIN = 1e-5
TOTAL_STRIDE = 4

CONDITIONING_MODES = ("modulation_based", "channel_wise")
DISCRIMINATOR_CONDITIONS = ("none", "target", "pair")


@dataclass
class ModelConfig:
    n_domains: int = 4
    q: int = 34
    channels: tuple[int, int] = (32, 64)
    bottleneck_channels: int = 64
    n_blocks: int = 3
    conditioning_mode: str = "modulation_based"
    pair_conditioned: bool = True
    discriminator_condition: str = "pair"
    use_classifier: bool = False
    classifier_channels: tuple[int, int, int] = (8, 16, 32)
    in_kernel: tuple[int, int] = (5, 15)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.classifier_channels = tuple(self.classifier_channels)
        self.in_kernel = tuple(self.in_kernel)
        if self.n_domains < 2:
            raise ValueError("n_domains must be at least 2")
        if self.q < 1 or self.n_blocks < 0 or self.bottleneck_channels < 1:
            raise ValueError("invalid generator size")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ValueError("channels must be two positive widths")
        if len(self.classifier_channels) != 3 or min(self.classifier_channels) < 1:
            raise ValueError("classifier_channels must be three positive widths")
        if any(k < 1 or k % 2 == 0 for k in self.in_kernel):
            raise ValueError("in_kernel entries must be odd and positive")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"unknown conditioning mode {self.conditioning_mode!r}")
        if self.discriminator_condition not in DISCRIMINATOR_CONDITIONS:
            raise ValueError(f"unknown discriminator condition {self.discriminator_condition!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("channels", "classifier_channels", "in_kernel"):
            d[k] = list(d[k])
        return d


def instance_stats(f: torch.Tensor, eps: float = EPS_CIN):
    """Mean and floored population std over all non-batch, non-channel axes."""
    dims = tuple(range(2, f.dim()))
    mu = f.mean(dim=dims, keepdim=True)
    var = (f - mu).pow(2).mean(dim=dims, keepdim=True)
    sigma = var.clamp_min(eps * eps).sqrt()
    return mu, sigma


def instance_norm(f: torch.Tensor, eps: float = EPS_CIN) -> torch.Tensor:
    mu, sigma = instance_stats(f, eps)
    return (f - mu) / sigma


class ConditionalInstanceNorm(nn.Module):
    """Instance normalization followed by a pair-selected scale and bias.

    ``gamma`` and ``beta`` have shape (n_sources, n_domains, channels). Without
    source conditioning ``n_sources`` is 1 and the source code is ignored.
    """

    def __init__(self, channels: int, n_domains: int, pair_conditioned: bool = True, eps: float = EPS_CIN):
        super().__init__()
        n_src = n_domains if pair_conditioned else 1
        self.pair_conditioned = pair_conditioned
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(n_src, n_domains, channels))
        self.beta = nn.Parameter(torch.zeros(n_src, n_domains, channels))

    def forward(self, f, src, tgt):
        if not self.pair_conditioned:
            src = torch.zeros_like(tgt)
        gamma = self.gamma[src, tgt]
        beta = self.beta[src, tgt]
        shape = gamma.shape + (1,) * (f.dim() - 2)
        return gamma.view(shape) * instance_norm(f, self.eps) + beta.view(shape)


def cin_forward(f, src, tgt, gamma, beta, eps: float = EPS_CIN):
    """Functional CIN with explicit (n_src, N, C) tables."""
    src = torch.as_tensor(src).reshape(-1)
    tgt = torch.as_tensor(tgt).reshape(-1)
    g = gamma[src, tgt]
    b = beta[src, tgt]
    shape = g.shape + (1,) * (f.dim() - 2)
    return g.view(shape) * instance_norm(f, eps) + b.view(shape)


def pixel_shuffle_2d(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    return F.pixel_shuffle(x, r)


def condition_index(src, tgt, n_domains: int, pair: bool):
    return src * n_domains + tgt if pair else tgt


def one_hot_maps(index: torch.Tensor, n_codes: int, like: torch.Tensor) -> torch.Tensor:
    """Expand a one-hot code to the spatial size of ``like``."""
    oh = F.one_hot(index, n_codes).to(like.dtype)
    shape = oh.shape + (1,) * (like.dim() - 2)
    return oh.view(shape).expand(*oh.shape, *like.shape[2:])


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_domains
        self.channel_wise = cfg.conditioning_mode == "channel_wise"
        self.n_codes = n * n if cfg.pair_conditioned else n
        extra = self.n_codes if self.channel_wise else 0
        c1, c2 = cfg.channels
        cb = cfg.bottleneck_channels
        self.q_pad = -(-cfg.q // TOTAL_STRIDE) * TOTAL_STRIDE
        h4 = self.q_pad // TOTAL_STRIDE
        kh, kw = cfg.in_kernel

        self.conv_in = nn.Conv2d(1 + extra, 2 * c1, (kh, kw), padding=(kh // 2, kw // 2))
        self.down1 = nn.Conv2d(c1 + extra, 2 * c2, 5, stride=2, padding=2)
        self.down2 = nn.Conv2d(c2 + extra, 2 * c2, 5, stride=2, padding=2)
        self.to_1d = nn.Conv1d(c2 * h4 + extra, cb, 1)
        self.blocks = nn.ModuleList(nn.Conv1d(cb + extra, 2 * cb, 5, padding=2) for _ in range(cfg.n_blocks))
        if self.channel_wise:
            self.cins = None
        else:
            self.cins = nn.ModuleList(
                ConditionalInstanceNorm(2 * cb, n, cfg.pair_conditioned) for _ in range(cfg.n_blocks)
            )
        self.to_2d = nn.Conv1d(cb + extra, c2 * h4, 1)
        self.up1 = nn.Conv2d(c2 + extra, 4 * 2 * c2, 5, padding=2)
        self.up2 = nn.Conv2d(c2 + extra, 4 * 2 * c1, 5, padding=2)
        self.conv_out = nn.Conv2d(c1 + extra, 1, (kh, kw), padding=(kh // 2, kw // 2))

    def _cat(self, h, code):
        if not self.channel_wise:
            return h
        return torch.cat([h, one_hot_maps(code, self.n_codes, h)], dim=1)

    def forward(self, x, src, tgt):
        """Convert a batch of normalized MCEPs (B, Q, T) from ``src`` to ``tgt`` codes."""
        if x.dim() != 3 or x.shape[1] != self.cfg.q:
            raise ValueError(f"expected input (B, {self.cfg.q}, T), got {tuple(x.shape)}")
        T = x.shape[2]
        if T % TOTAL_STRIDE:
            raise ValueError(f"T={T} is not a multiple of {TOTAL_STRIDE}; pad the input (see pad_frames)")
        src, tgt = _codes(src, tgt, x.shape[0], x.device, self.cfg.n_domains)
        code = condition_index(src, tgt, self.cfg.n_domains, self.cfg.pair_conditioned)
        q = self.cfg.q
        h = x.unsqueeze(1)
        if self.q_pad != q:
            h = F.pad(h, (0, 0, 0, self.q_pad - q), mode="replicate")

        h = F.glu(self.conv_in(self._cat(h, code)), dim=1)
        h = F.glu(instance_norm(self.down1(self._cat(h, code))), dim=1)
        h = F.glu(instance_norm(self.down2(self._cat(h, code))), dim=1)
        b, c, hh, ww = h.shape
        h = instance_norm(self.to_1d(self._cat(h.reshape(b, c * hh, ww), code)))
        for i, conv in enumerate(self.blocks):
            h = conv(self._cat(h, code))
            h = instance_norm(h) if self.cins is None else self.cins[i](h, src, tgt)
            h = F.glu(h, dim=1)
        h = instance_norm(self.to_2d(self._cat(h, code))).reshape(b, c, hh, ww)
        h = F.glu(instance_norm(pixel_shuffle_2d(self.up1(self._cat(h, code)))), dim=1)
        h = F.glu(instance_norm(pixel_shuffle_2d(self.up2(self._cat(h, code)))), dim=1)
        h = self.conv_out(self._cat(h, code))
        return h[:, 0, :q, :]


class Discriminator(nn.Module):
    """2D CNN with global sum pooling and a projection conditioning term."""

    def __init__(self, cfg: ModelConfig, condition: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.condition = condition or cfg.discriminator_condition
        if self.condition not in DISCRIMINATOR_CONDITIONS:
            raise ValueError(f"unknown discriminator condition {self.condition!r}")
        n = cfg.n_domains
        c1, c2 = cfg.channels
        self.conv_in = nn.Conv2d(1, 2 * c1, 3, padding=1)
        self.down1 = nn.Conv2d(c1, 2 * c2, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(c2, 2 * c2, 3, stride=2, padding=1)
        self.conv_last = nn.Conv2d(c2, 2 * c2, (1, 5), padding=(0, 2))
        self.head = nn.Linear(c2, 1)
        n_rows = {"none": 0, "target": n, "pair": n * n}[self.condition]
        self.embed = nn.Embedding(n_rows, c2) if n_rows else None

    def features(self, x):
        h = F.glu(self.conv_in(x.unsqueeze(1)), dim=1)
        h = F.glu(instance_norm(self.down1(h)), dim=1)
        h = F.glu(instance_norm(self.down2(h)), dim=1)
        h = F.glu(instance_norm(self.conv_last(h)), dim=1)
        return h.sum(dim=(2, 3))

    def forward(self, x, src=None, tgt=None):
        """Realness score per instance, shape (B,).

        ``tgt`` is required for target and pair conditioning, ``src`` for pair.
        """
        pooled = self.features(x)
        out = self.head(pooled).squeeze(1)
        if self.embed is None:
            return out
        n = self.cfg.n_domains
        if tgt is None or (self.condition == "pair" and src is None):
            raise ValueError(f"{self.condition} discriminator needs its conditioning codes")
        if self.condition == "pair":
            src, tgt = _codes(src, tgt, x.shape[0], x.device, self.cfg.n_domains)
            idx = src * n + tgt
        else:
            tgt = _codes(tgt, tgt, x.shape[0], x.device, n)[1]
            idx = tgt
        return out + (self.embed(idx) * pooled).sum(dim=1)


class Classifier(nn.Module):
    """Domain classifier: three stride-2 convolutions, average pooling, linear head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.classifier_channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(1, 2 * c1, 3, stride=2, padding=1),
                nn.Conv2d(c1, 2 * c2, 3, stride=2, padding=1),
                nn.Conv2d(c2, 2 * c3, 3, stride=2, padding=1),
            ]
        )
        self.head = nn.Linear(c3, cfg.n_domains)

    def forward(self, x):
        """Log-probabilities over domains, shape (B, N)."""
        h = x.unsqueeze(1)
        for conv in self.convs:
            h = F.glu(conv(h), dim=1)
        return F.log_softmax(self.head(h.mean(dim=(2, 3))), dim=1)


def _codes(src, tgt, batch: int, device, n_domains: int):
    src = torch.as_tensor(src, dtype=torch.long, device=device).reshape(-1)
    tgt = torch.as_tensor(tgt, dtype=torch.long, device=device).reshape(-1)
    for codes in (src, tgt):
        if codes.numel() and (codes.min() < 0 or codes.max() >= n_domains):
            raise ValueError(f"domain code outside [0, {n_domains})")
    if src.numel() == 1:
        src = src.expand(batch)
    if tgt.numel() == 1:
        tgt = tgt.expand(batch)
    if src.shape[0] != batch or tgt.shape[0] != batch:
        raise ValueError("one domain code per batch instance expected")
    return src, tgt


@dataclass
class ModelBundle:
    """Generator, discriminator and optional classifier built from one config."""

    config: ModelConfig
    generator: Generator
    discriminator: Discriminator
    classifier: Classifier | None = None

    def modules(self) -> dict[str, nn.Module]:
        mods = {"generator": self.generator, "discriminator": self.discriminator}
        if self.classifier is not None:
            mods["classifier"] = self.classifier
        return mods

    def to(self, dtype):
        for m in self.modules().values():
            m.to(dtype)
        return self

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, m in self.modules().items():
            for k, v in m.state_dict().items():
                out[f"{name}.{k}"] = v
        return out


def _init_module(m: nn.Module, gen: torch.Generator) -> None:
    for mod in m.modules():
        if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            fan_in = mod.weight[0].numel()
            with torch.no_grad():
                mod.weight.normal_(0.0, fan_in**-0.5, generator=gen)
                mod.bias.zero_()
        elif isinstance(mod, ConditionalInstanceNorm):
            with torch.no_grad():
                mod.gamma.fill_(1.0)
                mod.beta.zero_()
    if isinstance(m, Discriminator):
        # sum pooling multiplies the score scale by the number of positions; start the
        # output head and projection at zero so early scores stay O(1)
        with torch.no_grad():
            m.head.weight.zero_()
            if m.embed is not None:
                m.embed.weight.zero_()


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> ModelBundle:
    """Build all networks, reproducible from ``seed``.

    Convolutions and linear layers get variance-scaled normal weights and zero
    biases; CIN tables start at gamma=1, beta=0; the discriminator's output head
    and projection embedding start at zero.
    """
    gen = torch.Generator().manual_seed(int(seed))
    g = Generator(cfg)
    d = Discriminator(cfg)
    c = Classifier(cfg) if cfg.use_classifier else None
    for m in (g, d, c):
        if m is not None:
            _init_module(m, gen)
    return ModelBundle(cfg, g, d, c).to(dtype)


def pad_frames(x: torch.Tensor, multiple: int = TOTAL_STRIDE):
    """Reflect-pad the time axis of (B, Q, T) up to a multiple; returns (padded, T)."""
    T = x.shape[-1]
    extra = (-T) % multiple
    if extra == 0:
        return x, T
    mode = "reflect" if T > extra else "replicate"
    return F.pad(x, (0, extra), mode=mode), T
