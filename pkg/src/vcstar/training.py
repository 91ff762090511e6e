"""Training loop, checkpoints and the conditioning ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .features import FeatureSequence, SpeakerStats, compute_speaker_stats, crop_segment, normalize
from .metrics import EvalItem, evaluate_corpus
from .models import ModelBundle, ModelConfig, init_params
from .objectives import LOSS_COLUMNS, LossWeights, ObjectiveVariant, adversarial_losses, cls_loss_real, total_losses
from .pipeline import Converter

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericalAbort(RuntimeError):
    """A loss became non-finite; ``snapshot`` holds the offending iteration's values."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 8
    segment_len: int = 128
    iterations: int = 3000
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    lr_c: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "ST_ADV"
    conditioning_mode: str = "modulation_based"
    seed: int = 0
    id_cutoff: int = 10_000
    checkpoint_every: int = 0
    channels: tuple[int, int] = (8, 16)
    bottleneck_channels: int = 32
    n_blocks: int = 3
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.variant = ObjectiveVariant(self.variant).value
        self.channels = tuple(self.channels)
        for name in ("batch_size", "segment_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0 or self.id_cutoff < 0 or self.checkpoint_every < 0:
            raise ValueError("iterations, id_cutoff and checkpoint_every must be non-negative")
        if min(self.lr_g, self.lr_d, self.lr_c) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainingConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self, n_domains: int, q: int) -> ModelConfig:
        variant = ObjectiveVariant(self.variant)
        return ModelConfig(
            n_domains=n_domains,
            q=q,
            channels=self.channels,
            bottleneck_channels=self.bottleneck_channels,
            n_blocks=self.n_blocks,
            conditioning_mode=self.conditioning_mode,
            pair_conditioned=variant.pair_conditioned,
            discriminator_condition=variant.discriminator_condition,
            use_classifier=variant.uses_classifier,
        )


def paper_preset(**overrides) -> TrainingConfig:
    """Full-scale recipe: Adam(0.5), batch 8, 128-frame crops, 3e5 iterations."""
    cfg = TrainingConfig(
        batch_size=8,
        segment_len=128,
        iterations=300_000,
        lr_g=2e-4,
        lr_d=1e-4,
        lr_c=1e-4,
        adam_beta1=0.5,
        weights=LossWeights(lambda_cls=1.0, lambda_cyc=10.0, lambda_id=5.0),
        id_cutoff=10_000,
        channels=(128, 256),
        bottleneck_channels=256,
        n_blocks=9,
    )
    return replace(cfg, **overrides)


def desk_preset(**overrides) -> TrainingConfig:
    """Laptop-sized runs on the synthetic corpus."""
    return replace(TrainingConfig(), **overrides)


PRESETS = {"paper": paper_preset, "desk": desk_preset}


@dataclass
class TrainState:
    iteration: int
    models: ModelBundle
    optimizers: dict[str, torch.optim.Adam]
    rng: np.random.Generator
    stats: dict[int, SpeakerStats]
    config: TrainingConfig


def make_optimizers(models: ModelBundle, config: TrainingConfig) -> dict[str, torch.optim.Adam]:
    lrs = {"generator": config.lr_g, "discriminator": config.lr_d, "classifier": config.lr_c}
    betas = (config.adam_beta1, config.adam_beta2)
    return {
        name: torch.optim.Adam(m.parameters(), lr=lrs[name], betas=betas, eps=1e-8)
        for name, m in models.modules().items()
    }


def prepare_corpus(corpus: dict[int, list[FeatureSequence]], segment_len: int):
    """Per-speaker statistics and the speaker-normalized corpus."""
    if len(corpus) < 2:
        raise ValueError(f"need at least 2 domains, got {len(corpus)}")
    if sorted(corpus) != list(range(len(corpus))):
        raise ValueError("domain codes must be 0..N-1")
    for d, seqs in corpus.items():
        if not seqs:
            raise ValueError(f"domain {d} has no utterances")
        for x in seqs:
            if x.n_frames < segment_len:
                raise ValueError(f"domain {d}: utterance of {x.n_frames} frames shorter than segment {segment_len}")
    stats = {d: compute_speaker_stats(seqs) for d, seqs in corpus.items()}
    normed = {d: [normalize(x, stats[d]) for x in seqs] for d, seqs in corpus.items()}
    return normed, stats


def init_state(corpus, config: TrainingConfig) -> TrainState:
    _, stats = prepare_corpus(corpus, config.segment_len)
    q = next(iter(corpus.values()))[0].q
    mcfg = config.model_config(len(corpus), q)
    models = init_params(mcfg, config.seed, DTYPES[config.dtype])
    return TrainState(
        iteration=0,
        models=models,
        optimizers=make_optimizers(models, config),
        rng=np.random.default_rng(config.seed),
        stats=stats,
        config=config,
    )


def sample_batch(normed, config: TrainingConfig, rng: np.random.Generator):
    """Random (speaker, utterance, crop) instances plus uniformly drawn target codes."""
    n = len(normed)
    segs, src, tgt = [], [], []
    for _ in range(config.batch_size):
        d = int(rng.integers(n))
        u = int(rng.integers(len(normed[d])))
        segs.append(crop_segment(normed[d][u], config.segment_len, rng).mcep)
        src.append(d)
        tgt.append(int(rng.integers(n)))
    dtype = DTYPES[config.dtype]
    return (
        torch.as_tensor(np.stack(segs), dtype=dtype),
        torch.tensor(src, dtype=torch.long),
        torch.tensor(tgt, dtype=torch.long),
    )


def _check_finite(name, value, row):
    if not math.isfinite(value):
        raise NumericalAbort(f"non-finite {name} at iteration {row['iteration']}", dict(row, **{name: value}))


def train_step(state: TrainState, batch, config: TrainingConfig | None = None) -> dict:
    """One discriminator (and classifier) update followed by one generator update."""
    config = config or state.config
    variant = ObjectiveVariant(config.variant)
    x, c, cp = batch
    m = state.models
    G, D, C = m.generator, m.discriminator, m.classifier
    opt = state.optimizers
    row = {"iteration": state.iteration}

    with torch.no_grad():
        fake = G(x, c, cp)
    d_loss, _ = adversarial_losses(D, variant, x, c, cp, fake)
    _check_finite("L_D", d_loss.item(), row)
    opt["discriminator"].zero_grad()
    d_loss.backward()
    opt["discriminator"].step()
    row["L_D"] = row["adv_d"] = d_loss.item()

    if C is not None:
        cls_r = cls_loss_real(C, x, c)
        c_loss = config.weights.lambda_cls * cls_r
        _check_finite("L_C", c_loss.item(), row)
        opt["classifier"].zero_grad()
        c_loss.backward()
        opt["classifier"].step()
        row["L_C"], row["cls_r"] = c_loss.item(), cls_r.item()
    else:
        row["L_C"] = row["cls_r"] = 0.0

    losses = total_losses(m, x, c, cp, variant, config.weights, state.iteration, config.id_cutoff)
    _check_finite("L_G", losses["L_G"].item(), row)
    opt["generator"].zero_grad()
    losses["L_G"].backward()
    opt["generator"].step()
    for k in ("L_G", "adv_g", "cls_f", "cyc", "id"):
        row[k] = losses[k].item()

    state.iteration += 1
    return row


def train_loop(
    corpus: dict[int, list[FeatureSequence]],
    config: TrainingConfig,
    state: TrainState | None = None,
    out_dir=None,
    log_every: int = 0,
) -> tuple[TrainState, list[dict]]:
    """Train until ``config.iterations``; resumes from ``state`` when given.

    With ``out_dir`` and ``checkpoint_every`` set, writes ``ckpt_<iter>.vcz``
    periodically; on a numerical abort the last state is saved as ``abort.vcz``.
    """
    normed, stats = prepare_corpus(corpus, config.segment_len)
    if state is None:
        state = init_state(corpus, config)
    state.config = config
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    while state.iteration < config.iterations:
        batch = sample_batch(normed, config, state.rng)
        try:
            row = train_step(state, batch, config)
        except NumericalAbort:
            if out_dir is not None:
                checkpoint_save(state, out_dir / "abort.vcz")
            raise
        rows.append(row)
        if log_every and state.iteration % log_every == 0:
            log.info("iter %d  L_D %.4f  L_G %.4f  cyc %.4f  id %.4f", state.iteration, row["L_D"], row["L_G"], row["cyc"], row["id"])
        if out_dir is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            checkpoint_save(state, out_dir / f"ckpt_{state.iteration:07d}.vcz")
    return state, rows


LOG_FIELDS = ("iteration",) + LOSS_COLUMNS


def write_loss_log(rows: list[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


# ------------------------------------------------------------ checkpoints


def _zip_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _tensor_bytes(t: torch.Tensor) -> tuple[bytes, str]:
    arr = t.detach().cpu().numpy()
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr, dtype=dt).tobytes(), dt.str


def checkpoint_save(state: TrainState, path) -> None:
    """Single zip archive: ``manifest.json`` plus one raw little-endian blob per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, torch.Tensor] = {}
    for name, t in state.models.state_tensors().items():
        tensors[f"model/{name}"] = t
    optim_meta = {}
    for name, opt in state.optimizers.items():
        sd = opt.state_dict()
        entries = {}
        for idx, st in sd["state"].items():
            scalars = {}
            for k, v in st.items():
                if torch.is_tensor(v):
                    tensors[f"optim/{name}/{idx}/{k}"] = v
                else:
                    scalars[k] = v
            entries[str(idx)] = scalars
        optim_meta[name] = {"param_groups": sd["param_groups"], "state": entries}

    table = {}
    blobs = {}
    for key in sorted(tensors):
        data, dt = _tensor_bytes(tensors[key])
        blobs[key] = data
        table[key] = {"dtype": dt, "shape": list(tensors[key].shape)}
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "model_config": state.models.config.to_dict(),
        "training_config": state.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "stats": {str(d): s.to_dict() for d, s in sorted(state.stats.items())},
        "optimizers": optim_meta,
        "tensors": table,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for key in sorted(blobs):
            _zip_entry(zf, f"tensors/{key}.bin", blobs[key])
    path.write_bytes(buf.getvalue())


def checkpoint_load(path) -> TrainState:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        raise CheckpointError(f"{path}: not a checkpoint archive ({e})") from e
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest["format_version"]
        except (KeyError, ValueError, TypeError) as e:
            raise CheckpointError(f"{path}: bad manifest ({e})") from e
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        try:
            tensors = {}
            for key, meta in manifest["tensors"].items():
                arr = np.frombuffer(zf.read(f"tensors/{key}.bin"), dtype=np.dtype(meta["dtype"]))
                tensors[key] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(meta["shape"])
            config = TrainingConfig.from_dict(manifest["training_config"])
            mcfg = ModelConfig(**manifest["model_config"])
            stats = {int(d): SpeakerStats.from_dict(s) for d, s in manifest["stats"].items()}
            rng = np.random.default_rng()
            rng.bit_generator.state = manifest["rng_state"]
            iteration = int(manifest["iteration"])
            optim_meta = manifest["optimizers"]
        except (KeyError, ValueError, TypeError) as e:
            raise CheckpointError(f"{path}: bad manifest ({e})") from e

    models = init_params(mcfg, config.seed, DTYPES[config.dtype])
    for name, module in models.modules().items():
        prefix = f"model/{name}."
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(sd)
    optimizers = make_optimizers(models, config)
    for name, opt in optimizers.items():
        meta = optim_meta[name]
        state = {}
        for idx, scalars in meta["state"].items():
            entry = dict(scalars)
            prefix = f"optim/{name}/{idx}/"
            for k, v in tensors.items():
                if k.startswith(prefix):
                    entry[k[len(prefix):]] = v
            state[int(idx)] = entry
        groups = [dict(g, betas=tuple(g["betas"])) for g in meta["param_groups"]]
        opt.load_state_dict({"state": state, "param_groups": groups})
    return TrainState(iteration, models, optimizers, rng, stats, config)


# --------------------------------------------------------------- ablation

OBJECTIVE_AXIS = ("CLS_ONLY", "T_ADV", "T_ADV_PLUS_CLS", "ST_ADV")
CONDITIONING_AXIS = ("channel_wise", "modulation_based")
ABLATION_SEEDS = (0, 1, 2)


def ablation_variants(axis: str, base: TrainingConfig) -> list[tuple[str, TrainingConfig]]:
    if axis == "objective":
        return [(v, replace(base, variant=v)) for v in OBJECTIVE_AXIS]
    if axis == "conditioning":
        return [(m, replace(base, variant="ST_ADV", conditioning_mode=m)) for m in CONDITIONING_AXIS]
    raise ValueError(f"unknown ablation axis {axis!r}")


@dataclass
class AblationReport:
    axis: str
    rows: list[dict]
    conventions: dict = field(default_factory=dict)

    def write(self, out_dir, stem: str = "ablation") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cols = ["variant", "mcd_mean", "mcd_std", "msd_mean", "msd_std", "n_seeds"]
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        payload = {"axis": self.axis, "rows": self.rows, "conventions": self.conventions}
        (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=2))


def ablation_run(
    corpus: dict[int, list[FeatureSequence]],
    eval_items: list[EvalItem],
    base_config: TrainingConfig,
    axis: str,
    seeds=ABLATION_SEEDS,
) -> AblationReport:
    """Train one model per (variant, seed) and report mean and population std of MCD/MSD."""
    if not eval_items:
        raise ValueError("ablation needs evaluation items with parallel ground truth")
    n = len(corpus)
    for it in eval_items:
        if any(t not in it.references for t in range(n) if t != it.source):
            raise ValueError(f"evaluation item {it.source}/{it.utterance} lacks parallel ground truth")
    rows = []
    conventions = {}
    for label, cfg in ablation_variants(axis, base_config):
        mcds, msds = [], []
        for seed in seeds:
            state, _ = train_loop(corpus, replace(cfg, seed=seed))
            report = evaluate_corpus(Converter(state.models, state.stats), eval_items, n)
            conventions = report.conventions
            overall = report.overall()
            mcds.append(overall["mcd"])
            msds.append(overall["msd"])
            log.info("ablation %s seed %d: MCD %.3f MSD %.3f", label, seed, overall["mcd"], overall["msd"])
        rows.append(
            {
                "variant": label,
                "mcd_mean": float(np.mean(mcds)),
                "mcd_std": float(np.std(mcds)),
                "msd_mean": float(np.mean(msds)),
                "msd_std": float(np.std(msds)),
                "n_seeds": len(seeds),
                "seeds": list(seeds),
                "mcd_per_seed": mcds,
                "msd_per_seed": msds,
            }
        )
    return AblationReport(axis, rows, conventions)
