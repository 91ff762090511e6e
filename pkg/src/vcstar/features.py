"""Acoustic feature containers, speaker statistics and feature file I/O.

Also hosts the synthetic multi-speaker corpus used for desk-scale runs: every
"speaker" renders shared latent processes through its own per-dimension affine
map and temporal smoothing filter, so parallel ground truth is available for
the metrics even though training data is non-parallel.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

EPS_STD = 1e-8
MAGIC = b"VCF1"
_HEADER = struct.Struct("<4sIId")
_U32 = struct.Struct("<I")


class FeatureFileError(ValueError):
    """Base class for malformed feature files. ``code`` identifies the failure."""

    code = "feature_file_error"


class BadMagicError(FeatureFileError):
    code = "bad_magic"


class PayloadSizeError(FeatureFileError):
    code = "payload_size_mismatch"


class NonFinitePayloadError(FeatureFileError):
    code = "non_finite_payload"


@dataclass
class FeatureSequence:
    """One utterance: MCEPs (Q x T), log F0 with voicing mask, opaque AP reference.

    Unvoiced frames hold log F0 = 0 and ``voiced[t] = False``.
    """

    mcep: np.ndarray
    log_f0: np.ndarray
    voiced: np.ndarray
    ap_ref: bytes = b""
    frame_period_ms: float = 5.0

    def __post_init__(self):
        self.mcep = np.asarray(self.mcep, dtype=np.float64)
        if self.mcep.ndim != 2 or min(self.mcep.shape) < 1:
            raise ValueError(f"mcep must be a non-empty Q x T matrix, got shape {self.mcep.shape}")
        T = self.mcep.shape[1]
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64).reshape(-1)
        self.voiced = np.asarray(self.voiced, dtype=bool).reshape(-1)
        if self.log_f0.shape != (T,) or self.voiced.shape != (T,):
            raise ValueError("log_f0 and voiced must have one entry per frame")
        if not np.all(np.isfinite(self.mcep)):
            raise ValueError("mcep contains non-finite values")
        if not np.all(np.isfinite(self.log_f0[self.voiced])):
            raise ValueError("voiced log_f0 contains non-finite values")
        self.log_f0 = np.where(self.voiced, self.log_f0, 0.0)
        self.ap_ref = bytes(self.ap_ref)

    @property
    def q(self) -> int:
        return self.mcep.shape[0]

    @property
    def n_frames(self) -> int:
        return self.mcep.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            np.array_equal(self.mcep, other.mcep)
            and np.array_equal(self.log_f0, other.log_f0)
            and np.array_equal(self.voiced, other.voiced)
            and self.ap_ref == other.ap_ref
            and self.frame_period_ms == other.frame_period_ms
        )


class DomainPair(NamedTuple):
    """(source, target) domain codes, zero-based."""

    source: int
    target: int


def check_code(code: int, n_domains: int) -> int:
    if n_domains < 2:
        raise ValueError(f"need at least 2 domains, got {n_domains}")
    if not 0 <= int(code) < n_domains:
        raise ValueError(f"domain code {code} outside [0, {n_domains})")
    return int(code)


@dataclass
class SpeakerStats:
    mcep_mean: np.ndarray
    mcep_std: np.ndarray
    logf0_mean: float
    logf0_std: float

    def __post_init__(self):
        self.mcep_mean = np.asarray(self.mcep_mean, dtype=np.float64)
        self.mcep_std = np.maximum(np.asarray(self.mcep_std, dtype=np.float64), EPS_STD)
        self.logf0_mean = float(self.logf0_mean)
        self.logf0_std = max(float(self.logf0_std), EPS_STD)
        if self.mcep_mean.shape != self.mcep_std.shape or self.mcep_mean.ndim != 1:
            raise ValueError("mcep_mean and mcep_std must be vectors of equal length")

    @property
    def q(self) -> int:
        return self.mcep_mean.shape[0]

    def to_dict(self) -> dict:
        return {
            "mcep_mean": self.mcep_mean.tolist(),
            "mcep_std": self.mcep_std.tolist(),
            "logf0_mean": self.logf0_mean,
            "logf0_std": self.logf0_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerStats":
        return cls(d["mcep_mean"], d["mcep_std"], d["logf0_mean"], d["logf0_std"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SpeakerStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_speaker_stats(corpus: list[FeatureSequence]) -> SpeakerStats:
    """Population mean/std per MCEP dimension and over voiced log F0."""
    if not corpus:
        raise ValueError("cannot compute statistics of an empty corpus")
    q = corpus[0].q
    if any(x.q != q for x in corpus):
        raise ValueError("all sequences must share the same MCEP dimension")
    mcep = np.concatenate([x.mcep for x in corpus], axis=1)
    f0 = np.concatenate([x.log_f0[x.voiced] for x in corpus])
    if f0.size < 2:
        raise ValueError(f"need at least 2 voiced frames, got {f0.size}")
    return SpeakerStats(
        mcep_mean=mcep.mean(axis=1),
        mcep_std=mcep.std(axis=1),
        logf0_mean=f0.mean(),
        logf0_std=f0.std(),
    )


def _check_dims(x: FeatureSequence, s: SpeakerStats) -> None:
    if x.q != s.q:
        raise ValueError(f"sequence has Q={x.q} but statistics have Q={s.q}")


def normalize(x: FeatureSequence, s: SpeakerStats) -> FeatureSequence:
    _check_dims(x, s)
    mcep = (x.mcep - s.mcep_mean[:, None]) / s.mcep_std[:, None]
    return replace(x, mcep=mcep)


def denormalize(x: FeatureSequence, s: SpeakerStats) -> FeatureSequence:
    _check_dims(x, s)
    mcep = x.mcep * s.mcep_std[:, None] + s.mcep_mean[:, None]
    return replace(x, mcep=mcep)


def convert_log_f0(log_f0, src: SpeakerStats, tgt: SpeakerStats, voiced=None) -> np.ndarray:
    """Gaussian-normalized log F0 mapping from source to target speaker.

    Unvoiced frames (``voiced`` False, or log F0 == 0 when no mask is given)
    keep the sentinel 0.
    """
    log_f0 = np.asarray(log_f0, dtype=np.float64)
    if voiced is None:
        voiced = log_f0 != 0.0
    voiced = np.asarray(voiced, dtype=bool)
    out = (log_f0 - src.logf0_mean) / src.logf0_std * tgt.logf0_std + tgt.logf0_mean
    return np.where(voiced, out, 0.0)


# ---------------------------------------------------------------- file I/O


def save_features(x: FeatureSequence, path, meta: dict | None = None) -> None:
    """Write ``x`` in the VCF1 binary layout; optional JSON sidecar ``<name>.meta.json``.

    MCEP and log F0 payloads are stored as little-endian float32.
    """
    path = Path(path)
    q, t = x.mcep.shape
    parts = [
        _HEADER.pack(MAGIC, q, t, float(x.frame_period_ms)),
        np.ascontiguousarray(x.mcep, dtype="<f4").tobytes(),
        np.ascontiguousarray(x.log_f0, dtype="<f4").tobytes(),
        x.voiced.astype(np.uint8).tobytes(),
        _U32.pack(len(x.ap_ref)),
        x.ap_ref,
    ]
    path.write_bytes(b"".join(parts))
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def load_features(path) -> FeatureSequence:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise PayloadSizeError(f"{path}: payload size mismatch (file shorter than header)")
    magic, q, t, frame_period = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if q < 1 or t < 1:
        raise FeatureFileError(f"{path}: empty dimensions Q={q} T={t}")
    off = _HEADER.size
    fixed = 4 * q * t + 4 * t + t + _U32.size
    if len(buf) < off + fixed:
        raise PayloadSizeError(f"{path}: payload size mismatch")
    mcep = np.frombuffer(buf, dtype="<f4", count=q * t, offset=off).reshape(q, t)
    off += 4 * q * t
    log_f0 = np.frombuffer(buf, dtype="<f4", count=t, offset=off)
    off += 4 * t
    voiced = np.frombuffer(buf, dtype=np.uint8, count=t, offset=off).astype(bool)
    off += t
    (n_ap,) = _U32.unpack_from(buf, off)
    off += _U32.size
    if len(buf) != off + n_ap:
        raise PayloadSizeError(f"{path}: payload size mismatch")
    if not (np.all(np.isfinite(mcep)) and np.all(np.isfinite(log_f0))):
        raise NonFinitePayloadError(f"{path}: non-finite payload")
    return FeatureSequence(
        mcep=mcep.astype(np.float64),
        log_f0=log_f0.astype(np.float64),
        voiced=voiced,
        ap_ref=buf[off:],
        frame_period_ms=frame_period,
    )


def load_meta(path) -> dict:
    return json.loads(meta_path(path).read_text())


# ---------------------------------------------------------- synthetic data


@dataclass
class DomainTransform:
    """How one synthetic speaker renders latent processes."""

    scale: np.ndarray
    offset: np.ndarray
    smoothing: float
    logf0_mean: float
    logf0_std: float

    def render_mcep(self, latent: np.ndarray) -> np.ndarray:
        a = self.smoothing
        # one-pole low-pass with unit DC gain
        smoothed = lfilter([1.0 - a], [1.0, -a], latent, axis=1)
        return _f32(self.scale[:, None] * smoothed + self.offset[:, None])

    def render_log_f0(self, latent_f0: np.ndarray, voiced: np.ndarray) -> np.ndarray:
        return np.where(voiced, _f32(self.logf0_mean + self.logf0_std * latent_f0), 0.0)


def _f32(a):
    # keep synthetic values exactly representable in the float32 file payload
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class SynthCorpus:
    """Non-parallel training corpus plus parallel renderings for evaluation.

    ``ground_truth[(d, u)][e]`` is utterance ``u`` of domain ``d`` rendered by
    domain ``e``'s transform; ``ground_truth[(d, u)][d]`` equals ``corpus[d][u]``.
    """

    corpus: dict[int, list[FeatureSequence]]
    ground_truth: dict[tuple[int, int], dict[int, FeatureSequence]]
    transforms: list[DomainTransform] = field(repr=False)
    seed: int = 0

    @property
    def n_domains(self) -> int:
        return len(self.corpus)


def _latent(rng: np.random.Generator, q: int, t: int):
    # slow AR(1) processes with unit marginal variance plus a shared sinusoidal trend
    rho = 0.9
    noise = rng.standard_normal((q, t)) * np.sqrt(1.0 - rho**2)
    z = lfilter([1.0], [1.0, -rho], noise, axis=1)
    phase = rng.uniform(0, 2 * np.pi, size=(q, 1))
    period = rng.uniform(20, 60, size=(q, 1))
    z = z + 0.5 * np.sin(2 * np.pi * np.arange(t)[None, :] / period + phase)
    f0_noise = rng.standard_normal(t) * np.sqrt(1.0 - 0.95**2)
    f0 = lfilter([1.0], [1.0, -0.95], f0_noise)
    # voiced runs: smoothed noise thresholded, at least a handful of voiced frames
    v = lfilter([0.2], [1.0, -0.8], rng.standard_normal(t))
    voiced = v > -0.3
    voiced[: min(t, 4)] = True
    return z, f0, voiced


def make_transforms(n_domains: int, q: int, rng: np.random.Generator) -> list[DomainTransform]:
    smoothing = np.linspace(0.0, 0.75, n_domains)
    out = []
    for d in range(n_domains):
        out.append(
            DomainTransform(
                scale=rng.uniform(0.5, 2.0, size=q),
                offset=rng.uniform(-3.0, 3.0, size=q),
                smoothing=float(smoothing[d]),
                logf0_mean=float(rng.uniform(4.6, 5.6)),
                logf0_std=float(rng.uniform(0.1, 0.3)),
            )
        )
    return out


def synth_corpus(
    n_domains: int,
    n_utterances: int,
    T: int,
    seed: int,
    q: int = 8,
    segment_len: int = 128,
) -> SynthCorpus:
    """Deterministic synthetic multi-speaker corpus with hidden parallel ground truth."""
    if n_domains < 2:
        raise ValueError("n_domains must be at least 2")
    if n_utterances < 1:
        raise ValueError("n_utterances must be positive")
    if T < segment_len:
        raise ValueError(f"T={T} shorter than segment length {segment_len}")
    rng = np.random.default_rng(seed)
    transforms = make_transforms(n_domains, q, rng)
    corpus: dict[int, list[FeatureSequence]] = {}
    truth: dict[tuple[int, int], dict[int, FeatureSequence]] = {}
    for d in range(n_domains):
        corpus[d] = []
        for u in range(n_utterances):
            z, f0, voiced = _latent(rng, q, T)
            ap = f"synthetic-ap:{seed}:{d}:{u}".encode()
            renders = {
                e: FeatureSequence(
                    mcep=tr.render_mcep(z),
                    log_f0=tr.render_log_f0(f0, voiced),
                    voiced=voiced,
                    ap_ref=ap,
                )
                for e, tr in enumerate(transforms)
            }
            truth[(d, u)] = renders
            corpus[d].append(renders[d])
    return SynthCorpus(corpus=corpus, ground_truth=truth, transforms=transforms, seed=seed)


def crop_segment(x: FeatureSequence, length: int, rng: np.random.Generator) -> FeatureSequence:
    """Contiguous ``length``-frame window at a uniformly drawn offset."""
    t = x.n_frames
    if length < 1 or t < length:
        raise ValueError(f"cannot crop {length} frames from a {t}-frame sequence")
    start = int(rng.integers(0, t - length + 1))
    sl = slice(start, start + length)
    return replace(x, mcep=x.mcep[:, sl], log_f0=x.log_f0[sl], voiced=x.voiced[sl])
