"""Objective conversion metrics: mel-cepstral distortion and modulation spectra distance.

Conventions (recorded in every report's ``conventions`` block):

* MCD uses every stored MCEP dimension and averages the per-frame distortion
  along a DTW path (Euclidean frame distance, steps (1,0), (0,1), (1,1),
  unit weights, both endpoints pinned).
* The modulation spectrum of each dimension is the Hann-windowed (periodic,
  128 frames, 50 % overlap) power spectrum averaged over windows, floored at
  1e-10 and converted to log10.
* MSD is ten times the RMS difference of two log10 modulation spectra.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import get_window

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
MS_WINDOW = 128
MS_FLOOR = 1e-10

CONVENTIONS = {
    "mcd": "all stored dims; (10/ln10)*sqrt(2*sum d^2) per frame; mean over DTW path",
    "dtw": "euclidean frame cost; steps (1,0),(0,1),(1,1) unit weight; endpoints pinned",
    "ms": f"periodic hann {MS_WINDOW}, hop {MS_WINDOW // 2}, mean power over windows, floor {MS_FLOOR}, log10",
    "msd": "10 * rms(log10 MS difference) over dims and bins",
}


def frame_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every frame of ``a`` (Q x Ta) and ``b`` (Q x Tb)."""
    diff = a[:, :, None] - b[:, None, :]
    return np.sqrt((diff**2).sum(axis=0))


def dtw_align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Optimal DTW path as an (L, 2) integer array of (i, j) frame pairs.

    Ties prefer the diagonal step, then the step in ``a``, then the step in ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("dtw_align needs two non-empty Q x T matrices")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    cost = frame_distances(a, b)
    n, m = cost.shape
    inf = math.inf
    acc = [[0.0] + [inf] * m] + [[inf] * (m + 1) for _ in range(n)]
    for i in range(1, n + 1):
        row_cost = cost[i - 1].tolist()
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = row_cost[j - 1] + best
    # backtrack
    i, j = n, m
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        cands = ((acc[i - 1][j - 1], i - 1, j - 1), (acc[i - 1][j], i - 1, j), (acc[i][j - 1], i, j - 1))
        _, i, j = min(cands, key=lambda t: t[0])
        path.append((i - 1, j - 1))
    return np.array(path[::-1], dtype=np.int64)


def path_cost(a: np.ndarray, b: np.ndarray, path: np.ndarray) -> float:
    d = a[:, path[:, 0]] - b[:, path[:, 1]]
    return float(np.sqrt((d**2).sum(axis=0)).sum())


def mcd(target: np.ndarray, converted: np.ndarray, align: bool = True) -> float:
    """Mel-cepstral distortion in dB, averaged over aligned frames."""
    target = np.asarray(target, dtype=np.float64)
    converted = np.asarray(converted, dtype=np.float64)
    if target.shape[0] != converted.shape[0]:
        raise ValueError(f"dimension mismatch: {target.shape[0]} vs {converted.shape[0]}")
    if align:
        path = dtw_align(target, converted)
        target = target[:, path[:, 0]]
        converted = converted[:, path[:, 1]]
    elif target.shape != converted.shape:
        raise ValueError("unaligned MCD needs equal-length inputs")
    per_frame = MCD_CONST * np.sqrt(((target - converted) ** 2).sum(axis=0))
    return float(per_frame.mean())


def modulation_spectrum(x: np.ndarray, window: int = MS_WINDOW) -> np.ndarray:
    """Log10 modulation spectrum, shape (Q, window // 2 + 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a Q x T matrix")
    T = x.shape[1]
    if T < window:
        raise ValueError(f"sequence of {T} frames shorter than modulation window {window}")
    hop = window // 2
    starts = range(0, T - window + 1, hop)
    w = get_window("hann", window)
    frames = np.stack([x[:, s : s + window] for s in starts], axis=1)  # Q x W x window
    power = np.abs(np.fft.rfft(frames * w, axis=-1)) ** 2
    return np.log10(np.maximum(power.mean(axis=1), MS_FLOOR))


def msd(target: np.ndarray, converted: np.ndarray, window: int = MS_WINDOW) -> float:
    """Modulation spectra distance in dB."""
    target = np.asarray(target)
    converted = np.asarray(converted)
    if target.shape[0] != converted.shape[0]:
        raise ValueError(f"dimension mismatch: {target.shape[0]} vs {converted.shape[0]}")
    diff = modulation_spectrum(target, window) - modulation_spectrum(converted, window)
    return float(10.0 * np.sqrt(np.mean(diff**2)))


# ----------------------------------------------------------- corpus level


@dataclass
class EvalItem:
    """One source utterance with its parallel references in other domains."""

    source: int
    utterance: int
    features: object  # FeatureSequence
    references: dict  # target domain -> FeatureSequence


@dataclass
class EvalRecord:
    source: int
    target: int
    utterance: int
    mcd: float
    msd: float
    path_length: int


@dataclass
class EvalReport:
    records: list[EvalRecord]
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def pairs(self) -> list[dict]:
        groups = defaultdict(list)
        for r in self.records:
            groups[(r.source, r.target)].append(r)
        rows = []
        for (s, t), recs in sorted(groups.items()):
            rows.append(
                {
                    "source": s,
                    "target": t,
                    "count": len(recs),
                    "mcd": float(np.mean([r.mcd for r in recs])),
                    "msd": float(np.mean([r.msd for r in recs])),
                    "path_length": float(np.mean([r.path_length for r in recs])),
                }
            )
        return rows

    def overall(self) -> dict:
        if not self.records:
            return {"count": 0, "mcd": float("nan"), "msd": float("nan")}
        return {
            "count": len(self.records),
            "mcd": float(np.mean([r.mcd for r in self.records])),
            "msd": float(np.mean([r.msd for r in self.records])),
        }

    def to_json(self) -> dict:
        return {
            "overall": self.overall(),
            "pairs": self.pairs(),
            "records": [asdict(r) for r in self.records],
            "conventions": self.conventions,
        }

    def write(self, out_dir, stem: str = "eval") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=2))
        rows = self.pairs()
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["source", "target", "count", "mcd", "msd", "path_length"])
            w.writeheader()
            w.writerows(rows)


def _mcep(x):
    return x.mcep if hasattr(x, "mcep") else np.asarray(x)


def evaluate_corpus(convert: Callable, items: list[EvalItem], n_domains: int) -> EvalReport:
    """Convert every source utterance to every other domain and score it.

    ``convert(features, source, target)`` returns a FeatureSequence or an MCEP matrix.
    """
    records = []
    for item in items:
        for tgt in range(n_domains):
            if tgt == item.source:
                continue
            if tgt not in item.references:
                raise KeyError(f"no parallel reference for utterance {item.utterance} of domain {item.source} in domain {tgt}")
            ref = _mcep(item.references[tgt])
            out = _mcep(convert(item.features, item.source, tgt))
            path = dtw_align(ref, out)
            records.append(
                EvalRecord(
                    source=item.source,
                    target=tgt,
                    utterance=item.utterance,
                    mcd=float(np.mean(MCD_CONST * np.sqrt(((ref[:, path[:, 0]] - out[:, path[:, 1]]) ** 2).sum(axis=0)))),
                    msd=msd(ref, out),
                    path_length=len(path),
                )
            )
    return EvalReport(records)


def items_from_synth(synth, utterances=None) -> list[EvalItem]:
    """Evaluation items for a :class:`~vcstar.features.SynthCorpus`.

    ``utterances`` selects utterance indices (default: all).
    """
    items = []
    for d, seqs in sorted(synth.corpus.items()):
        for u in utterances if utterances is not None else range(len(seqs)):
            refs = synth.ground_truth[(d, u)]
            items.append(EvalItem(source=d, utterance=u, features=refs[d], references=dict(refs)))
    return items
