"""Utterance conversion with a trained generator."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .features import FeatureSequence, SpeakerStats, check_code, convert_log_f0, denormalize, normalize
from .models import ModelBundle, pad_frames


class Converter:
    """Source-speaker normalization, generator pass, target-speaker denormalization.

    Log F0 goes through the Gaussian-normalized transform; the aperiodicity
    reference is passed through untouched.
    """

    def __init__(self, models: ModelBundle, stats: dict[int, SpeakerStats]):
        self.models = models
        self.stats = stats
        self.n_domains = models.config.n_domains
        if sorted(stats) != list(range(self.n_domains)):
            raise ValueError("speaker statistics must cover every domain")

    @classmethod
    def from_checkpoint(cls, path) -> "Converter":
        from .training import checkpoint_load

        state = checkpoint_load(path)
        return cls(state.models, state.stats)

    def convert_mcep(self, mcep_norm: np.ndarray, source: int, target: int) -> np.ndarray:
        """Run the generator on an already normalized Q x T matrix of any length."""
        G = self.models.generator
        dtype = next(G.parameters()).dtype
        x = torch.as_tensor(np.asarray(mcep_norm), dtype=dtype).unsqueeze(0)
        x, T = pad_frames(x)
        with torch.no_grad():
            y = G(x, source, target)
        return y[0, :, :T].double().numpy()

    def __call__(self, x: FeatureSequence, source: int, target: int) -> FeatureSequence:
        source = check_code(source, self.n_domains)
        target = check_code(target, self.n_domains)
        src, tgt = self.stats[source], self.stats[target]
        xn = normalize(x, src)
        yn = replace(xn, mcep=self.convert_mcep(xn.mcep, source, target))
        y = denormalize(yn, tgt)
        return replace(y, log_f0=convert_log_f0(x.log_f0, src, tgt, x.voiced))


class IdentityConverter:
    """Returns the input unchanged; the no-conversion baseline."""

    def __call__(self, x: FeatureSequence, source: int, target: int) -> FeatureSequence:
        return x


class OracleConverter:
    """Looks up the parallel reference; scores zero on every metric."""

    def __init__(self, items):
        self._by_id = {id(it.features): it for it in items}

    def __call__(self, x: FeatureSequence, source: int, target: int) -> FeatureSequence:
        item = self._by_id.get(id(x))
        if item is None:
            raise KeyError("oracle has no reference for this utterance")
        return item.references[target]
