"""Per-instrument sound pools and a pooled-feature cache.

Training draws its positive pairs from a fixed set of files per instrument,
the way a generated dataset on disk would be used; mixtures are summed from
pooled stems on the fly, so every mixture is fresh even though stems repeat.
"""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .datasetgen import (
    FamilyNoteDistribution,
    MixtureSpec,
    SoundSettings,
    SoundSpec,
    draw_single_note,
    generate_score,
    keyed_rng,
    mix_stems,
    render_sound,
    SILENCE_RMS,
)
from .dspfeatures import MelParams, mel_spectrogram
from .encoder.network import pool_mel
from .errors import SilentAudioError
from .synthbank import AudioBuffer, Family, InstrumentPatch

# rng stream ids, so pools never share draws with batch sampling
STREAM_SOUNDS, STREAM_STEMS, STREAM_TEST_SOUNDS, STREAM_TEST_MIX = 11, 12, 13, 14


class Corpus:
    def __init__(self, bank: Sequence[InstrumentPatch], dists: Mapping[Family, FamilyNoteDistribution],
                 settings: SoundSettings = SoundSettings(), mel: MelParams = MelParams(), seed: int = 0,
                 mixture_length: float | None = None):
        self.patches = {p.id: p for p in bank}
        self.dists = dists
        self.settings = settings
        self.mel = mel
        self.seed = seed
        self.mixture_length = settings.score_length if mixture_length is None else mixture_length
        self.sound_pool: dict[int, list[SoundSpec]] = {}
        self.stem_pool: dict[int, list[SoundSpec]] = {}
        self._stem_audio: dict[SoundSpec, np.ndarray] = {}
        self._features: dict[SoundSpec, np.ndarray] = {}

    @property
    def sample_rate(self) -> int:
        return self.mel.sample_rate

    def render(self, spec: SoundSpec) -> AudioBuffer:
        cached = self._stem_audio.get(spec)
        if cached is not None:
            return AudioBuffer(cached.astype(np.float64), self.sample_rate)
        return render_sound(self.patches[spec.instrument_id], spec, self.sample_rate)

    def is_silent(self, spec: SoundSpec) -> bool:
        return self.render(spec).rms() < SILENCE_RMS

    def build_sound_pools(self, ids: Iterable[int], n_sounds: int) -> None:
        """``n_sounds`` single notes or scores per instrument (half of each, rounded)."""
        for iid in ids:
            p = self.patches[iid]
            rng = keyed_rng(self.seed, STREAM_SOUNDS, iid)
            specs = []
            for j in range(n_sounds):
                if j % 2 == 1:
                    specs.append(generate_score(self.dists[p.family], self.settings.score_length,
                                                self.settings.density, rng, iid, self.settings))
                else:
                    specs.append(draw_single_note(iid, self.dists[p.family], rng, self.settings))
            self.sound_pool[iid] = specs

    def build_stem_pools(self, ids: Iterable[int], n_stems: int, max_redraws: int = 20) -> None:
        for iid in ids:
            p = self.patches[iid]
            rng = keyed_rng(self.seed, STREAM_STEMS, iid)
            stems = []
            for _ in range(n_stems):
                for _attempt in range(max_redraws):
                    spec = generate_score(self.dists[p.family], self.mixture_length, self.settings.density,
                                          rng, iid, self.settings)
                    audio = render_sound(p, spec, self.sample_rate)
                    if audio.rms() >= SILENCE_RMS:
                        break
                else:
                    raise SilentAudioError(f"instrument {iid} renders silent stems", iid)
                self._stem_audio[spec] = audio.samples.astype(np.float32)
                stems.append(spec)
            self.stem_pool[iid] = stems

    def audio(self, item: SoundSpec | MixtureSpec) -> AudioBuffer:
        if isinstance(item, MixtureSpec):
            return mix_stems([self.render(s) for _, s in item.components])
        return self.render(item)

    def features(self, item: SoundSpec | MixtureSpec) -> np.ndarray:
        if isinstance(item, MixtureSpec):
            return pool_mel(mel_spectrogram(self.audio(item), self.mel))
        f = self._features.get(item)
        if f is None:
            f = pool_mel(mel_spectrogram(self.render(item), self.mel))
            self._features[item] = f
        return f

    def batch_features(self, items: Sequence[SoundSpec | MixtureSpec]) -> np.ndarray:
        return np.stack([self.features(it) for it in items])

    def input_stats(self, ids: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std of pooled features over the sound pools of ``ids``."""
        X = np.stack([self.features(s) for iid in sorted(ids) for s in self.sound_pool[iid]])
        std = X.std(axis=0)
        return X.mean(axis=0), np.where(std > 1e-8, std, 1.0)
