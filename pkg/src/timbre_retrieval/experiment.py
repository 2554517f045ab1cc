"""End-to-end toy experiments: bank, training, database, and both QbE tables."""
from __future__ import annotations

import hashlib
import logging
import time
from typing import Callable, Sequence

import numpy as np

from .config import MULTI_ENCODER_TEACHER, ExperimentConfig
from .corpus import STREAM_TEST_MIX, STREAM_TEST_SOUNDS, Corpus
from .datasetgen import (
    MixtureSpec,
    SoundSpec,
    all_distributions,
    build_mixture_batch,
    draw_sound,
    keyed_rng,
)
from .dspfeatures import fit_descriptor_normalizer, mel_spectrogram, timbre_descriptors
from .encoder.network import EncoderParams, embed_features, l2_normalize, pool_mel
from .encoder.training import TrainResult, train
from .errors import InvalidArgumentError
from .retrieval import EmbeddingDatabase, EvalReport, build_database, evaluate_mixture, evaluate_single_source
from .synthbank import AudioBuffer, InstrumentPatch, augment_bank, generate_bank

log = logging.getLogger(__name__)

STREAM_SPLIT = 21


def make_bank(cfg: ExperimentConfig) -> tuple[list[InstrumentPatch], dict[str, list[int]]]:
    """Generate the bank, hold out test instruments per family, append augmented twins.

    Effect-stripped twins are only made from training patches and join the
    training split.
    """
    bank = generate_bank(cfg.bank.n_per_family, cfg.bank.families, cfg.seed)
    rng = keyed_rng(cfg.seed, STREAM_SPLIT)
    test: list[int] = []
    for fam in sorted({p.family for p in bank}, key=lambda f: f.index):
        ids = [p.id for p in bank if p.family == fam]
        test += [int(i) for i in rng.choice(ids, size=cfg.bank.n_test_per_family, replace=False)]
    test_set = set(test)
    train_ids = [p.id for p in bank if p.id not in test_set]
    if cfg.bank.augment:
        bank = augment_bank(bank, eligible=train_ids)
        train_ids = [p.id for p in bank if p.id not in test_set]
    return bank, {"train": sorted(train_ids), "test": sorted(test)}


def params_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for k in sorted(params.arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


class Experiment:
    """Lazily trains, embeds and evaluates every configured method on one bank.

    ``bank`` and ``split`` default to :func:`make_bank` of the config; pass
    them to evaluate against a bank loaded from disk.
    """

    def __init__(self, cfg: ExperimentConfig, bank: list[InstrumentPatch] | None = None,
                 split: dict[str, list[int]] | None = None):
        self.cfg = cfg
        if bank is None:
            bank, split = make_bank(cfg)
        elif split is None:
            raise InvalidArgumentError("a bank passed without its train/test split")
        self.bank, self.split = list(bank), split
        self.by_id = {p.id: p for p in self.bank}
        self.dists = all_distributions(self.cfg.bank.families, self.cfg.data.distribution_params())
        self.settings = self.cfg.data.sound_settings()
        self.corpus = Corpus(self.bank, self.dists, self.settings, self.cfg.features, self.cfg.seed,
                             self.cfg.data.mixture_length)
        self.train_bank = [self.by_id[i] for i in self.split["train"]]
        self.test_bank = [self.by_id[i] for i in self.split["test"]]
        self.results: dict[tuple[str, str], TrainResult] = {}
        self._test_sounds: list[tuple[SoundSpec, int]] | None = None
        self._test_mixtures: list[MixtureSpec] | None = None
        self._cache: dict[str, np.ndarray] = {}
        self.timings: dict[str, float] = {}

    # -- data --------------------------------------------------------------

    def test_sounds(self) -> list[tuple[SoundSpec, int]]:
        if self._test_sounds is None:
            out = []
            for p in self.test_bank:
                rng = keyed_rng(self.cfg.seed, STREAM_TEST_SOUNDS, p.id)
                for _ in range(self.cfg.eval.n_test_sounds):
                    out.append((draw_sound(p, self.dists[p.family], rng, self.settings), p.id))
            self._test_sounds = out
        return self._test_sounds

    def test_mixtures(self) -> list[MixtureSpec]:
        if self._test_mixtures is None:
            out = []
            for i in range(self.cfg.eval.n_test_mixtures):
                rng = keyed_rng(self.cfg.seed, STREAM_TEST_MIX, i)
                batch = build_mixture_batch(self.test_bank, self.dists, 1, self.cfg.data.mixture_slots, rng,
                                            self.settings, mixture_length=self.cfg.data.mixture_length,
                                            is_silent=self.corpus.is_silent)
                out.append(batch.items[0])
            self._test_mixtures = out
        return self._test_mixtures

    def _audio_features(self, key: str, items: Sequence, fn: Callable[[AudioBuffer], np.ndarray]) -> np.ndarray:
        if key not in self._cache:
            self._cache[key] = np.stack([fn(self.corpus.audio(it)) for it in items])
        return self._cache[key]

    def _pooled(self, audio: AudioBuffer) -> np.ndarray:
        return pool_mel(mel_spectrogram(audio, self.cfg.features))

    def test_sound_features(self) -> np.ndarray:
        return self._audio_features("sound_pooled", [s for s, _ in self.test_sounds()], self._pooled)

    def test_mixture_features(self) -> np.ndarray:
        return self._audio_features("mix_pooled", self.test_mixtures(), self._pooled)

    def test_sound_descriptors(self) -> np.ndarray:
        return self._audio_features("sound_desc", [s for s, _ in self.test_sounds()], timbre_descriptors)

    def test_mixture_descriptors(self) -> np.ndarray:
        return self._audio_features("mix_desc", self.test_mixtures(), timbre_descriptors)

    # -- training ----------------------------------------------------------

    def use_params(self, method: str, table: str, params: EncoderParams) -> None:
        """Register an already trained encoder instead of training one."""
        self.results[(table, method)] = TrainResult(params, [], self.cfg.train_config(method, table))

    def trained(self, method: str, table: str) -> TrainResult:
        key = (table, method)
        if key not in self.results:
            tc = self.cfg.train_config(method, table)
            ids = self.split["train"]
            self.corpus.build_sound_pools([i for i in ids if i not in self.corpus.sound_pool],
                                          self.cfg.data.n_pool_sounds)
            if tc.effective_batch_kind == "mixture":
                self.corpus.build_stem_pools([i for i in ids if i not in self.corpus.stem_pool],
                                             self.cfg.data.n_pool_stems)
            frozen = None
            if tc.loss == "multi_encoder":
                frozen = self.trained(MULTI_ENCODER_TEACHER, "single").params
            t0 = time.perf_counter()
            self.results[key] = train(tc, self.train_bank, self.dists, self.corpus, frozen=frozen)
            self.timings[f"{table}/{method}"] = time.perf_counter() - t0
            log.info("trained %s/%s in %.1fs", table, method, self.timings[f"{table}/{method}"])
        return self.results[key]

    # -- databases ---------------------------------------------------------

    def encoder_database(self, params: EncoderParams) -> EmbeddingDatabase:
        def embed(audio):
            return embed_features(params, self._pooled(audio)[None])[0]

        return build_database(self.bank, self.dists, embed, self.cfg.features.sample_rate,
                              self.cfg.data.note_length, self.cfg.data.note_duration,
                              provenance={"checkpoint": params_digest(params)})

    def descriptor_database(self):
        raw = build_database(self.bank, self.dists, timbre_descriptors, self.cfg.features.sample_rate,
                             self.cfg.data.note_length, self.cfg.data.note_duration,
                             provenance={"checkpoint": "timbre_descriptors"})
        norm = fit_descriptor_normalizer(list(raw.vectors))
        unit, _ = l2_normalize(norm(raw.vectors))
        prov = dict(raw.provenance, normalizer={"mean": norm.mean.tolist(), "std": norm.std.tolist()})
        return EmbeddingDatabase(raw.ids, raw.families, unit, prov), norm

    # -- evaluation --------------------------------------------------------

    def evaluate(self, method: str, table: str) -> EvalReport:
        ks = self.cfg.eval.ks
        echo = {"method": method, "table": table, "config_hash": self.cfg.digest()}
        if method == "descriptors":
            db, norm = self.descriptor_database()
            raw = self.test_sound_descriptors() if table == "single" else self.test_mixture_descriptors()
            Q, _ = l2_normalize(norm(raw))
        else:
            res = self.trained(method, table)
            teacher = res.params
            if res.config.loss == "multi_encoder":
                teacher = self.trained(MULTI_ENCODER_TEACHER, "single").params
            db = self.encoder_database(teacher)
            X = self.test_sound_features() if table == "single" else self.test_mixture_features()
            Q = embed_features(res.params, X)
        if table == "single":
            queries = [(q, t) for q, (_, t) in zip(Q, self.test_sounds())]
            return evaluate_single_source(db, None, queries, ks, echo)
        pairs = list(zip(self.test_mixtures(), Q))
        return evaluate_mixture(db, None, pairs, ks, self.cfg.eval.ranking, echo)


def run_experiment(cfg: ExperimentConfig, tables: Sequence[str] = ("single", "mixture")) -> dict[str, dict[str, EvalReport]]:
    exp = Experiment(cfg)
    out: dict[str, dict[str, EvalReport]] = {}
    for table in tables:
        methods = cfg.eval.single_methods if table == "single" else cfg.eval.mixture_methods
        out[table] = {m: exp.evaluate(m, table) for m in methods}
    return out
