"""Experiment configuration: one JSON document drives every command."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .datasetgen import FAMILY_NOTE_PARAMS, SoundSettings
from .dspfeatures import MelParams
from .encoder.training import TrainConfig
from .errors import InvalidArgumentError
from .synthbank import Family

SINGLE_METHODS = {
    "family_classification": {"loss": "classification", "class_target": "family"},
    "instrument_classification": {"loss": "classification", "class_target": "instrument"},
    "triplet": {"loss": "triplet", "batch_kind": "single"},
    "infonce": {"loss": "infonce", "batch_kind": "single"},
    "full_triplet": {"loss": "full_triplet", "batch_kind": "single"},
}
MIXTURE_METHODS = {
    "multi_encoder": {"loss": "multi_encoder"},
    "triplet": {"loss": "triplet", "batch_kind": "mixture"},
    "full_triplet": {"loss": "full_triplet", "batch_kind": "mixture"},
    "infonce": {"loss": "infonce", "batch_kind": "mixture"},
}
# the multi-encoder is distilled from this single-source method
MULTI_ENCODER_TEACHER = "instrument_classification"


@dataclass(frozen=True)
class BankConfig:
    families: tuple[str, ...] = ("percussion", "bass", "synth_lead")
    n_per_family: int = 40
    n_test_per_family: int = 10
    augment: bool = True


@dataclass(frozen=True)
class DataConfig:
    note_length: float = 4.0
    note_duration: float = 3.0
    score_length: float = 10.0
    density: float = 0.8
    p_score: float = 0.5
    mixture_length: float = 10.0
    mixture_slots: tuple[str, ...] = ("percussion", "bass", "synth_lead")
    n_pool_sounds: int = 8
    n_pool_stems: int = 4
    # family -> [pitch mean, pitch std, lo, hi, velocity mean, velocity std]; empty = built-in table
    note_distributions: Mapping[str, tuple] = field(default_factory=dict)

    def sound_settings(self) -> SoundSettings:
        return SoundSettings(note_length=self.note_length, note_duration=self.note_duration,
                             score_length=self.score_length, density=self.density, p_score=self.p_score)

    def distribution_params(self) -> dict:
        params = dict(FAMILY_NOTE_PARAMS)
        for fam, vals in self.note_distributions.items():
            params[Family(fam)] = tuple(vals)
        return params


@dataclass(frozen=True)
class EvalConfig:
    n_test_sounds: int = 6
    n_test_mixtures: int = 300
    ks: tuple[int, ...] = (1, 5)
    ranking: str = "family"
    single_methods: tuple[str, ...] = ("descriptors", "family_classification", "instrument_classification",
                                       "triplet", "infonce")
    mixture_methods: tuple[str, ...] = ("descriptors", "multi_encoder", "triplet", "full_triplet", "infonce")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    bank: BankConfig = BankConfig()
    data: DataConfig = DataConfig()
    features: MelParams = MelParams()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def train_config(self, method: str, table: str) -> TrainConfig:
        table_methods = SINGLE_METHODS if table == "single" else MIXTURE_METHODS
        if method not in table_methods:
            raise InvalidArgumentError(f"method {method!r} not available for {table} evaluation")
        d = self.train.to_dict()
        d.update(table_methods[method])
        d["seed"] = self.seed
        d["family_slots"] = list(self.data.mixture_slots)
        return TrainConfig.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Mapping[str, Any] | None, path: str):
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidArgumentError(f"unknown keys in {path}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        if isinstance(getattr(defaults, name), tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"invalid {path}: {exc}") from exc


def config_from_dict(d: Mapping[str, Any]) -> ExperimentConfig:
    d = dict(d)
    allowed = {"seed", "bank", "data", "features", "train", "eval"}
    if set(d) - allowed:
        raise InvalidArgumentError(f"unknown top-level keys: {sorted(set(d) - allowed)}")
    cfg = ExperimentConfig(
        seed=int(d.get("seed", 0)),
        bank=_build(BankConfig, d.get("bank"), "bank"),
        data=_build(DataConfig, d.get("data"), "data"),
        features=_build(MelParams, d.get("features"), "features"),
        train=_build(TrainConfig, d.get("train"), "train"),
        eval=_build(EvalConfig, d.get("eval"), "eval"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        fams = [Family(f) for f in cfg.bank.families]
        [Family(f) for f in cfg.data.mixture_slots]
        [Family(f) for f in cfg.data.note_distributions]
    except ValueError as exc:
        raise InvalidArgumentError(str(exc)) from exc
    if not fams:
        raise InvalidArgumentError("bank.families must not be empty")
    for f in cfg.data.mixture_slots:
        if Family(f) not in fams:
            raise InvalidArgumentError(f"mixture slot {f!r} is not a bank family")
    if cfg.bank.n_test_per_family >= cfg.bank.n_per_family:
        raise InvalidArgumentError("need at least one training instrument per family")
    for m in cfg.eval.single_methods:
        if m != "descriptors" and m not in SINGLE_METHODS:
            raise InvalidArgumentError(f"unknown single-source method {m!r}")
    for m in cfg.eval.mixture_methods:
        if m != "descriptors" and m not in MIXTURE_METHODS:
            raise InvalidArgumentError(f"unknown mixture method {m!r}")
    if cfg.eval.ranking not in ("family", "global"):
        raise InvalidArgumentError(f"unknown ranking {cfg.eval.ranking!r}")
    if cfg.data.n_pool_sounds < 2:
        raise InvalidArgumentError("n_pool_sounds must be >= 2 to draw positive pairs")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidArgumentError("config must be a JSON object")
    return config_from_dict(raw)
