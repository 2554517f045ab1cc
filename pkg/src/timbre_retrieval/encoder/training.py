"""Optimizers, batch objectives, the training loop and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..datasetgen import (
    BatchSpec,
    FamilyNoteDistribution,
    MixtureSpec,
    build_mixture_batch,
    build_single_source_batch,
    keyed_rng,
)
from ..dspfeatures import MelParams
from ..errors import DivergenceError, InvalidArgumentError
from ..synthbank import Family, InstrumentPatch
from . import losses
from .network import (
    EncoderParams,
    backward,
    embed_features,
    forward,
    init_params,
    l2_normalize,
    l2_normalize_backward,
    pool_mel,
)

log = logging.getLogger(__name__)

LOSSES = ("infonce", "triplet", "full_triplet", "classification", "multi_encoder")
STREAM_INIT, STREAM_BATCH = 0, 1


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "full_triplet"
    batch_kind: str = "mixture"  # "single" or "mixture"; forced by classification / multi_encoder
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 24
    n_mixtures: int = 8
    family_slots: tuple[str, ...] = ("percussion", "bass", "synth_lead")
    temperature: float = 0.1
    margin: float = 0.2
    hidden: int = 256
    dim: int = 64
    seed: int = 0
    class_target: str = "instrument"  # or "family"
    forbid_augmented_twins: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise InvalidArgumentError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.temperature <= 0:
            raise InvalidArgumentError("temperature must be > 0")
        if self.margin < 0:
            raise InvalidArgumentError("margin must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise InvalidArgumentError("batch size N must be even")
        if self.batch_kind not in ("single", "mixture"):
            raise InvalidArgumentError(f"unknown batch kind {self.batch_kind!r}")
        if self.class_target not in ("instrument", "family"):
            raise InvalidArgumentError(f"unknown classification target {self.class_target!r}")
        object.__setattr__(self, "family_slots", tuple(Family(f).value for f in self.family_slots))

    @property
    def effective_batch_kind(self) -> str:
        if self.loss == "classification":
            return "single"
        if self.loss == "multi_encoder":
            return "mixture"
        return self.batch_kind

    @property
    def anchor_mode(self) -> str:
        if self.loss == "full_triplet":
            return "full"
        return "mixture_anchored" if self.effective_batch_kind == "mixture" else "singles_and_pairs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family_slots"] = list(self.family_slots)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "family_slots" in d:
            d["family_slots"] = tuple(d["family_slots"])
        return cls(**d)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for k in sorted(grads):
            arrays[k] -= self.lr * grads[k]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arrays[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(config.lr, config.beta1, config.beta2, config.eps)


# ---------------------------------------------------------------------------
# objectives


def init_head(rng: np.random.Generator, n_classes: int, dim: int) -> dict[str, np.ndarray]:
    lim = np.sqrt(6.0 / (n_classes + dim))
    return {"Wc": rng.uniform(-lim, lim, size=(n_classes, dim)), "bc": np.zeros(n_classes)}


def _as_pooled(mels) -> np.ndarray:
    if isinstance(mels, np.ndarray):
        return mels
    return np.stack([pool_mel(m) for m in mels])


def classification_pretext_loss(params: EncoderParams, head: Mapping[str, np.ndarray], mels, labels):
    """Softmax cross-entropy of a linear head on the pre-normalization projection.

    ``mels`` is a list of MelSpectrogram or an array of pooled features.
    Returns ``(loss, grads)`` with grads for both the encoder and the head.
    """
    X = _as_pooled(mels)
    labels = np.asarray(labels)
    if head["Wc"].shape[1] != params.dim * params.n_heads:
        raise InvalidArgumentError("classification head does not match the projection width")
    z, cache = forward(params, X)
    logits = z @ head["Wc"].T + head["bc"]
    loss, dlogits = losses.softmax_cross_entropy(logits, labels)
    grads = backward(params, cache, dlogits @ head["Wc"])
    grads["Wc"] = dlogits.T @ z
    grads["bc"] = dlogits.sum(axis=0)
    return loss, grads


def contrastive_objective(params: EncoderParams, X: np.ndarray, targets: np.ndarray, config: TrainConfig,
                          is_mixture: np.ndarray | None = None):
    z, cache = forward(params, X)
    E, norms = l2_normalize(z)
    if config.loss == "infonce":
        loss, dE = losses.infonce_loss(E, targets, config.temperature)
    else:
        loss, dE = losses.triplet_loss(E, targets, config.margin, config.anchor_mode, is_mixture)
    return loss, backward(params, cache, l2_normalize_backward(E, norms, dE))


def multi_encoder_objective(params: EncoderParams, X_mix: np.ndarray, frozen_targets: np.ndarray):
    """``frozen_targets`` has shape (n_mixtures, K, d), one frozen embedding per stem."""
    z, cache = forward(params, X_mix)
    n, K, d = frozen_targets.shape
    if K != params.n_heads:
        raise InvalidArgumentError(f"{params.n_heads} heads but {K} frozen targets per mixture")
    O, norms = l2_normalize(z.reshape(n, K, d))
    loss, dO = losses.multi_encoder_loss(O, frozen_targets)
    dz = l2_normalize_backward(O, norms, dO).reshape(n, K * d)
    return loss, backward(params, cache, dz)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: EncoderParams
    losses: list[float]
    config: TrainConfig
    head: dict[str, np.ndarray] | None = None
    label_ids: list = field(default_factory=list)


def class_labels(bank: Sequence[InstrumentPatch], target: str):
    """Label index per instrument id, and the list of label keys."""
    if target == "family":
        keys = sorted({p.family for p in bank}, key=lambda f: f.index)
        idx = {f: i for i, f in enumerate(keys)}
        return {p.id: idx[p.family] for p in bank}, [f.value for f in keys]
    keys = sorted(p.id for p in bank)
    return {iid: i for i, iid in enumerate(keys)}, keys


def sample_batch(config: TrainConfig, bank, dists, corpus, step: int) -> BatchSpec:
    rng = keyed_rng(config.seed, STREAM_BATCH, step)
    if config.effective_batch_kind == "single":
        return build_single_source_batch(bank, dists, config.batch_size, rng, corpus.settings,
                                         pool=corpus.sound_pool,
                                         forbid_augmented_twins=config.forbid_augmented_twins)
    return build_mixture_batch(bank, dists, config.n_mixtures, config.family_slots, rng, corpus.settings,
                               mixture_length=corpus.mixture_length, stem_pool=corpus.stem_pool,
                               single_pool=corpus.sound_pool)


def train(config: TrainConfig, bank: Sequence[InstrumentPatch], dists: Mapping[Family, FamilyNoteDistribution],
          corpus=None, frozen: EncoderParams | None = None, mel: MelParams | None = None) -> TrainResult:
    """Run ``config.steps`` updates over freshly sampled batches.

    ``corpus`` supplies pooled features (a :class:`~timbre_retrieval.corpus.Corpus`
    with sound pools for every instrument of ``bank`` and, for mixture
    training, stem pools). ``frozen`` is the single-source encoder the
    multi-encoder is distilled toward.
    """
    if corpus is None:
        from ..corpus import Corpus

        corpus = Corpus(bank, dists, mel=mel or MelParams(), seed=config.seed)
    ids = [p.id for p in bank]
    if any(i not in corpus.sound_pool for i in ids):
        corpus.build_sound_pools([i for i in ids if i not in corpus.sound_pool], 8)
    if config.effective_batch_kind == "mixture" and any(i not in corpus.stem_pool for i in ids):
        corpus.build_stem_pools([i for i in ids if i not in corpus.stem_pool], 4)
    if config.loss == "multi_encoder" and frozen is None:
        raise InvalidArgumentError("multi_encoder training needs a frozen single-source encoder")

    init_rng = keyed_rng(config.seed, STREAM_INIT)
    in_mean, in_std = corpus.input_stats(ids)
    n_heads = len(config.family_slots) if config.loss == "multi_encoder" else 1
    params = init_params(init_rng, corpus.mel, config.hidden, config.dim, in_mean, in_std,
                         n_heads=n_heads, slots=config.family_slots if n_heads > 1 else ())
    head = None
    labels_of, label_keys = None, []
    if config.loss == "classification":
        labels_of, label_keys = class_labels(bank, config.class_target)
        head = init_head(init_rng, len(label_keys), config.dim)

    opt = make_optimizer(config)
    trace: list[float] = []
    for step in range(config.steps):
        batch = sample_batch(config, bank, dists, corpus, step)
        if config.loss == "multi_encoder":
            mixes = [it for it in batch.items if isinstance(it, MixtureSpec)]
            X = corpus.batch_features(mixes)
            stems = np.stack([corpus.batch_features([s for _, s in m.components]) for m in mixes])
            targets = embed_features(frozen, stems.reshape(-1, stems.shape[-1]))
            targets = targets.reshape(len(mixes), n_heads, config.dim)
            loss, grads = multi_encoder_objective(params, X, targets)
        elif config.loss == "classification":
            X = corpus.batch_features(batch.items)
            y = np.array([labels_of[it.instrument_id] for it in batch.items])
            loss, grads = classification_pretext_loss(params, head, X, y)
        else:
            X = corpus.batch_features(batch.items)
            T = losses.build_target_matrix(batch)
            loss, grads = contrastive_objective(params, X, T, config, batch.is_mixture)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step, losses=trace + [loss])
        trace.append(loss)
        if head is not None:
            arrays = {**params.arrays, **head}
            opt.step(arrays, grads)
        else:
            opt.step(params.arrays, grads)
        if step % 500 == 0:
            log.debug("step %d loss %.5f", step, loss)
    return TrainResult(params, trace, config, head, label_keys)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(prefix, params: EncoderParams, config: TrainConfig | None = None, step: int = 0,
                    extra: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` (little-endian float64 arrays back to back) and ``<prefix>.json``."""
    prefix = Path(prefix)
    blob, index, offset = [], [], 0
    for name in sorted(params.arrays):
        a = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        blob.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format": 1,
        "architecture": {"mel": asdict(params.mel), "hidden": params.hidden, "dim": params.dim,
                         "n_heads": params.n_heads, "slots": list(params.slots)},
        "arrays": index,
        "config": config.to_dict() if config is not None else None,
        "step": step,
        "seed": config.seed if config is not None else None,
        **(extra or {}),
    }
    bin_path, json_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    bin_path.write_bytes(b"".join(blob))
    header["blob_sha256"] = hashlib.sha256(bin_path.read_bytes()).hexdigest()
    json_path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return bin_path, json_path


def load_checkpoint(prefix) -> tuple[EncoderParams, dict]:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = prefix.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    arch = header["architecture"]
    params = EncoderParams(arrays, MelParams(**arch["mel"]), arch["hidden"], arch["dim"],
                           arch["n_heads"], tuple(arch["slots"]))
    return params, header


def write_loss_trace(path, trace: Sequence[float], config_digest: str | None = None) -> None:
    with open(path, "w") as fh:
        if config_digest:
            fh.write(f"# config_hash={config_digest}\n")
        fh.write("step,loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v!r}\n")
