"""Pooled-Mel MLP encoder with hand-written backpropagation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..dspfeatures import MelParams, MelSpectrogram
from ..errors import InvalidArgumentError

TRAINABLE = ("W1", "b1", "W2", "b2", "W3", "b3")


class _FallbackCounter:
    """Counts embeddings that hit the zero-norm fallback."""

    def __init__(self):
        self.count = 0


zero_norm_fallbacks = _FallbackCounter()


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]
    mel: MelParams = field(default_factory=MelParams)
    hidden: int = 256
    dim: int = 64
    n_heads: int = 1
    slots: tuple[str, ...] = ()

    @property
    def input_dim(self) -> int:
        return 2 * self.mel.n_mels

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: self.arrays[k] for k in TRAINABLE}

    def copy(self) -> "EncoderParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})


def MultiEncoderParams(base: EncoderParams, slots: Sequence[str]) -> EncoderParams:
    """Shared trunk with one projection head per family slot.

    The heads are stored stacked in ``W3``/``b3`` (``len(slots) * dim`` rows).
    """
    return replace(base, n_heads=len(slots), slots=tuple(slots))


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_params(rng: np.random.Generator, mel: MelParams = MelParams(), hidden: int = 256, dim: int = 64,
                in_mean: np.ndarray | None = None, in_std: np.ndarray | None = None,
                n_heads: int = 1, slots: Sequence[str] = ()) -> EncoderParams:
    """Glorot-initialized weights; ``in_mean``/``in_std`` standardize the pooled input and stay frozen."""
    d_in = 2 * mel.n_mels
    arrays = {
        "in_mean": np.zeros(d_in) if in_mean is None else np.asarray(in_mean, dtype=np.float64).copy(),
        "in_std": np.ones(d_in) if in_std is None else np.asarray(in_std, dtype=np.float64).copy(),
        "W1": _glorot(rng, hidden, d_in),
        "b1": np.zeros(hidden),
        "W2": _glorot(rng, hidden, hidden),
        "b2": np.zeros(hidden),
        "W3": _glorot(rng, dim * n_heads, hidden),
        "b3": np.zeros(dim * n_heads),
    }
    return EncoderParams(arrays, mel, hidden, dim, n_heads, tuple(slots))


def pool_mel(mel: MelSpectrogram | np.ndarray) -> np.ndarray:
    """Temporal mean and max of each mel band, concatenated."""
    data = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    return np.concatenate([data.mean(axis=0), data.max(axis=0)])


def forward(params: EncoderParams, X: np.ndarray):
    """Pooled inputs (n, 2*n_mels) -> pre-normalization projections (n, heads*dim)."""
    p = params.arrays
    X = np.atleast_2d(X)
    if X.shape[1] != params.input_dim:
        raise InvalidArgumentError(f"expected pooled input of width {params.input_dim}, got {X.shape[1]}")
    x = (X - p["in_mean"]) / p["in_std"]
    h1 = np.tanh(x @ p["W1"].T + p["b1"])
    h2 = np.tanh(h1 @ p["W2"].T + p["b2"])
    z = h2 @ p["W3"].T + p["b3"]
    return z, (x, h1, h2)


def backward(params: EncoderParams, cache, dz: np.ndarray) -> dict[str, np.ndarray]:
    p = params.arrays
    x, h1, h2 = cache
    grads = {"W3": dz.T @ h2, "b3": dz.sum(axis=0)}
    da2 = (dz @ p["W3"]) * (1.0 - h2**2)
    grads["W2"] = da2.T @ h1
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ p["W2"]) * (1.0 - h1**2)
    grads["W1"] = da1.T @ x
    grads["b1"] = da1.sum(axis=0)
    return grads


def l2_normalize(z: np.ndarray):
    """Row-wise unit vectors; all-zero rows fall back to the first basis vector."""
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0.0
    e = z / np.where(norms == 0.0, 1.0, norms)
    if zero.any():
        zero_norm_fallbacks.count += int(zero.sum())
        e[zero] = 0.0
        e[zero, 0] = 1.0
    return e, norms


def l2_normalize_backward(e: np.ndarray, norms: np.ndarray, de: np.ndarray) -> np.ndarray:
    safe = np.where(norms == 0.0, np.inf, norms)
    return (de - e * np.sum(e * de, axis=-1, keepdims=True)) / safe


def embed_features(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Unit embeddings for pooled features: (n, dim), or (n, heads, dim) for multi-head params."""
    z, _ = forward(params, X)
    if params.n_heads > 1:
        z = z.reshape(len(z), params.n_heads, params.dim)
    e, _ = l2_normalize(z)
    return e


def encode(params: EncoderParams, mel: MelSpectrogram) -> np.ndarray:
    if mel.params != params.mel:
        raise InvalidArgumentError("mel parameters differ from the encoder's training configuration")
    if mel.data.ndim != 2 or mel.data.shape[1] != params.mel.n_mels:
        raise InvalidArgumentError(f"mel spectrogram shape {mel.data.shape} incompatible with encoder")
    return embed_features(params, pool_mel(mel)[None])[0]
