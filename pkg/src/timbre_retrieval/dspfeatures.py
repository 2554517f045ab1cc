"""Log-Mel spectrograms and the handcrafted timbre-descriptor baseline."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, SilentAudioError
from .synthbank import AudioBuffer

SILENCE_RMS = 1e-4


@dataclass(frozen=True)
class MelParams:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 64
    fmin: float = 30.0
    fmax: float = 7600.0
    log_floor: float = math.log(1e-5)


@dataclass
class MelSpectrogram:
    data: np.ndarray  # frames x n_mels
    params: MelParams

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def mel_center_frequencies(params: MelParams) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2))
    return edges[1:-1]


_FB_CACHE: dict[MelParams, np.ndarray] = {}


def mel_filterbank(params: MelParams) -> np.ndarray:
    """Triangular filters (peak 1) with HTK mel spacing, shape n_mels x (n_fft//2 + 1)."""
    fb = _FB_CACHE.get(params)
    if fb is not None:
        return fb
    edges = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2))
    freqs = np.arange(params.n_fft // 2 + 1) * params.sample_rate / params.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    _FB_CACHE[params] = fb
    return fb


def stft_magnitude(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """|STFT| with a Hann window and no edge padding, frames x (n_fft//2 + 1)."""
    if len(x) < n_fft:
        raise InvalidArgumentError(f"audio of {len(x)} samples shorter than n_fft={n_fft}")
    frames = sliding_window_view(x, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * hann(n_fft), axis=1))


def mel_spectrogram(audio: AudioBuffer, params: MelParams = MelParams()) -> MelSpectrogram:
    if audio.sample_rate != params.sample_rate:
        raise InvalidArgumentError(
            f"audio at {audio.sample_rate} Hz, feature params expect {params.sample_rate} Hz")
    mag = stft_magnitude(audio.samples, params.n_fft, params.hop)
    mel = mag @ mel_filterbank(params).T
    floor = math.exp(params.log_floor)
    # clamp in the log domain so silence maps to the floor exactly
    with np.errstate(divide="ignore"):
        data = np.maximum(np.log(np.maximum(mel, 0.0)), params.log_floor)
    data[mel < floor] = params.log_floor
    return MelSpectrogram(data, params)


def dump_spectrogram(path, spec: MelSpectrogram) -> None:
    """Write ``<path>.f32`` (little-endian float32, row-major) and ``<path>.json``."""
    path = Path(path)
    spec.data.astype("<f4").tofile(path.with_suffix(".f32"))
    header = {"shape": list(spec.data.shape), "dtype": "float32", "order": "C", "params": asdict(spec.params)}
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))


def load_spectrogram(path) -> MelSpectrogram:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".f32"), dtype="<f4").reshape(header["shape"])
    return MelSpectrogram(data.astype(np.float64), MelParams(**header["params"]))


# ---------------------------------------------------------------------------
# timbre descriptors

DESCRIPTOR_NAMES = (
    "spectral_centroid",
    "spectral_spread",
    "spectral_skewness",
    "spectral_kurtosis",
    "spectral_flatness",
    "spectral_crest",
    "spectral_rolloff_85",
    "spectral_flux",
    "zero_crossing_rate",
    "log_attack_time",
    "temporal_centroid",
    "spectral_decrease",
)

# frames more than this far below the loudest frame (energy) are left out of the medians
_ACTIVE_FRAME_DB = -30.0
# spectrum floor relative to each frame's peak bin, so a 16-bit noise floor does not move the statistics
_BIN_FLOOR_DB = -60.0


def _energy_envelope(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    frames = sliding_window_view(x, n_fft)[::hop]
    return np.sqrt(np.mean(frames**2, axis=1))


def timbre_descriptors(audio: AudioBuffer, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Twelve pitch- and loudness-free descriptors, ordered as ``DESCRIPTOR_NAMES``.

    Spectral descriptors are medians over active frames of statistics of the
    per-frame amplitude spectrum, floored 60 dB below its peak bin and normalized
    to unit sum, so the whole vector is invariant to the overall gain of ``audio``.
    """
    x = audio.samples
    if audio.rms() < SILENCE_RMS:
        raise SilentAudioError(f"input is silent (rms {audio.rms():.2e})")
    sr = audio.sample_rate
    mag = stft_magnitude(x, n_fft, hop)
    freqs = np.arange(mag.shape[1]) * sr / n_fft

    energy = np.sum(mag**2, axis=1)
    active = energy > energy.max() * 10 ** (_ACTIVE_FRAME_DB / 10)
    floored = np.maximum(mag, mag.max(axis=1, keepdims=True) * 10 ** (_BIN_FLOOR_DB / 20))
    frame_sum = floored.sum(axis=1)
    all_a = floored / np.where(frame_sum > 0, frame_sum, 1.0)[:, None]
    a = all_a[active]

    centroid = a @ freqs
    dev = freqs[None, :] - centroid[:, None]
    spread = np.sqrt(np.sum(a * dev**2, axis=1))
    safe_spread = np.where(spread > 0, spread, 1.0)
    skew = np.sum(a * dev**3, axis=1) / safe_spread**3
    kurt = np.sum(a * dev**4, axis=1) / safe_spread**4

    power = a**2 + 1e-30
    flatness = np.exp(np.mean(np.log(power), axis=1)) / np.mean(power, axis=1)
    crest = a.max(axis=1) / a.mean(axis=1)
    rolloff = freqs[np.argmax(np.cumsum(a, axis=1) >= 0.85, axis=1)]

    flux_all = np.sqrt(np.sum(np.diff(all_a, axis=0) ** 2, axis=1))
    flux_mask = active[1:] & active[:-1]
    flux = float(np.median(flux_all[flux_mask])) if flux_mask.any() else 0.0

    k = np.arange(1, a.shape[1])
    above = a[:, 1:].sum(axis=1)
    decrease = np.sum((a[:, 1:] - a[:, :1]) / k, axis=1) / np.where(above > 0, above, 1.0)

    signs = np.signbit(x[np.abs(x) > 0])
    zcr = float(np.count_nonzero(signs[1:] != signs[:-1]) / len(x) * sr)

    env = _energy_envelope(x, n_fft, hop)
    env = env / env.max()
    peak = int(np.argmax(env))
    start = int(np.argmax(env >= 0.1))
    stop = start + int(np.argmax(env[start:peak + 1] >= 0.9))
    hop_s = hop / sr
    # attack resolution is one hop; an instantaneous attack clamps to it
    log_attack = math.log10(max((stop - start) * hop_s, hop_s))
    times = (np.arange(len(env)) * hop + n_fft / 2) / sr
    temporal_centroid = float(np.sum(times * env) / np.sum(env))

    vec = np.array([
        np.median(centroid),
        np.median(spread),
        np.median(skew),
        np.median(kurt),
        np.median(flatness),
        np.median(crest),
        np.median(rolloff),
        flux,
        zcr,
        log_attack,
        temporal_centroid,
        np.median(decrease),
    ], dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise InvalidArgumentError("non-finite descriptor")
    return vec


@dataclass
class DescriptorNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) / self.std


def fit_descriptor_normalizer(vectors: Sequence[np.ndarray]) -> DescriptorNormalizer:
    """Per-dimension mean and (population) standard deviation."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidArgumentError("need at least two descriptor vectors")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # a constant column can still show rounding-level spread
    flat = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    if flat.any():
        warnings.warn(f"zero-variance descriptor dimensions {np.flatnonzero(flat).tolist()}; using std 1")
        std = np.where(flat, 1.0, std)
    return DescriptorNormalizer(mean, std)
