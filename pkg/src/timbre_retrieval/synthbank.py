"""Procedural virtual-instrument bank.

Every patch is a small subtractive synthesizer (1-3 oscillators, biquad
filter, ADSR amplitude envelope) followed by an optional effect chain.
Rendering is a pure function of ``(patch, note, sample_rate, length)``:
all randomness (noise oscillators, reverb impulse responses) is drawn from
generators keyed on the patch seed and the note, so identical inputs give
bit-identical buffers.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from .errors import InvalidArgumentError

BANK_SCHEMA_VERSION = 1
DEFAULT_SAMPLE_RATE = 16000
AUGMENTED_ID_OFFSET = 1_000_000

WAVEFORMS = ("sine", "saw", "square", "triangle", "noise")
FILTER_TYPES = ("lowpass", "highpass", "none")


class Family(str, enum.Enum):
    BASS = "bass"
    PERCUSSION = "percussion"
    STRINGS = "strings"
    BRASS = "brass"
    SYNTH_LEAD = "synth_lead"
    SYNTH_PAD = "synth_pad"
    KEYBOARD = "keyboard"
    GUITAR = "guitar"
    FLUTE = "flute"
    REED = "reed"
    MALLET = "mallet"
    ORGAN = "organ"

    @property
    def index(self) -> int:
        return list(Family).index(self)


ALL_FAMILIES = tuple(Family)


@dataclass(frozen=True)
class Oscillator:
    waveform: str
    amplitude: float
    detune_cents: float = 0.0

    def __post_init__(self):
        if self.waveform not in WAVEFORMS:
            raise InvalidArgumentError(f"unknown waveform {self.waveform!r}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise InvalidArgumentError("oscillator amplitude must be in [0, 1]")


@dataclass(frozen=True)
class Envelope:
    attack: float
    decay: float
    sustain: float
    release: float

    def __post_init__(self):
        if min(self.attack, self.decay, self.release) < 0:
            raise InvalidArgumentError("envelope time constants must be >= 0")
        if not 0.0 <= self.sustain <= 1.0:
            raise InvalidArgumentError("sustain level must be in [0, 1]")


@dataclass(frozen=True)
class Filter:
    kind: str = "none"
    cutoff: float = 1000.0
    resonance: float = 0.0

    def __post_init__(self):
        if self.kind not in FILTER_TYPES:
            raise InvalidArgumentError(f"unknown filter type {self.kind!r}")
        if self.kind != "none" and self.cutoff <= 20.0:
            raise InvalidArgumentError("filter cutoff must exceed 20 Hz")
        if not 0.0 <= self.resonance <= 1.0:
            raise InvalidArgumentError("resonance must be in [0, 1]")


@dataclass(frozen=True)
class Reverb:
    decay: float
    wet: float
    kind = "reverb"

    def __post_init__(self):
        if self.decay <= 0 or not 0.0 <= self.wet <= 1.0:
            raise InvalidArgumentError("reverb needs decay > 0 and wet in [0, 1]")


@dataclass(frozen=True)
class Delay:
    time: float
    feedback: float
    wet: float
    kind = "delay"

    def __post_init__(self):
        if self.time <= 0:
            raise InvalidArgumentError("delay time must be > 0")
        if not 0.0 <= self.feedback < 1.0:
            raise InvalidArgumentError("delay feedback must be in [0, 1)")
        if not 0.0 <= self.wet <= 1.0:
            raise InvalidArgumentError("delay wet must be in [0, 1]")


@dataclass(frozen=True)
class Distortion:
    drive: float
    kind = "distortion"

    def __post_init__(self):
        if self.drive <= 0:
            raise InvalidArgumentError("distortion drive must be > 0")


@dataclass(frozen=True)
class Chorus:
    rate: float
    depth: float
    kind = "chorus"

    def __post_init__(self):
        if self.rate <= 0 or not 0.0 <= self.depth <= 1.0:
            raise InvalidArgumentError("chorus needs rate > 0 and depth in [0, 1]")


Effect = Reverb | Delay | Distortion | Chorus
_EFFECT_TYPES = {cls.kind: cls for cls in (Reverb, Delay, Distortion, Chorus)}


@dataclass(frozen=True)
class InstrumentPatch:
    id: int
    family: Family
    oscillators: tuple[Oscillator, ...]
    envelope: Envelope
    filter: Filter = Filter()
    effects: tuple[Effect, ...] = ()
    master_gain: float = 0.7
    seed: int = 0
    # id of the original patch when this one was produced by strip_effects
    augmented_from: int | None = None

    def __post_init__(self):
        if not self.oscillators:
            raise InvalidArgumentError("a patch needs at least one oscillator")
        if not 0.0 <= self.master_gain <= 1.0:
            raise InvalidArgumentError("master_gain must be in [0, 1]")
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "oscillators", tuple(self.oscillators))
        object.__setattr__(self, "effects", tuple(self.effects))

    @property
    def is_augmented(self) -> bool:
        return self.augmented_from is not None

    def synthesis_params(self) -> dict:
        """Everything that affects the sound, i.e. the patch minus its identity."""
        d = patch_to_dict(self)
        del d["id"], d["augmented_from"]
        return d


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    velocity: int
    onset: float = 0.0
    duration: float = 3.0

    def __post_init__(self):
        if not 0 <= int(self.pitch) <= 127:
            raise InvalidArgumentError(f"pitch {self.pitch} outside [0, 127]")
        if not 1 <= int(self.velocity) <= 127:
            raise InvalidArgumentError(f"velocity {self.velocity} outside [1, 127]")
        if self.onset < 0 or self.duration <= 0:
            raise InvalidArgumentError("note needs onset >= 0 and duration > 0")
        object.__setattr__(self, "pitch", int(self.pitch))
        object.__setattr__(self, "velocity", int(self.velocity))

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidArgumentError("AudioBuffer holds mono audio only")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


def n_samples(length: float, sample_rate: int) -> int:
    # round first so 4.0 * 16000 does not become 64001 through representation error
    return int(math.ceil(round(length * sample_rate, 6)))


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def velocity_gain(velocity: int) -> float:
    return (velocity / 127.0) ** 1.5


# ---------------------------------------------------------------------------
# rendering


def _keyed_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _oscillator_wave(osc: Oscillator, freq: float, t: np.ndarray, rng_keys) -> np.ndarray:
    if osc.waveform == "noise":
        return _keyed_rng(*rng_keys).uniform(-1.0, 1.0, len(t))
    f = freq * 2.0 ** (osc.detune_cents / 1200.0)
    phase = f * t
    frac = phase - np.floor(phase)
    if osc.waveform == "sine":
        return np.sin(2 * np.pi * phase)
    if osc.waveform == "saw":
        return 2.0 * frac - 1.0
    if osc.waveform == "square":
        return np.where(frac < 0.5, 1.0, -1.0)
    return 1.0 - 4.0 * np.abs(frac - 0.5)  # triangle


def _biquad(filt: Filter, sample_rate: int):
    nyquist = sample_rate / 2
    if not 20.0 < filt.cutoff < nyquist:
        raise InvalidArgumentError(f"cutoff {filt.cutoff} Hz outside (20, {nyquist}) Hz")
    q = 0.707 + 4.0 * filt.resonance
    w0 = 2 * np.pi * filt.cutoff / sample_rate
    alpha = np.sin(w0) / (2 * q)
    cw = np.cos(w0)
    if filt.kind == "lowpass":
        b = np.array([(1 - cw) / 2, 1 - cw, (1 - cw) / 2])
    else:
        b = np.array([(1 + cw) / 2, -(1 + cw), (1 + cw) / 2])
    a = np.array([1 + alpha, -2 * cw, 1 - alpha])
    return b / a[0], a / a[0]


def adsr_curve(env: Envelope, gate: float, t: np.ndarray) -> np.ndarray:
    """Piecewise-linear ADSR sampled at times ``t`` for a key held ``gate`` seconds."""

    def held(tt):
        out = np.full_like(tt, env.sustain)
        if env.attack > 0:
            a = tt < env.attack
            out[a] = tt[a] / env.attack
        else:
            a = np.zeros_like(tt, dtype=bool)
        if env.decay > 0:
            d = ~a & (tt < env.attack + env.decay)
            out[d] = 1.0 - (1.0 - env.sustain) * (tt[d] - env.attack) / env.decay
        return out

    out = held(t)
    release_level = held(np.array([gate]))[0]
    rel = t >= gate
    if env.release > 0:
        frac = (t[rel] - gate) / env.release
        out[rel] = np.where(frac < 1.0, release_level * (1.0 - frac), 0.0)
    else:
        out[rel] = 0.0
    return out


def _apply_effect(fx: Effect, x: np.ndarray, sample_rate: int, rng_keys) -> np.ndarray:
    n = len(x)
    if isinstance(fx, Reverb):
        ir_len = max(1, int(min(fx.decay, 3.0) * sample_rate))
        tt = np.arange(ir_len) / sample_rate
        ir = _keyed_rng(*rng_keys).standard_normal(ir_len) * np.exp(-6.9078 * tt / fx.decay)
        ir /= np.sqrt(np.sum(ir**2))
        wet = sps.fftconvolve(x, ir)[:n]
        return (1.0 - fx.wet) * x + fx.wet * wet
    if isinstance(fx, Delay):
        # feedback comb w[n] = x[n-d] + fb * w[n-d], evaluated one delay-length block at a time
        d = max(1, int(round(fx.time * sample_rate)))
        w = np.zeros(n)
        for start in range(d, n, d):
            stop = min(start + d, n)
            w[start:stop] = x[start - d:stop - d] + fx.feedback * w[start - d:stop - d]
        return x + fx.wet * w
    if isinstance(fx, Distortion):
        return np.tanh(fx.drive * x) / np.tanh(fx.drive)
    if isinstance(fx, Chorus):
        idx = np.arange(n, dtype=np.float64)
        lag = (0.012 + 0.004 * fx.depth * np.sin(2 * np.pi * fx.rate * idx / sample_rate)) * sample_rate
        return 0.5 * (x + np.interp(idx - lag, idx, x, left=0.0))
    raise InvalidArgumentError(f"unknown effect {fx!r}")


def tail_seconds(patch: InstrumentPatch) -> float:
    """Time after key release beyond which the note is treated as silent."""
    tail = patch.envelope.release + 0.05
    for fx in patch.effects:
        if isinstance(fx, Reverb):
            tail += min(fx.decay, 3.0)
        elif isinstance(fx, Delay):
            repeats = 1 if fx.feedback == 0 else math.ceil(math.log(1e-4) / math.log(fx.feedback))
            tail += fx.time * min(repeats + 1, 60)
        elif isinstance(fx, Chorus):
            tail += 0.02
    return tail


def _render_core(patch: InstrumentPatch, pitch: int, velocity: int, duration: float,
                 n: int, sample_rate: int) -> np.ndarray:
    """Render one note starting at sample 0 into ``n`` samples.

    Only the first ``duration + tail_seconds(patch)`` seconds are synthesized;
    the rest of the buffer stays zero.
    """
    if n <= 0:
        return np.zeros(0)
    full = n
    n = min(n, n_samples(duration + tail_seconds(patch), sample_rate))
    t = np.arange(n) / sample_rate
    freq = midi_to_hz(pitch)
    total_amp = sum(o.amplitude for o in patch.oscillators)
    if total_amp == 0.0:
        return np.zeros(full)
    mix = np.zeros(n)
    for i, osc in enumerate(patch.oscillators):
        if osc.amplitude > 0:
            mix += osc.amplitude * _oscillator_wave(osc, freq, t, (patch.seed, i, pitch, velocity))
    mix /= total_amp
    if patch.filter.kind != "none":
        b, a = _biquad(patch.filter, sample_rate)
        mix = sps.lfilter(b, a, mix)
    y = mix * adsr_curve(patch.envelope, duration, t) * velocity_gain(velocity)
    for j, fx in enumerate(patch.effects):
        y = _apply_effect(fx, y, sample_rate, (patch.seed, 1000 + j))
    y *= patch.master_gain
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y /= peak
    if full > n:
        y = np.concatenate([y, np.zeros(full - n)])
    return y


def render_note(patch: InstrumentPatch, note: NoteEvent, sample_rate: int = DEFAULT_SAMPLE_RATE,
                length: float = 4.0) -> AudioBuffer:
    """Render a single note into a buffer of ``ceil(length * sample_rate)`` samples."""
    if length + 1e-9 < note.onset + note.duration + patch.envelope.release:
        raise InvalidArgumentError(
            f"length {length} s too short for note ending at {note.end} s "
            f"plus {patch.envelope.release} s release")
    n = n_samples(length, sample_rate)
    start = int(round(note.onset * sample_rate))
    out = np.zeros(n)
    out[start:] = _render_core(patch, note.pitch, note.velocity, note.duration, n - start, sample_rate)
    return AudioBuffer(out, sample_rate)


def check_monophonic(notes: Sequence[NoteEvent], length: float | None = None) -> None:
    ordered = sorted(notes, key=lambda nt: nt.onset)
    for prev, nxt in zip(ordered, ordered[1:]):
        if prev.end > nxt.onset + 1e-9:
            raise InvalidArgumentError(
                f"overlapping notes at {prev.onset:.3f} s and {nxt.onset:.3f} s (no chords allowed)")
    if length is not None:
        for nt in ordered:
            if nt.end > length + 1e-9:
                raise InvalidArgumentError(f"note ending at {nt.end} s exceeds length {length} s")


def render_score(patch: InstrumentPatch, notes: Sequence[NoteEvent], length: float = 10.0,
                 sample_rate: int = DEFAULT_SAMPLE_RATE, normalize: bool = True) -> AudioBuffer:
    """Sum of per-note renders placed at their onsets.

    Release tails running past ``length`` are truncated. If the sum peaks above
    full scale it is rescaled to exactly 1 (disable with ``normalize=False``).
    """
    check_monophonic(notes, length)
    n = n_samples(length, sample_rate)
    out = np.zeros(n)
    for nt in notes:
        start = int(round(nt.onset * sample_rate))
        out[start:] += _render_core(patch, nt.pitch, nt.velocity, nt.duration, n - start, sample_rate)
    if normalize:
        peak = np.max(np.abs(out)) if n else 0.0
        if peak > 1.0:
            out /= peak
    return AudioBuffer(out, sample_rate)


def strip_effects(patch: InstrumentPatch, new_id: int | None = None) -> InstrumentPatch:
    """Copy of ``patch`` with the effect chain removed, under a new id.

    The default new id is ``patch.id + AUGMENTED_ID_OFFSET``; banks built by
    :func:`augment_bank` assign contiguous ids instead.
    """
    if new_id is None:
        new_id = patch.id + AUGMENTED_ID_OFFSET
    origin = patch.augmented_from if patch.augmented_from is not None else patch.id
    return dataclasses.replace(patch, id=new_id, effects=(), augmented_from=origin)


def augment_bank(bank: Sequence[InstrumentPatch], eligible: Iterable[int] | None = None) -> list[InstrumentPatch]:
    """Append an effect-stripped twin for every eligible patch that has effects."""
    allowed = None if eligible is None else set(eligible)
    out = list(bank)
    next_id = max(p.id for p in bank) + 1
    for p in bank:
        if p.effects and not p.is_augmented and (allowed is None or p.id in allowed):
            out.append(strip_effects(p, next_id))
            next_id += 1
    return out


# ---------------------------------------------------------------------------
# bank generation

# Per-family priors. Ranges are (low, high) for uniform draws; cutoffs are drawn
# log-uniformly. Release is capped at 0.8 s so notes fit short render windows.
_PRIORS = {
    Family.BASS: dict(waves=("saw", "square", "sine", "triangle"), n_osc=(1, 2), detune=8,
                      attack=(0.001, 0.03), decay=(0.05, 0.6), sustain=(0.3, 0.9), release=(0.03, 0.3),
                      filters=("lowpass",) * 9 + ("none",), cutoff=(120, 1500), fx=0.25, noise=0.0),
    Family.PERCUSSION: dict(waves=("sine", "triangle"), n_osc=(1, 2), detune=30,
                            attack=(0.0, 0.004), decay=(0.04, 0.5), sustain=(0.0, 0.05), release=(0.02, 0.25),
                            filters=("lowpass", "highpass", "none"), cutoff=(400, 7000), fx=0.3, noise=1.0),
    Family.STRINGS: dict(waves=("saw", "saw", "triangle"), n_osc=(2, 3), detune=12,
                         attack=(0.05, 0.4), decay=(0.1, 0.5), sustain=(0.6, 1.0), release=(0.15, 0.7),
                         filters=("lowpass",), cutoff=(1000, 6000), fx=0.4, noise=0.1),
    Family.BRASS: dict(waves=("saw", "square"), n_osc=(1, 2), detune=6,
                       attack=(0.02, 0.12), decay=(0.05, 0.3), sustain=(0.6, 0.95), release=(0.05, 0.3),
                       filters=("lowpass",), cutoff=(700, 4000), fx=0.3, noise=0.1),
    Family.SYNTH_LEAD: dict(waves=("saw", "square", "triangle", "sine"), n_osc=(1, 3), detune=25,
                            attack=(0.001, 0.06), decay=(0.05, 0.5), sustain=(0.4, 1.0), release=(0.03, 0.4),
                            filters=("lowpass", "lowpass", "highpass", "none"), cutoff=(900, 7000),
                            fx=0.45, noise=0.1),
    Family.SYNTH_PAD: dict(waves=("saw", "triangle", "square", "sine"), n_osc=(2, 3), detune=20,
                           attack=(0.15, 0.6), decay=(0.2, 0.8), sustain=(0.5, 1.0), release=(0.3, 0.8),
                           filters=("lowpass", "lowpass", "none"), cutoff=(500, 5000), fx=0.6, noise=0.15),
    Family.KEYBOARD: dict(waves=("triangle", "sine", "saw", "square"), n_osc=(1, 2), detune=5,
                          attack=(0.001, 0.01), decay=(0.3, 1.5), sustain=(0.0, 0.4), release=(0.1, 0.5),
                          filters=("lowpass", "none"), cutoff=(1500, 7000), fx=0.3, noise=0.0),
    Family.GUITAR: dict(waves=("saw", "triangle", "square"), n_osc=(1, 2), detune=6,
                        attack=(0.001, 0.01), decay=(0.2, 1.0), sustain=(0.0, 0.3), release=(0.05, 0.4),
                        filters=("lowpass",), cutoff=(800, 5000), fx=0.45, noise=0.05),
    Family.FLUTE: dict(waves=("sine", "triangle"), n_osc=(1, 2), detune=4,
                       attack=(0.03, 0.15), decay=(0.05, 0.3), sustain=(0.7, 1.0), release=(0.05, 0.3),
                       filters=("lowpass", "none"), cutoff=(2000, 7000), fx=0.3, noise=0.6),
    Family.REED: dict(waves=("square", "saw"), n_osc=(1, 2), detune=5,
                      attack=(0.02, 0.08), decay=(0.05, 0.3), sustain=(0.6, 0.95), release=(0.05, 0.3),
                      filters=("lowpass",), cutoff=(800, 4500), fx=0.3, noise=0.2),
    Family.MALLET: dict(waves=("sine", "triangle"), n_osc=(1, 3), detune=1200,
                        attack=(0.0, 0.005), decay=(0.1, 0.8), sustain=(0.0, 0.05), release=(0.05, 0.5),
                        filters=("none", "lowpass"), cutoff=(2000, 7000), fx=0.3, noise=0.0),
    Family.ORGAN: dict(waves=("sine", "square", "triangle"), n_osc=(2, 3), detune=None,
                       attack=(0.005, 0.04), decay=(0.0, 0.1), sustain=(0.85, 1.0), release=(0.02, 0.15),
                       filters=("none", "lowpass"), cutoff=(2000, 7000), fx=0.35, noise=0.0),
}

_ORGAN_DRAWBARS = (0.0, 1200.0, 1902.0, 2400.0, -1200.0)


def _draw_effects(rng: np.random.Generator, prob: float) -> tuple[Effect, ...]:
    chain: list[Effect] = []
    if rng.random() < prob:
        chain.append(Distortion(drive=float(rng.uniform(1.5, 8.0))))
    if rng.random() < prob:
        chain.append(Chorus(rate=float(rng.uniform(0.2, 3.0)), depth=float(rng.uniform(0.2, 1.0))))
    if rng.random() < prob:
        chain.append(Delay(time=float(rng.uniform(0.08, 0.4)), feedback=float(rng.uniform(0.1, 0.6)),
                           wet=float(rng.uniform(0.15, 0.5))))
    if rng.random() < prob:
        chain.append(Reverb(decay=float(rng.uniform(0.4, 2.5)), wet=float(rng.uniform(0.15, 0.6))))
    return tuple(chain)


def _draw_patch(pid: int, family: Family, rng: np.random.Generator) -> InstrumentPatch:
    pr = _PRIORS[family]

    def u(lo_hi):
        return float(rng.uniform(*lo_hi))

    n_osc = int(rng.integers(pr["n_osc"][0], pr["n_osc"][1] + 1))
    oscs = []
    for i in range(n_osc):
        wave_name = str(rng.choice(pr["waves"]))
        if pr["detune"] is None:
            detune = float(_ORGAN_DRAWBARS[int(rng.integers(len(_ORGAN_DRAWBARS)))]) if i else 0.0
        elif pr["detune"] >= 1200:
            detune = float(rng.choice([0.0, 1200.0, 1902.0, 2786.0])) if i else 0.0
        else:
            detune = float(rng.normal(0.0, pr["detune"])) if i else 0.0
        amp = 1.0 if i == 0 else u((0.2, 1.0))
        oscs.append(Oscillator(wave_name, amp, detune))
    if rng.random() < pr["noise"]:
        noise_amp = u((0.3, 1.0)) if family == Family.PERCUSSION else u((0.02, 0.25))
        oscs.append(Oscillator("noise", noise_amp, 0.0))
    env = Envelope(u(pr["attack"]), u(pr["decay"]), u(pr["sustain"]), u(pr["release"]))
    kind = str(rng.choice(pr["filters"]))
    lo, hi = pr["cutoff"]
    cutoff = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    filt = Filter(kind, cutoff, u((0.0, 0.8)))
    effects = _draw_effects(rng, pr["fx"])
    return InstrumentPatch(
        id=pid, family=family, oscillators=tuple(oscs), envelope=env, filter=filt,
        effects=effects, master_gain=u((0.5, 0.8)), seed=int(rng.integers(0, 2**31 - 1)))


def generate_bank(n_per_family: int, families: Iterable[Family | str], seed: int,
                  start_id: int = 0) -> list[InstrumentPatch]:
    """Draw ``n_per_family`` patches for each family, ids contiguous from ``start_id``.

    Families are emitted in their canonical order; each patch's parameters come
    from a generator keyed on ``(seed, family, index)`` so adding families does
    not perturb the patches of the others.
    """
    fams = sorted({Family(f) for f in families}, key=lambda f: f.index)
    if not fams:
        raise InvalidArgumentError("family set must not be empty")
    if n_per_family < 1:
        raise InvalidArgumentError("n_per_family must be >= 1")
    bank = []
    pid = start_id
    for fam in fams:
        for i in range(n_per_family):
            bank.append(_draw_patch(pid, fam, _keyed_rng(seed, fam.index, i)))
            pid += 1
    return bank


# ---------------------------------------------------------------------------
# persistence


def _effect_to_dict(fx: Effect) -> dict:
    return {"type": fx.kind, **dataclasses.asdict(fx)}


def patch_to_dict(p: InstrumentPatch) -> dict:
    return {
        "id": p.id,
        "family": p.family.value,
        "oscillators": [dataclasses.asdict(o) for o in p.oscillators],
        "envelope": dataclasses.asdict(p.envelope),
        "filter": dataclasses.asdict(p.filter),
        "effects": [_effect_to_dict(fx) for fx in p.effects],
        "master_gain": p.master_gain,
        "seed": p.seed,
        "augmented_from": p.augmented_from,
    }


def patch_from_dict(d: dict) -> InstrumentPatch:
    effects = []
    for e in d.get("effects", []):
        e = dict(e)
        effects.append(_EFFECT_TYPES[e.pop("type")](**e))
    return InstrumentPatch(
        id=int(d["id"]),
        family=Family(d["family"]),
        oscillators=tuple(Oscillator(**o) for o in d["oscillators"]),
        envelope=Envelope(**d["envelope"]),
        filter=Filter(**d["filter"]),
        effects=tuple(effects),
        master_gain=float(d["master_gain"]),
        seed=int(d["seed"]),
        augmented_from=d.get("augmented_from"),
    )


def save_bank(path, bank: Sequence[InstrumentPatch], **extra) -> None:
    doc = {"version": BANK_SCHEMA_VERSION, **extra, "patches": [patch_to_dict(p) for p in bank]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_bank_document(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != BANK_SCHEMA_VERSION:
        raise InvalidArgumentError(f"unsupported bank schema version {doc.get('version')!r}")
    doc["patches"] = [patch_from_dict(d) for d in doc["patches"]]
    return doc


def load_bank(path) -> list[InstrumentPatch]:
    return load_bank_document(path)["patches"]


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.round(np.clip(audio.samples, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(audio.sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioBuffer:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise InvalidArgumentError("only 16-bit PCM WAV is supported")
            rate, channels = w.getframerate(), w.getnchannels()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InvalidArgumentError(f"unreadable WAV {path}: {exc}") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(data, rate)
