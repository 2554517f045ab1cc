"""Sampling of notes, scores, positive pairs, contrastive batches and mixtures."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgumentError, SilentAudioError
from .synthbank import (
    AudioBuffer,
    Family,
    InstrumentPatch,
    NoteEvent,
    check_monophonic,
    patch_to_dict,
    render_note,
    render_score,
)

SILENCE_RMS = 1e-4
MIX_PEAK_TARGET = 0.9


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, batch index, item index, ...)."""
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in keys])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# note distributions

# family -> (pitch mean, pitch std, pitch lo, pitch hi, velocity mean, velocity std)
FAMILY_NOTE_PARAMS: dict[Family, tuple[float, float, int, int, float, float]] = {
    Family.BASS: (38.0, 5.0, 24, 55, 90.0, 18.0),
    Family.PERCUSSION: (48.0, 8.0, 30, 72, 95.0, 20.0),
    Family.STRINGS: (62.0, 9.0, 40, 88, 80.0, 18.0),
    Family.BRASS: (60.0, 7.0, 42, 80, 90.0, 16.0),
    Family.SYNTH_LEAD: (70.0, 7.0, 52, 92, 95.0, 15.0),
    Family.SYNTH_PAD: (60.0, 8.0, 40, 84, 80.0, 15.0),
    Family.KEYBOARD: (62.0, 10.0, 36, 90, 85.0, 20.0),
    Family.GUITAR: (55.0, 8.0, 40, 80, 88.0, 18.0),
    Family.FLUTE: (76.0, 6.0, 60, 96, 80.0, 15.0),
    Family.REED: (62.0, 8.0, 46, 84, 85.0, 16.0),
    Family.MALLET: (72.0, 8.0, 55, 96, 90.0, 18.0),
    Family.ORGAN: (60.0, 9.0, 36, 84, 90.0, 12.0),
}


@dataclass(frozen=True)
class FamilyNoteDistribution:
    family: Family
    pitch_hist: np.ndarray  # length 128, indexed by MIDI pitch
    velocity_hist: np.ndarray  # length 128, index 0 always zero

    def __post_init__(self):
        for name, h in (("pitch", self.pitch_hist), ("velocity", self.velocity_hist)):
            if h.shape != (128,) or np.any(h < 0) or abs(h.sum() - 1.0) > 1e-9:
                raise InvalidArgumentError(f"{name} histogram must be a probability vector of length 128")
        if self.velocity_hist[0] != 0:
            raise InvalidArgumentError("velocity 0 must have zero mass")

    def sample_pitch(self, rng: np.random.Generator) -> int:
        return int(rng.choice(128, p=self.pitch_hist))

    def sample_velocity(self, rng: np.random.Generator) -> int:
        return int(rng.choice(128, p=self.velocity_hist))


def _truncated_normal_hist(mean: float, std: float, lo: int, hi: int) -> np.ndarray:
    k = np.arange(128)
    mass = ndtr((k + 0.5 - mean) / std) - ndtr((k - 0.5 - mean) / std)
    mass[(k < lo) | (k > hi)] = 0.0
    return mass / mass.sum()


def family_distribution(family: Family | str,
                        params: Mapping[Family, tuple] | None = None) -> FamilyNoteDistribution:
    family = Family(family)
    pm, ps, lo, hi, vm, vs = (params or FAMILY_NOTE_PARAMS)[family]
    return FamilyNoteDistribution(
        family,
        _truncated_normal_hist(pm, ps, lo, hi),
        _truncated_normal_hist(vm, vs, 1, 127),
    )


def all_distributions(families: Iterable[Family | str] | None = None, params=None) -> dict[Family, FamilyNoteDistribution]:
    fams = list(Family) if families is None else [Family(f) for f in families]
    return {f: family_distribution(f, params) for f in fams}


def _hist_median(h: np.ndarray) -> int:
    # smallest value whose cumulative mass reaches one half
    return int(np.searchsorted(np.cumsum(h), 0.5))


def median_note(dist: FamilyNoteDistribution, duration: float = 3.0) -> NoteEvent:
    return NoteEvent(_hist_median(dist.pitch_hist), _hist_median(dist.velocity_hist), 0.0, duration)


# ---------------------------------------------------------------------------
# sound specifications


@dataclass(frozen=True)
class SoundSettings:
    """Lengths and densities used when drawing sounds for one instrument."""

    note_length: float = 4.0
    note_duration: float = 3.0
    score_length: float = 10.0
    density: float = 0.8
    min_note: float = 0.15
    max_note: float = 1.0
    p_score: float = 0.5
    # tail kept free at the end of a score so the last release is not cut short
    score_tail: float = 0.8


@dataclass(frozen=True)
class SoundSpec:
    instrument_id: int
    kind: str
    notes: tuple[NoteEvent, ...]
    length: float

    def __post_init__(self):
        if self.kind not in ("single_note", "score"):
            raise InvalidArgumentError(f"unknown sound kind {self.kind!r}")
        object.__setattr__(self, "notes", tuple(self.notes))
        if self.kind == "single_note" and (len(self.notes) != 1 or self.notes[0].onset != 0):
            raise InvalidArgumentError("single_note sounds hold exactly one note at onset 0")
        check_monophonic(self.notes, self.length)

    @property
    def instruments(self) -> tuple[int, ...]:
        return (self.instrument_id,)


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[tuple[int, SoundSpec], ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple((int(i), s) for i, s in self.components))
        ids = [i for i, _ in self.components]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("mixture components must use distinct instruments")
        if len({s.length for _, s in self.components}) > 1:
            raise InvalidArgumentError("mixture stems must share one length")

    @property
    def instruments(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.components)

    @property
    def length(self) -> float:
        return self.components[0][1].length


@dataclass
class BatchSpec:
    items: list
    roles: list[str]

    def __post_init__(self):
        if len(self.items) != len(self.roles):
            raise InvalidArgumentError("one role per batch item")

    def __len__(self):
        return len(self.items)

    @property
    def is_mixture(self) -> np.ndarray:
        return np.array([isinstance(it, MixtureSpec) for it in self.items])

    def instrument_multiset(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for it in self.items:
            for i in it.instruments:
                counts[i] = counts.get(i, 0) + 1
        return counts


def draw_single_note(instrument_id: int, dist: FamilyNoteDistribution, rng: np.random.Generator,
                     settings: SoundSettings = SoundSettings()) -> SoundSpec:
    note = NoteEvent(dist.sample_pitch(rng), dist.sample_velocity(rng), 0.0, settings.note_duration)
    return SoundSpec(instrument_id, "single_note", (note,), settings.note_length)


def generate_score(dist: FamilyNoteDistribution, length: float, density: float, rng: np.random.Generator,
                   instrument_id: int = -1, settings: SoundSettings = SoundSettings()) -> SoundSpec:
    """Monophonic note sequence separated by exponential silences.

    The note count is Poisson(density * length), redrawn while zero. Note
    durations are uniform in ``[min_note, max_note]`` and shrunk together if
    they would not fit; the remaining time is split into exponential gaps.
    """
    if density <= 0:
        raise InvalidArgumentError("density must be > 0")
    span = max(length - settings.score_tail, 0.5 * length)
    n = 0
    while n == 0:
        n = int(rng.poisson(density * length))
    durations = rng.uniform(settings.min_note, settings.max_note, n)
    budget = 0.85 * span
    if durations.sum() > budget:
        durations *= budget / durations.sum()
    gaps = rng.exponential(1.0, n + 1)
    gaps *= (span - durations.sum()) / gaps.sum()
    notes = []
    t = 0.0
    for i in range(n):
        t += gaps[i]
        notes.append(NoteEvent(dist.sample_pitch(rng), dist.sample_velocity(rng), float(t), float(durations[i])))
        t += durations[i]
    return SoundSpec(instrument_id, "score", tuple(notes), float(length))


def draw_sound(patch: InstrumentPatch, dist: FamilyNoteDistribution, rng: np.random.Generator,
               settings: SoundSettings = SoundSettings()) -> SoundSpec:
    if rng.random() < settings.p_score:
        return generate_score(dist, settings.score_length, settings.density, rng, patch.id, settings)
    return draw_single_note(patch.id, dist, rng, settings)


def draw_positive_pair(patch: InstrumentPatch, dist: FamilyNoteDistribution, rng: np.random.Generator,
                       settings: SoundSettings = SoundSettings()) -> tuple[SoundSpec, SoundSpec]:
    return draw_sound(patch, dist, rng, settings), draw_sound(patch, dist, rng, settings)


def _pick_pair(pool: Sequence[SoundSpec], rng: np.random.Generator) -> tuple[SoundSpec, SoundSpec]:
    if len(pool) < 2:
        raise InvalidArgumentError("a sound pool needs at least two sounds per instrument")
    i, j = rng.choice(len(pool), size=2, replace=False)
    return pool[int(i)], pool[int(j)]


def build_single_source_batch(bank: Sequence[InstrumentPatch], dists: Mapping[Family, FamilyNoteDistribution],
                              N: int, rng: np.random.Generator, settings: SoundSettings = SoundSettings(),
                              pool: Mapping[int, Sequence[SoundSpec]] | None = None,
                              forbid_augmented_twins: bool = False) -> BatchSpec:
    """N/2 distinct instruments, each contributing a positive pair.

    With ``pool`` the two sounds are picked (distinct) from the instrument's
    pre-rendered files; otherwise they are drawn fresh.
    """
    if N < 2 or N % 2:
        raise InvalidArgumentError("batch size N must be a positive even integer")
    half = N // 2
    if len(bank) < half:
        raise InvalidArgumentError(f"bank of {len(bank)} instruments too small for N={N}")
    order = rng.permutation(len(bank))
    chosen: list[InstrumentPatch] = []
    roots: set[int] = set()
    for idx in order:
        p = bank[int(idx)]
        root = p.augmented_from if p.augmented_from is not None else p.id
        if forbid_augmented_twins and root in roots:
            continue
        chosen.append(p)
        roots.add(root)
        if len(chosen) == half:
            break
    if len(chosen) < half:
        raise InvalidArgumentError("not enough unrelated instruments for the batch")
    items, roles = [], []
    for p in chosen:
        if pool is not None:
            a, b = _pick_pair(pool[p.id], rng)
        else:
            a, b = draw_positive_pair(p, dists[p.family], rng, settings)
        items += [a, b]
        roles += ["anchor", "positive"]
    return BatchSpec(items, roles)


def build_mixture_batch(bank: Sequence[InstrumentPatch], dists: Mapping[Family, FamilyNoteDistribution],
                        n_mixtures: int, family_slots: Sequence[Family | str], rng: np.random.Generator,
                        settings: SoundSettings = SoundSettings(), mixture_length: float | None = None,
                        stem_pool: Mapping[int, Sequence[SoundSpec]] | None = None,
                        single_pool: Mapping[int, Sequence[SoundSpec]] | None = None,
                        is_silent: Callable[[SoundSpec], bool] | None = None,
                        max_redraws: int = 20) -> BatchSpec:
    """``n_mixtures`` mixtures followed by one single-note positive per constituent.

    Instruments are drawn without replacement per family, so no instrument
    appears in two mixtures. ``is_silent`` lets the caller re-draw stems that
    would fail the non-silence check.
    """
    slots = [Family(f) for f in family_slots]
    length = settings.score_length if mixture_length is None else mixture_length
    need: dict[Family, int] = {}
    for f in slots:
        need[f] = need.get(f, 0) + n_mixtures
    picks: dict[Family, list[InstrumentPatch]] = {}
    for f, k in need.items():
        members = [p for p in bank if p.family == f]
        if len(members) < k:
            raise InvalidArgumentError(f"need {k} {f.value} instruments, bank has {len(members)}")
        picks[f] = [members[int(i)] for i in rng.choice(len(members), size=k, replace=False)]
    cursor = {f: 0 for f in need}
    mixtures = []
    for _ in range(n_mixtures):
        comps = []
        for f in slots:
            p = picks[f][cursor[f]]
            cursor[f] += 1
            for _attempt in range(max_redraws):
                if stem_pool is not None:
                    pool = stem_pool[p.id]
                    stem = pool[int(rng.integers(len(pool)))]
                else:
                    stem = generate_score(dists[f], length, settings.density, rng, p.id, settings)
                if is_silent is None or not is_silent(stem):
                    break
            else:
                raise SilentAudioError(f"instrument {p.id} produced only silent stems", p.id)
            comps.append((p.id, stem))
        mixtures.append(MixtureSpec(tuple(comps)))
    items: list = list(mixtures)
    roles = ["mixture"] * n_mixtures
    by_id = {p.id: p for p in bank}
    for mix in mixtures:
        for iid in mix.instruments:
            p = by_id[iid]
            notes = [s for s in single_pool[iid] if s.kind == "single_note"] if single_pool is not None else []
            if notes:
                items.append(notes[int(rng.integers(len(notes)))])
            else:
                items.append(draw_single_note(iid, dists[p.family], rng, settings))
            roles.append("constituent")
    return BatchSpec(items, roles)


# ---------------------------------------------------------------------------
# audio


def render_sound(patch: InstrumentPatch, spec: SoundSpec, sample_rate: int) -> AudioBuffer:
    if spec.kind == "single_note":
        note = spec.notes[0]
        # releases longer than the window are truncated rather than rejected
        if spec.length >= note.end + patch.envelope.release:
            return render_note(patch, note, sample_rate, spec.length)
    return render_score(patch, spec.notes, spec.length, sample_rate)


def mix_stems(stems: Sequence[AudioBuffer], silence_rms: float = SILENCE_RMS) -> AudioBuffer:
    """Sample-wise sum, peak-normalized to 0.9 when the sum exceeds full scale."""
    if not stems:
        raise InvalidArgumentError("need at least one stem")
    sr, n = stems[0].sample_rate, len(stems[0])
    for i, s in enumerate(stems):
        if s.sample_rate != sr or len(s) != n:
            raise InvalidArgumentError("stems must share length and sample rate")
        if s.rms() < silence_rms:
            raise SilentAudioError(f"stem {i} is silent (rms {s.rms():.2e})")
    out = np.sum([s.samples for s in stems], axis=0)
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out * (MIX_PEAK_TARGET / peak)
    return AudioBuffer(out, sr)


def render_mixture(mix: MixtureSpec, patches: Mapping[int, InstrumentPatch], sample_rate: int) -> AudioBuffer:
    return mix_stems([render_sound(patches[i], s, sample_rate) for i, s in mix.components])


# ---------------------------------------------------------------------------
# manifests


def _note_dict(n: NoteEvent) -> dict:
    return {"pitch": n.pitch, "velocity": n.velocity, "onset": n.onset, "duration": n.duration}


def spec_to_dict(spec: SoundSpec | MixtureSpec) -> dict:
    if isinstance(spec, MixtureSpec):
        return {"type": "mixture", "components": [spec_to_dict(s) for _, s in spec.components]}
    return {"type": "sound", "instrument_id": spec.instrument_id, "kind": spec.kind,
            "length": spec.length, "notes": [_note_dict(n) for n in spec.notes]}


def spec_from_dict(d: dict) -> SoundSpec | MixtureSpec:
    if d["type"] == "mixture":
        stems = [spec_from_dict(c) for c in d["components"]]
        return MixtureSpec(tuple((s.instrument_id, s) for s in stems))
    return SoundSpec(int(d["instrument_id"]), d["kind"], tuple(NoteEvent(**n) for n in d["notes"]),
                     float(d["length"]))


def write_manifest(path, specs: Iterable[SoundSpec | MixtureSpec], extra: Iterable[dict] | None = None) -> None:
    extras = list(extra) if extra is not None else None
    with open(path, "w") as fh:
        for i, s in enumerate(specs):
            row = spec_to_dict(s)
            if extras is not None:
                row.update(extras[i])
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    """Rows of a JSON Lines manifest, with the parsed spec under ``"spec"``."""
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            row["spec"] = spec_from_dict(row)
            rows.append(row)
    return rows


def content_key(spec: SoundSpec | MixtureSpec, patches: Mapping[int, InstrumentPatch], sample_rate: int) -> str:
    ids = spec.instruments
    payload = {"spec": spec_to_dict(spec), "sr": sample_rate,
               "patches": [patch_to_dict(patches[i]) for i in ids]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def content_path(root, key: str) -> Path:
    return Path(root) / key[:2] / f"{key}.wav"
