"""Embedding database, exact cosine query-by-example, and top-k evaluation."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .datasetgen import FamilyNoteDistribution, median_note
from .errors import InvalidArgumentError, SilentAudioError
from .synthbank import AudioBuffer, Family, InstrumentPatch, render_note, render_score

DB_SCHEMA_VERSION = 1


@dataclass
class EmbeddingDatabase:
    ids: np.ndarray
    families: list[Family]
    vectors: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.families = [Family(f) for f in self.families]
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(set(self.ids.tolist())) != len(self.ids):
            raise InvalidArgumentError("database holds one entry per instrument")
        if not (len(self.ids) == len(self.families) == len(self.vectors)):
            raise InvalidArgumentError("ids, families and vectors must align")

    def __len__(self):
        return len(self.ids)

    def mask(self, family: Family | str | None = None) -> np.ndarray:
        if family is None:
            return np.ones(len(self), dtype=bool)
        fam = Family(family)
        return np.array([f == fam for f in self.families], dtype=bool)

    def index_of(self, instrument_id: int) -> int:
        hits = np.flatnonzero(self.ids == instrument_id)
        if len(hits) == 0:
            raise InvalidArgumentError(f"instrument {instrument_id} not in database")
        return int(hits[0])

    def family_of(self, instrument_id: int) -> Family:
        return self.families[self.index_of(instrument_id)]


@dataclass
class QueryResult:
    ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.ids)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]


@dataclass
class EvalReport:
    accuracy: dict[int, float]
    per_family: dict[str, dict[int, float]]
    n_queries: int
    config: dict = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.accuracy[1]

    @property
    def top5(self) -> float:
        return self.accuracy[5]


def cosine_distances(vectors: np.ndarray, queries: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Cosine distances of unit vectors, shape (queries, vectors).

    A BLAS matrix product may round identical rows differently, which would
    break exact ties; a row-wise product-and-sum depends only on row content.
    """
    Q = np.atleast_2d(queries)
    out = np.empty((len(Q), len(vectors)))
    for s in range(0, len(Q), chunk):
        out[s:s + chunk] = np.sum(Q[s:s + chunk, None, :] * vectors[None, :, :], axis=2)
    return np.clip(1.0 - out, 0.0, 2.0)


def build_database(bank: Sequence[InstrumentPatch], dists: Mapping[Family, FamilyNoteDistribution],
                   embed: Callable[[AudioBuffer], np.ndarray], sample_rate: int = 16000,
                   note_length: float = 4.0, note_duration: float = 3.0,
                   provenance: Mapping | None = None) -> EmbeddingDatabase:
    """One embedding per non-augmented instrument, from its family's median note."""
    ids, fams, vecs = [], [], []
    for p in sorted(bank, key=lambda q: q.id):
        if p.is_augmented:
            continue
        note = median_note(dists[p.family], note_duration)
        if note_length >= note.end + p.envelope.release:
            audio = render_note(p, note, sample_rate, note_length)
        else:
            audio = render_score(p, [note], note_length, sample_rate)
        if audio.rms() < 1e-4:
            raise SilentAudioError(f"instrument {p.id} renders a silent median note", p.id)
        ids.append(p.id)
        fams.append(p.family)
        vecs.append(np.asarray(embed(audio), dtype=np.float64))
    if not ids:
        raise InvalidArgumentError("bank has no non-augmented instrument")
    prov = {"policy": "family_median_note", "note_length": note_length, "note_duration": note_duration}
    prov.update(provenance or {})
    return EmbeddingDatabase(np.array(ids), fams, np.stack(vecs), prov)


def query(db: EmbeddingDatabase, q: np.ndarray, k: int = 5, family_filter: Family | str | None = None) -> QueryResult:
    """Exact k nearest entries by cosine distance; ties go to the smaller instrument id."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    m = db.mask(family_filter)
    if not m.any():
        raise InvalidArgumentError(f"no database entry for family {family_filter!r}")
    ids = db.ids[m]
    d = cosine_distances(db.vectors[m], np.asarray(q, dtype=np.float64))[0]
    order = np.lexsort((ids, d))[:k]
    return QueryResult(ids[order], d[order])


def true_ranks(db: EmbeddingDatabase, Q: np.ndarray, true_ids: Sequence[int],
               family_filter: Sequence | None = None) -> np.ndarray:
    """0-based rank of each query's true instrument under the deterministic ordering."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    D = cosine_distances(db.vectors, Q)
    true_ids = np.asarray(true_ids, dtype=np.int64)
    pos = np.array([db.index_of(int(i)) for i in true_ids])
    d_true = D[np.arange(len(Q)), pos]
    ahead = (D < d_true[:, None]) | ((D == d_true[:, None]) & (db.ids[None, :] < true_ids[:, None]))
    if family_filter is not None:
        allowed = np.stack([db.mask(f) for f in family_filter])
        ahead &= allowed
    return ahead.sum(axis=1)


def _accuracies(ranks: np.ndarray, ks: Iterable[int]) -> dict[int, float]:
    return {k: float(np.mean(ranks < k)) for k in ks}


def _embed_all(embed, items) -> np.ndarray:
    return np.stack([np.asarray(it if embed is None else embed(it), dtype=np.float64) for it in items])


def evaluate_single_source(db: EmbeddingDatabase, embed: Callable | None, test_sounds: Sequence[tuple],
                           ks: Sequence[int] = (1, 5), config: Mapping | None = None) -> EvalReport:
    """Top-k accuracy over the full database for ``(sound, true_id)`` queries.

    ``embed`` maps a sound (whatever the caller stores: spec, audio) to a unit
    vector. With ``embed=None`` the sounds are already embeddings.
    """
    if not test_sounds:
        raise InvalidArgumentError("no test sounds")
    true_ids = [int(t) for _, t in test_sounds]
    for t in set(true_ids):
        db.index_of(t)
    Q = _embed_all(embed, [s for s, _ in test_sounds])
    ranks = true_ranks(db, Q, true_ids)
    fams = np.array([db.family_of(t).value for t in true_ids])
    per_family = {f: _accuracies(ranks[fams == f], ks) for f in sorted(set(fams.tolist()))}
    return EvalReport(_accuracies(ranks, ks), per_family, len(test_sounds), dict(config or {}))


def evaluate_mixture(db: EmbeddingDatabase, embed: Callable | None, test_mixtures: Sequence,
                     ks: Sequence[int] = (1, 5), ranking: str = "family",
                     config: Mapping | None = None) -> EvalReport:
    """Per-family top-k accuracy of constituents retrieved from mixture embeddings.

    ``test_mixtures`` holds ``(MixtureSpec, payload)`` pairs; ``embed(payload)``
    is called once per mixture (payload ``None`` means the spec itself). With
    ``embed=None`` the payload is the embedding. An embedding is either one
    vector or one vector per component (multi-head encoders, slot order). With
    ``ranking="family"`` each constituent is ranked among its own family's
    entries only; ``"global"`` ranks against the whole database. The headline
    accuracy is the macro-average over families.
    """
    if ranking not in ("family", "global"):
        raise InvalidArgumentError(f"unknown ranking mode {ranking!r}")
    families_present = set(db.families)
    Q, true_ids, fam_rows = [], [], []
    for entry in test_mixtures:
        mix, payload = entry if isinstance(entry, tuple) else (entry, None)
        if payload is None:
            payload = mix
        v = np.asarray(payload if embed is None else embed(payload), dtype=np.float64)
        for slot, iid in enumerate(mix.instruments):
            idx = db.index_of(iid)
            fam = db.families[idx]
            if fam not in families_present:
                raise InvalidArgumentError(f"family {fam.value} absent from database")
            Q.append(v[slot] if v.ndim == 2 else v)
            true_ids.append(iid)
            fam_rows.append(fam)
    if not Q:
        raise InvalidArgumentError("no test mixtures")
    filt = fam_rows if ranking == "family" else None
    ranks = true_ranks(db, np.stack(Q), true_ids, filt)
    fams = np.array([f.value for f in fam_rows])
    per_family = {f: _accuracies(ranks[fams == f], ks) for f in sorted(set(fams.tolist()))}
    macro = {k: float(np.mean([per_family[f][k] for f in per_family])) for k in ks}
    return EvalReport(macro, per_family, len(test_mixtures), dict(config or {}, ranking=ranking))


def chance_level(db: EmbeddingDatabase, family_filter: Family | str | None, k: int) -> float:
    n = int(db.mask(family_filter).sum())
    if n == 0:
        raise InvalidArgumentError("filtered database is empty")
    return min(1.0, k / n)


# ---------------------------------------------------------------------------
# persistence and reports


def save_database(prefix, db: EmbeddingDatabase) -> None:
    prefix = Path(prefix)
    blob = np.ascontiguousarray(db.vectors, dtype="<f8").tobytes()
    prefix.with_suffix(".bin").write_bytes(blob)
    index = {
        "version": DB_SCHEMA_VERSION,
        "ids": db.ids.tolist(),
        "families": [f.value for f in db.families],
        "dim": int(db.vectors.shape[1]),
        "provenance": db.provenance,
        "vectors_sha256": hashlib.sha256(blob).hexdigest(),
    }
    prefix.with_suffix(".json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_database(prefix) -> EmbeddingDatabase:
    prefix = Path(prefix)
    index = json.loads(prefix.with_suffix(".json").read_text())
    if index.get("version") != DB_SCHEMA_VERSION:
        raise InvalidArgumentError(f"unsupported database version {index.get('version')!r}")
    vecs = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8").reshape(-1, index["dim"])
    return EmbeddingDatabase(np.array(index["ids"]), index["families"], vecs.copy(), index["provenance"])


def report_rows(results: Mapping[str, EvalReport], ks: Sequence[int] = (1, 5)) -> tuple[list[str], list[dict]]:
    families = sorted({f for r in results.values() for f in r.per_family})
    columns = ["method"] + [f"top{k}" for k in ks] + [f"top{k}_{f}" for f in families for k in ks]
    rows = []
    for method, rep in results.items():
        row = {"method": method}
        for k in ks:
            row[f"top{k}"] = rep.accuracy[k]
            for f in families:
                row[f"top{k}_{f}"] = rep.per_family.get(f, {}).get(k, float("nan"))
        rows.append(row)
    return columns, rows


def write_report(prefix, results: Mapping[str, EvalReport], title: str, ks: Sequence[int] = (1, 5),
                 config_digest: str | None = None) -> tuple[Path, Path]:
    """CSV (fractions, full precision) plus a Markdown table in percent."""
    prefix = Path(prefix)
    columns, rows = report_rows(results, ks)
    csv_path, md_path = prefix.with_suffix(".csv"), prefix.with_suffix(".md")
    with open(csv_path, "w", newline="") as fh:
        if config_digest:
            fh.write(f"# config_hash={config_digest}\n")
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in row.items()})
    lines = [f"## {title}", ""]
    if config_digest:
        lines += [f"config hash `{config_digest}`", ""]
    lines.append("| " + " | ".join(columns) + " |")
    lines.append("|" + "|".join(["---"] + ["---:"] * (len(columns) - 1)) + "|")
    for row in rows:
        cells = [row["method"]] + [f"{100 * row[c]:.1f}" for c in columns[1:]]
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("\nQueries per method: " + ", ".join(f"{m}={r.n_queries}" for m, r in results.items()))
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path
