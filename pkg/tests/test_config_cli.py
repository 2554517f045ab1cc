import json

import numpy as np
import pytest

from timbre_retrieval import config_from_dict, load_config
from timbre_retrieval.cli import main
from timbre_retrieval.datasetgen import all_distributions, median_note
from timbre_retrieval.encoder import training
from timbre_retrieval.errors import InvalidArgumentError
from timbre_retrieval.retrieval import load_database, query
from timbre_retrieval.synthbank import load_bank, render_note, write_wav

TINY = {
    "seed": 4,
    "bank": {"n_per_family": 4, "n_test_per_family": 1},
    "data": {"note_length": 1.0, "note_duration": 0.5, "score_length": 2.0, "mixture_length": 1.5,
             "n_pool_sounds": 2, "n_pool_stems": 2},
    "train": {"steps": 3, "batch_size": 8, "n_mixtures": 2, "hidden": 16, "dim": 8},
    "eval": {"n_test_sounds": 2, "n_test_mixtures": 3, "single_methods": ["descriptors", "infonce"],
             "mixture_methods": ["descriptors", "triplet"]},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def banked(tiny, tmp_path):
    assert main(["gen-bank", str(tiny), "--out", str(tmp_path / "b")]) == 0
    return tiny, tmp_path / "b" / "bank.json"


def test_config_defaults_and_validation():
    cfg = config_from_dict({})
    assert cfg.bank.n_per_family == 40 and cfg.train.batch_size == 24
    assert cfg.digest() == config_from_dict({}).digest()
    assert cfg.digest() != config_from_dict({"seed": 1}).digest()
    for bad in ({"bank": {"n_per_famly": 3}}, {"extra": 1}, {"bank": {"families": ["kazoo"]}},
                {"data": {"mixture_slots": ["strings"]}}, {"bank": {"n_per_family": 2, "n_test_per_family": 2}},
                {"eval": {"ranking": "nearest"}}, {"train": {"batch_size": 5}}):
        with pytest.raises(InvalidArgumentError):
            config_from_dict(bad)


def test_load_config_errors(tmp_path):
    (tmp_path / "a.json").write_text("[1, 2]")
    (tmp_path / "b.json").write_text("{not json")
    for name in ("a.json", "b.json", "missing.json"):
        with pytest.raises(InvalidArgumentError):
            load_config(tmp_path / name)


def test_gen_bank_is_deterministic_and_summarized(tiny, tmp_path, capsys):
    assert main(["gen-bank", str(tiny), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-bank", str(tiny), "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "bank.json").read_bytes(), (tmp_path / "b" / "bank.json").read_bytes()
    assert a == b
    doc = json.loads(a)
    assert doc["config_hash"] == load_config(tiny).digest()
    for fam in ("percussion", "bass", "synth_lead"):
        assert doc["summary"][fam]["original"] == 4 and doc["summary"][fam]["test"] == 1
        assert doc["summary"][fam]["augmented"] <= 3
    assert "config_hash=" in capsys.readouterr().out


def test_usage_errors_exit_2(tiny, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bank": {"colour": 1}}))
    assert main(["gen-bank", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["train", str(tiny), "--bank", str(tmp_path / "nope.json"), "--method", "infonce",
                 "--out", str(tmp_path)]) == 2
    assert main(["query", "--db", str(tmp_path / "nodb"), "--wav", str(tmp_path / "no.wav")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["train", str(tiny)])
    assert info.value.code == 2
    assert "error:" in capsys.readouterr().err


def test_bank_from_other_config_is_rejected(banked, tmp_path):
    tiny, bank = banked
    other = tmp_path / "other.json"
    other.write_text(json.dumps(dict(TINY, seed=5)))
    assert main(["build-db", str(other), "--bank", str(bank), "--descriptors", "--out", str(tmp_path / "db")]) == 2


def test_nan_training_exits_3(banked, tmp_path, monkeypatch):
    tiny, bank = banked

    def nan_objective(*args, **kw):
        return float("nan"), {}

    monkeypatch.setattr(training, "contrastive_objective", nan_objective)
    assert main(["train", str(tiny), "--bank", str(bank), "--method", "infonce", "--out", str(tmp_path / "ck")]) == 3


def test_train_with_zero_lr_writes_initial_weights(banked, tmp_path):
    tiny, bank = banked
    cfg = dict(TINY, train=dict(TINY["train"], lr=0.0))
    zero = tmp_path / "zero.json"
    zero.write_text(json.dumps(cfg))
    assert main(["gen-bank", str(zero), "--out", str(tmp_path / "zb")]) == 0
    zb = tmp_path / "zb" / "bank.json"
    assert main(["train", str(zero), "--bank", str(zb), "--method", "infonce", "--out", str(tmp_path / "c1")]) == 0
    assert main(["train", str(zero), "--bank", str(zb), "--method", "infonce", "--out", str(tmp_path / "c2")]) == 0
    a = (tmp_path / "c1" / "single_infonce.bin").read_bytes()
    assert a == (tmp_path / "c2" / "single_infonce.bin").read_bytes()
    trace = (tmp_path / "c1" / "single_infonce_loss.csv").read_text().splitlines()
    assert len(trace) == 2 + TINY["train"]["steps"]


def test_query_prints_k_ranked_lines(banked, tmp_path, capsys):
    tiny, bank = banked
    cfg = load_config(tiny)
    assert main(["build-db", str(tiny), "--bank", str(bank), "--descriptors", "--out", str(tmp_path / "db")]) == 0
    db = load_database(tmp_path / "db")
    patch = next(p for p in load_bank(bank) if p.id == int(db.ids[3]))
    note = median_note(all_distributions(cfg.bank.families)[patch.family], cfg.data.note_duration)
    write_wav(tmp_path / "q.wav", render_note(patch, note, 16000, cfg.data.note_length))
    capsys.readouterr()
    assert main(["query", "--db", str(tmp_path / "db"), "--wav", str(tmp_path / "q.wav"), "-k", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    assert int(lines[0].split("\t")[0]) == patch.id
    assert float(lines[0].split("\t")[2]) == pytest.approx(0.0, abs=1e-5)

    from timbre_retrieval.cli import embed_wav
    ref = query(db, embed_wav(db, tmp_path / "q.wav"), 4)
    assert [int(line.split("\t")[0]) for line in lines] == ref.ids.tolist()


def test_evaluate_baselines_writes_report(banked, tmp_path, capsys):
    tiny, bank = banked
    out = tmp_path / "rep" / "baselines"
    assert main(["evaluate", str(tiny), "--bank", str(bank), "--mode", "baselines", "--out", str(out)]) == 0
    rows = out.with_suffix(".csv").read_text().splitlines()
    assert rows[0] == f"# config_hash={load_config(tiny).digest()}"
    assert [r.split(",")[0] for r in rows[2:]] == ["descriptors/single", "descriptors/mixture"]
    vals = [float(v) for v in rows[2].split(",")[1:]]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert "descriptors/single" in capsys.readouterr().out


def test_gen_data_manifests(banked, tmp_path):
    tiny, bank = banked
    out = tmp_path / "data"
    assert main(["gen-data", str(tiny), "--bank", str(bank), "--out", str(out), "--render"]) == 0
    sounds = (out / "test_sounds.jsonl").read_text().splitlines()
    assert len(sounds) == 3 * 1 * 2
    mixes = [json.loads(line) for line in (out / "test_mixtures.jsonl").read_text().splitlines()]
    assert len(mixes) == 3
    assert all((out / m["wav"]).exists() for m in mixes)


def test_run_end_to_end(tiny, tmp_path):
    assert main(["run", str(tiny), "--out", str(tmp_path / "run")]) == 0
    for name in ("single", "mixture"):
        csv = (tmp_path / "run" / "reports" / f"{name}.csv").read_text().splitlines()
        assert len(csv) == 2 + 2
    assert np.isfinite([float(v) for v in csv[3].split(",")[1:]]).all()
