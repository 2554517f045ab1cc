"""Command line entry point: one JSON config drives every subcommand.

Exit codes: 0 success, 2 usage / config / missing or unreadable artifacts,
3 non-finite training loss.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .datasetgen import content_key, content_path, write_manifest
from .dspfeatures import DescriptorNormalizer, mel_spectrogram, timbre_descriptors
from .encoder.network import embed_features, l2_normalize, pool_mel
from .encoder.training import load_checkpoint, save_checkpoint, write_loss_trace
from .errors import DivergenceError, InvalidArgumentError, SilentAudioError
from .experiment import Experiment, make_bank
from .retrieval import load_database, query, save_database, write_report
from .synthbank import Family, load_bank_document, read_wav, save_bank, write_wav

log = logging.getLogger("timbre_retrieval")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
DESCRIPTOR_CHECKPOINT = "timbre_descriptors"


def bank_summary(bank, split) -> dict:
    test = set(split["test"])
    out: dict[str, dict[str, int]] = {}
    for p in bank:
        row = out.setdefault(p.family.value, {"original": 0, "augmented": 0, "test": 0})
        row["augmented" if p.is_augmented else "original"] += 1
        row["test"] += p.id in test
    return out


def _bank_header(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "bank_config": cfg.to_dict()["bank"]}


def _load_experiment(cfg: ExperimentConfig, bank_path) -> Experiment:
    doc = load_bank_document(bank_path)
    want = _bank_header(cfg)
    if {k: doc.get(k) for k in want} != want:
        raise InvalidArgumentError(f"{bank_path} was generated from a different seed or bank section")
    return Experiment(cfg, doc["patches"], doc["splits"])


def _checkpoint_prefix(out_dir, table: str, method: str) -> Path:
    return Path(out_dir) / f"{table}_{method}"


def _load_params(prefix):
    prefix = Path(prefix)
    if not prefix.with_suffix(".json").exists() or not prefix.with_suffix(".bin").exists():
        raise InvalidArgumentError(f"missing checkpoint {prefix}.json/.bin")
    return load_checkpoint(prefix)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_bank(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank, split = make_bank(cfg)
    summary = bank_summary(bank, split)
    save_bank(out / "bank.json", bank, config_hash=cfg.digest(), splits=split, summary=summary,
              **_bank_header(cfg))
    for fam, row in summary.items():
        print(f"{fam}: {row['original']} instruments ({row['test']} held out), {row['augmented']} augmented")
    print(f"wrote {out / 'bank.json'} config_hash={cfg.digest()}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    exp = _load_experiment(cfg, args.bank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sr = cfg.features.sample_rate
    sounds = exp.test_sounds()
    mixtures = exp.test_mixtures()
    for name, specs in (("test_sounds", [s for s, _ in sounds]), ("test_mixtures", mixtures)):
        extra = []
        for spec in specs:
            row = {"config_hash": cfg.digest()}
            if args.render:
                key = content_key(spec, exp.by_id, sr)
                path = content_path(out / "audio", key)
                if not path.exists():
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_wav(path, exp.corpus.audio(spec))
                row["wav"] = str(path.relative_to(out))
            extra.append(row)
        write_manifest(out / f"{name}.jsonl", specs, extra)
        print(f"wrote {out / name}.jsonl ({len(specs)} items)")
    print(f"config_hash={cfg.digest()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    exp = _load_experiment(cfg, args.bank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config(args.method, args.table)
    if tc.loss == "multi_encoder":
        teacher = args.teacher or _checkpoint_prefix(out, "single", "instrument_classification")
        params, _ = _load_params(teacher)
        exp.use_params("instrument_classification", "single", params)
    result = exp.trained(args.method, args.table)
    prefix = _checkpoint_prefix(out, args.table, args.method)
    save_checkpoint(prefix, result.params, result.config, step=tc.steps,
                    extra={"config_hash": cfg.digest(), "method": args.method, "table": args.table})
    write_loss_trace(prefix.with_name(prefix.name + "_loss.csv"), result.losses, cfg.digest())
    tail = np.mean(result.losses[-50:]) if result.losses else float("nan")
    print(f"trained {args.table}/{args.method}: {tc.steps} steps, final mean loss {tail:.5f}, "
          f"checkpoint {prefix}.bin config_hash={cfg.digest()}")
    return EXIT_OK


def cmd_build_db(args) -> int:
    cfg = load_config(args.config)
    exp = _load_experiment(cfg, args.bank)
    if args.descriptors:
        db, _ = exp.descriptor_database()
    else:
        params, _ = _load_params(args.checkpoint)
        db = exp.encoder_database(params)
    db.provenance["config_hash"] = cfg.digest()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_database(args.out, db)
    print(f"wrote {args.out}.bin/.json ({len(db)} entries) config_hash={cfg.digest()}")
    return EXIT_OK


def embed_wav(db, wav_path, checkpoint=None, family=None) -> np.ndarray:
    """Embed a WAV file with whatever produced ``db``.

    Multi-head encoders need ``family`` to pick the head of that slot.
    """
    audio = read_wav(wav_path)
    if db.provenance.get("checkpoint") == DESCRIPTOR_CHECKPOINT:
        norm = db.provenance["normalizer"]
        norm = DescriptorNormalizer(np.array(norm["mean"]), np.array(norm["std"]))
        q, _ = l2_normalize(norm(timbre_descriptors(audio))[None])
        return q[0]
    if checkpoint is None:
        raise InvalidArgumentError("an encoder database needs --checkpoint to embed the query")
    params, _ = _load_params(checkpoint)
    if audio.sample_rate != params.mel.sample_rate:
        raise InvalidArgumentError(f"WAV sample rate {audio.sample_rate} != {params.mel.sample_rate}")
    e = embed_features(params, pool_mel(mel_spectrogram(audio, params.mel))[None])[0]
    if e.ndim == 2:
        if family is None or Family(family).value not in params.slots:
            raise InvalidArgumentError(f"multi-head encoder: pass --family, one of {list(params.slots)}")
        e = e[list(params.slots).index(Family(family).value)]
    return e


def cmd_query(args) -> int:
    db = load_database(args.db)
    q = embed_wav(db, args.wav, args.checkpoint, args.family)
    res = query(db, q, args.k, args.family)
    for iid, dist in res.pairs():
        print(f"{iid}\t{db.family_of(iid).value}\t{dist:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    exp = _load_experiment(cfg, args.bank)
    if args.mode == "baselines":
        jobs = [("descriptors/single", "descriptors", "single"), ("descriptors/mixture", "descriptors", "mixture")]
    else:
        methods = cfg.eval.single_methods if args.mode == "single" else cfg.eval.mixture_methods
        jobs = [(m, m, args.mode) for m in methods]
    for _, method, table in jobs:
        if method == "descriptors":
            continue
        params, _ = _load_params(_checkpoint_prefix(args.checkpoints, table, method))
        exp.use_params(method, table, params)
        if method == "multi_encoder":
            teacher, _ = _load_params(_checkpoint_prefix(args.checkpoints, "single", "instrument_classification"))
            exp.use_params("instrument_classification", "single", teacher)
    results = {row: exp.evaluate(method, table) for row, method, table in jobs}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    title = {"single": "Single-source QbE accuracy (%)", "mixture": "Mixture QbE accuracy (%)",
             "baselines": "Descriptor baseline QbE accuracy (%)"}[args.mode]
    csv_path, md_path = write_report(args.out, results, title, cfg.eval.ks, cfg.digest())
    print(md_path.read_text(), end="")
    print(f"wrote {csv_path} and {md_path} config_hash={cfg.digest()}")
    return EXIT_OK


def cmd_run(args) -> int:
    """gen-bank, train every configured method, build databases, evaluate both tables."""
    out = Path(args.out)
    ns = argparse.Namespace
    cmd_gen_bank(ns(config=args.config, out=out))
    cfg = load_config(args.config)
    bank = out / "bank.json"
    ckpt = out / "checkpoints"
    order = [("single", m) for m in cfg.eval.single_methods]
    if "multi_encoder" in cfg.eval.mixture_methods:
        order.append(("single", "instrument_classification"))
    order += [("mixture", m) for m in cfg.eval.mixture_methods]
    done = set()
    for table, method in order:
        if method == "descriptors" or (table, method) in done:
            continue
        done.add((table, method))
        cmd_train(ns(config=args.config, bank=bank, method=method, table=table, out=ckpt, teacher=None))
    for mode in ("single", "mixture"):
        cmd_evaluate(ns(config=args.config, bank=bank, mode=mode, checkpoints=ckpt,
                        out=out / "reports" / f"{mode}"))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timbre-retrieval",
                                     description="Synthetic instrument bank, contrastive encoders and QbE evaluation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bank", help="generate the instrument bank and its train/test split")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="output directory for bank.json")
    p.set_defaults(func=cmd_gen_bank)

    p = sub.add_parser("gen-data", help="write test-set manifests (and optionally their audio)")
    p.add_argument("config")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true", help="also render WAV files under <out>/audio")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one encoder")
    p.add_argument("config")
    p.add_argument("--bank", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--table", choices=("single", "mixture"), default="single")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--teacher", help="single-source checkpoint prefix for multi_encoder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-db", help="embed the median note of every instrument")
    p.add_argument("config")
    p.add_argument("--bank", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", help="encoder checkpoint prefix")
    g.add_argument("--descriptors", action="store_true", help="use the timbre descriptor baseline")
    p.add_argument("--out", required=True, help="database prefix (.bin/.json)")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("query", help="rank database instruments for a WAV file")
    p.add_argument("--db", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--checkpoint", help="encoder checkpoint prefix (not needed for descriptor databases)")
    p.add_argument("-k", "--k", type=int, default=5)
    p.add_argument("--family")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="write CSV and Markdown QbE reports")
    p.add_argument("config")
    p.add_argument("--bank", required=True)
    p.add_argument("--mode", choices=("single", "mixture", "baselines"), required=True)
    p.add_argument("--checkpoints", default=".", help="directory holding <table>_<method> checkpoints")
    p.add_argument("--out", required=True, help="report prefix (.csv/.md)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="every step above for all configured methods")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgumentError, SilentAudioError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
