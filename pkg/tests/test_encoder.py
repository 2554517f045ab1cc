import numpy as np
import pytest
from batches import mixture_batch, single_batch

from timbre_retrieval.corpus import Corpus
from timbre_retrieval.datasetgen import SoundSettings, all_distributions
from timbre_retrieval.dspfeatures import MelParams, MelSpectrogram
from timbre_retrieval.encoder import network, training
from timbre_retrieval.encoder.gradcheck import grad_check
from timbre_retrieval.encoder.losses import build_target_matrix, triplet_margins
from timbre_retrieval.encoder.network import (
    TRAINABLE,
    embed_features,
    encode,
    init_params,
    l2_normalize,
)
from timbre_retrieval.encoder.training import (
    Adam,
    TrainConfig,
    class_labels,
    classification_pretext_loss,
    contrastive_objective,
    init_head,
    load_checkpoint,
    multi_encoder_objective,
    save_checkpoint,
    train,
    write_loss_trace,
)
from timbre_retrieval.errors import DivergenceError, InvalidArgumentError
from timbre_retrieval.synthbank import generate_bank

FAMS = ("percussion", "bass", "synth_lead")
SHORT = SoundSettings(note_length=1.0, note_duration=0.6, score_length=2.0)


def _params(seed=0, hidden=16, dim=8, **kw):
    # input statistics match _features so the first layer is not saturated
    return init_params(np.random.default_rng(seed), MelParams(), hidden, dim,
                       in_mean=np.full(128, -5.0), in_std=np.full(128, 2.0), **kw)


def _features(rng, n):
    return rng.normal(-5.0, 2.0, size=(n, 128))


def test_encode_unit_norm_deterministic_and_shape_checked(rng):
    p = _params()
    mel = MelSpectrogram(rng.normal(-6, 2, size=(20, 64)), MelParams())
    e = encode(p, mel)
    assert abs(np.linalg.norm(e) - 1) <= 1e-6
    assert np.array_equal(e, encode(p, mel))
    with pytest.raises(InvalidArgumentError):
        encode(p, MelSpectrogram(np.zeros((20, 32)), MelParams()))
    with pytest.raises(InvalidArgumentError):
        encode(p, MelSpectrogram(np.zeros((20, 64)), MelParams(n_fft=512)))


def test_zero_projection_uses_basis_fallback(rng):
    p = _params()
    p.arrays["W3"][:] = 0.0
    p.arrays["b3"][:] = 0.0
    before = network.zero_norm_fallbacks.count
    e = embed_features(p, _features(rng, 3))
    assert np.array_equal(e, np.tile(np.eye(8)[0], (3, 1)))
    assert network.zero_norm_fallbacks.count == before + 3


def test_multi_head_embeddings(rng):
    p = _params(n_heads=3, slots=FAMS)
    e = embed_features(p, _features(rng, 4))
    assert e.shape == (4, 3, 8)
    np.testing.assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-12)


# -- gradient checks ---------------------------------------------------------


def test_grad_check_linear_layer_exact(rng):
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    arrays = {"W": rng.standard_normal((3, 4)), "b": rng.standard_normal(3)}

    def loss_fn(a):
        r = x @ a["W"].T + a["b"] - y
        return 0.5 * float(np.sum(r**2)), {"W": r.T @ x, "b": r.sum(axis=0)}

    assert grad_check(arrays, loss_fn, eps=1e-5, n_checks=15) < 1e-8


def test_grad_check_eps_range():
    with pytest.raises(InvalidArgumentError):
        grad_check({"a": np.zeros(1)}, lambda a: (0.0, {"a": np.zeros(1)}), eps=1e-2)


@pytest.mark.parametrize("loss", ["infonce", "triplet", "full_triplet"])
def test_grad_check_contrastive_encoder(loss, rng):
    b = mixture_batch(2, 3, 1)
    T = build_target_matrix(b)
    X = _features(rng, len(b))
    p = _params()
    cfg = TrainConfig(loss=loss, batch_kind="mixture")

    def signature(arrays):
        if loss == "infonce":
            return None
        E = embed_features(p, X)
        M, valid = triplet_margins(E, T, cfg.margin, cfg.anchor_mode, b.is_mixture)
        return tuple(np.flatnonzero(valid & (M > 0)))

    err = grad_check(p.arrays, lambda a: contrastive_objective(p, X, T, cfg, b.is_mixture), eps=1e-6,
                     n_checks=60, rng=np.random.default_rng(1), keys=TRAINABLE, kink_signature=signature)
    assert err < 1e-4


def test_grad_check_classification_and_multi_encoder(rng):
    p = _params()
    head = init_head(np.random.default_rng(2), 5, 8)
    X = _features(rng, 6)
    y = np.array([0, 1, 2, 3, 4, 0])
    arrays = {**p.arrays, **head}

    def cls(a):
        p.arrays.update({k: a[k] for k in TRAINABLE})
        return classification_pretext_loss(p, {"Wc": a["Wc"], "bc": a["bc"]}, X, y)

    keys = list(TRAINABLE) + ["Wc", "bc"]
    assert grad_check(arrays, cls, n_checks=60, rng=np.random.default_rng(3), keys=keys) < 1e-4

    m = _params(n_heads=3, slots=FAMS)
    targets = l2_normalize(rng.standard_normal((4, 3, 8)))[0]
    Xm = _features(rng, 4)
    err = grad_check(m.arrays, lambda a: multi_encoder_objective(m, Xm, targets), n_checks=60,
                     rng=np.random.default_rng(4), keys=TRAINABLE)
    assert err < 1e-4


def test_adam_first_step_is_lr_times_sign():
    arrays = {"w": np.array([1.0, -2.0, 3.0])}
    Adam(0.01).step(arrays, {"w": np.array([0.5, -4.0, 1e-3])})
    np.testing.assert_allclose(arrays["w"], [0.99, -1.99, 2.99], atol=1e-7)


# -- training loop -------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    bank = generate_bank(6, FAMS, 11)
    dists = all_distributions(FAMS)
    corpus = Corpus(bank, dists, SHORT, seed=0, mixture_length=2.0)
    ids = [p.id for p in bank]
    corpus.build_sound_pools(ids, 4)
    corpus.build_stem_pools(ids, 2)
    return bank, dists, corpus


def _cfg(**kw):
    base = dict(steps=5, hidden=16, dim=8, batch_size=8, n_mixtures=2)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_zero_keeps_initialization(toy):
    bank, dists, corpus = toy
    res = train(_cfg(lr=0.0, loss="infonce", batch_kind="single"), bank, dists, corpus)
    init = init_params(np.random.default_rng(0), MelParams(), 16, 8)
    ref = train(_cfg(lr=0.0, steps=0, loss="infonce", batch_kind="single"), bank, dists, corpus)
    for k in TRAINABLE:
        assert np.array_equal(res.params.arrays[k], ref.params.arrays[k])
    assert res.params.arrays["W1"].shape == init.arrays["W1"].shape


@pytest.mark.parametrize("loss,kind", [("infonce", "single"), ("triplet", "mixture"), ("full_triplet", "mixture"),
                                       ("classification", "single")])
def test_same_seed_same_trace(loss, kind, toy):
    bank, dists, corpus = toy
    a = train(_cfg(loss=loss, batch_kind=kind), bank, dists, corpus)
    b = train(_cfg(loss=loss, batch_kind=kind), bank, dists, corpus)
    assert a.losses == b.losses and len(a.losses) == 5
    assert all(np.array_equal(a.params.arrays[k], b.params.arrays[k]) for k in TRAINABLE)


def test_multi_encoder_needs_teacher(toy):
    bank, dists, corpus = toy
    with pytest.raises(InvalidArgumentError):
        train(_cfg(loss="multi_encoder"), bank, dists, corpus)
    teacher = train(_cfg(loss="classification", steps=2), bank, dists, corpus).params
    res = train(_cfg(loss="multi_encoder", steps=3), bank, dists, corpus, frozen=teacher)
    assert res.params.n_heads == 3 and len(res.losses) == 3


def test_classification_head_matches_instrument_count():
    bank = generate_bank(20, FAMS, 5)
    labels, keys = class_labels(bank, "instrument")
    assert len(keys) == 60 and sorted(labels.values()) == list(range(60))
    fam_labels, fam_keys = class_labels(bank, "family")
    assert len(fam_keys) == 3


def test_nan_loss_raises_divergence(toy, monkeypatch):
    bank, dists, corpus = toy

    def bad(*args, **kw):
        loss, grads = real(*args, **kw)
        return float("nan"), grads

    real = training.contrastive_objective
    monkeypatch.setattr(training, "contrastive_objective", bad)
    with pytest.raises(DivergenceError) as info:
        train(_cfg(loss="infonce", batch_kind="single"), bank, dists, corpus)
    assert info.value.step == 0


def test_checkpoint_roundtrip(tmp_path, toy):
    bank, dists, corpus = toy
    res = train(_cfg(loss="infonce", batch_kind="single", steps=2), bank, dists, corpus)
    save_checkpoint(tmp_path / "ck", res.params, res.config, step=2, extra={"config_hash": "abc"})
    params, header = load_checkpoint(tmp_path / "ck")
    for k, v in res.params.arrays.items():
        assert np.array_equal(params.arrays[k], v)
    assert header["step"] == 2 and header["seed"] == 0 and header["config_hash"] == "abc"
    assert header["architecture"]["hidden"] == 16 and TrainConfig.from_dict(header["config"]) == res.config
    write_loss_trace(tmp_path / "loss.csv", res.losses, "abc")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[:2] == ["# config_hash=abc", "step,loss"] and float(lines[2].split(",")[1]) == res.losses[0]


def test_train_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(temperature=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(batch_size=7)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(loss="hinge")
    assert TrainConfig(loss="full_triplet").anchor_mode == "full"
    assert TrainConfig(loss="triplet", batch_kind="single").anchor_mode == "singles_and_pairs"


@pytest.mark.slow
def test_full_triplet_training_reduces_loss():
    bank = generate_bank(20, FAMS, 21)
    dists = all_distributions(FAMS)
    early, late = [], []
    for seed in range(3):
        corpus = Corpus(bank, dists, SHORT, seed=seed, mixture_length=2.0)
        res = train(TrainConfig(loss="full_triplet", steps=300, seed=seed, n_mixtures=8), bank, dists, corpus)
        early.append(np.mean(res.losses[:50]))
        late.append(np.mean(res.losses[250:300]))
    assert np.mean(late) < np.mean(early)


def test_single_source_loss_is_batch_permutation_invariant(rng):
    b = single_batch(4)
    T = build_target_matrix(b)
    X = _features(rng, len(b))
    p = _params()
    cfg = TrainConfig(loss="infonce", batch_kind="single")
    perm = rng.permutation(len(b))
    l1, _ = contrastive_objective(p, X, T, cfg)
    l2, _ = contrastive_objective(p, X[perm], T[np.ix_(perm, perm)], cfg)
    assert l1 == pytest.approx(l2, abs=1e-12)
