import numpy as np
from batches import random_batch, unit_rows
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from oracles import full_scan

from timbre_retrieval.datasetgen import (
    SoundSettings,
    all_distributions,
    build_mixture_batch,
    build_single_source_batch,
    generate_score,
    keyed_rng,
)
from timbre_retrieval.dspfeatures import MelParams, timbre_descriptors
from timbre_retrieval.encoder.losses import build_target_matrix, infonce_loss, multi_encoder_loss, triplet_count, triplet_loss
from timbre_retrieval.encoder.network import embed_features, init_params
from timbre_retrieval.retrieval import EmbeddingDatabase, evaluate_single_source, query
from timbre_retrieval.synthbank import AudioBuffer, Family, generate_bank

FAMS = ("percussion", "bass", "synth_lead")
BANK = generate_bank(6, FAMS, 17)
DISTS = all_distributions(FAMS)
MODES = ("full", "singles_and_pairs", "mixture_anchored")
seeds = st.integers(0, 2**32 - 1)
fast = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def _batch_and_embeddings(seed):
    rng = np.random.default_rng(seed)
    b = random_batch(rng)
    return rng, b, build_target_matrix(b), unit_rows(rng, len(b))


def _orthogonal(rng, d):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


@fast
@given(seeds)
def test_losses_invariant_under_batch_permutation(seed):
    rng, b, T, E = _batch_and_embeddings(seed)
    perm = rng.permutation(len(b))
    Tp, Ep, mix = T[np.ix_(perm, perm)], E[perm], b.is_mixture
    assert abs(infonce_loss(E, T)[0] - infonce_loss(Ep, Tp)[0]) < 1e-12
    for mode in MODES:
        if triplet_count(T, mode, mix) == 0:
            continue
        a = triplet_loss(E, T, 0.2, mode, mix)[0]
        assert abs(a - triplet_loss(Ep, Tp, 0.2, mode, mix[perm])[0]) < 1e-12
    O, G = unit_rows(rng, 9).reshape(3, 3, 8), unit_rows(rng, 9).reshape(3, 3, 8)
    p = rng.permutation(3)
    assert abs(multi_encoder_loss(O, G)[0] - multi_encoder_loss(O[p], G[p])[0]) < 1e-12


@fast
@given(seeds)
def test_losses_invariant_under_rotation(seed):
    rng, b, T, E = _batch_and_embeddings(seed)
    R = _orthogonal(rng, E.shape[1])
    assert abs(infonce_loss(E, T)[0] - infonce_loss(E @ R.T, T)[0]) < 1e-9
    if triplet_count(T) > 0:
        assert abs(triplet_loss(E, T, 0.2)[0] - triplet_loss(E @ R.T, T, 0.2)[0]) < 1e-9


@fast
@given(st.integers(2, 8), st.floats(0.0, 0.5))
def test_triplet_zero_when_classes_are_separated(n_inst, margin):
    # every instrument gets its own axis, so d(a, p) = 0 and d(a, n) = 1 >= margin
    from batches import single_batch
    b = single_batch(n_inst)
    T = build_target_matrix(b)
    E = np.repeat(np.eye(n_inst), 2, axis=0)
    assert triplet_loss(E, T, margin)[0] == 0.0


@fast
@given(seeds, st.floats(0.2, 1.5), st.sampled_from(FAMS))
def test_scores_have_no_chords(seed, density, fam):
    spec = generate_score(DISTS[Family(fam)], 6.0, density, np.random.default_rng(seed))
    ends = [(n.onset, n.onset + n.duration) for n in spec.notes]
    assert ends == sorted(ends)
    assert all(e0 <= s1 for (_, e0), (s1, _) in zip(ends, ends[1:]))
    assert all(e <= 6.0 + 1e-9 for _, e in ends)


@fast
@given(seeds, st.sampled_from([4, 8, 12]))
def test_single_source_batches_have_multiplicity_two(seed, N):
    b = build_single_source_batch(BANK, DISTS, N, keyed_rng(seed, 1))
    assert len(b) == N and set(b.instrument_multiset().values()) == {2}
    again = build_single_source_batch(BANK, DISTS, N, keyed_rng(seed, 1))
    assert b == again


@fast
@given(seeds, st.integers(1, 4))
def test_mixture_batches_have_multiplicity_two(seed, n_mix):
    b = build_mixture_batch(BANK, DISTS, n_mix, FAMS, keyed_rng(seed, 2), SoundSettings(), 3.0)
    assert int(b.is_mixture.sum()) == n_mix
    assert set(b.instrument_multiset().values()) == {2}
    assert b == build_mixture_batch(BANK, DISTS, n_mix, FAMS, keyed_rng(seed, 2), SoundSettings(), 3.0)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(1e-3, 1e3))
def test_descriptors_scale_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    t = np.arange(8000) / 16000
    x = np.sin(2 * np.pi * rng.uniform(80, 2000) * t) * np.exp(-t * rng.uniform(0, 8))
    x = 0.5 * x + 0.05 * rng.standard_normal(len(t))
    a = timbre_descriptors(AudioBuffer(x, 16000))
    b = timbre_descriptors(AudioBuffer(alpha * x, 16000))
    np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9)


ENC = init_params(np.random.default_rng(5), MelParams(), 32, 8, in_mean=np.full(128, -5.0), in_std=np.full(128, 2.0))


@fast
@given(seeds, st.floats(-12.0, 3.0), st.floats(0.0, 50.0))
def test_encoder_outputs_unit_norm(seed, offset, scale):
    X = offset + scale * np.random.default_rng(seed).standard_normal((5, 128))
    e = embed_features(ENC, X)
    assert np.all(np.abs(np.linalg.norm(e, axis=1) - 1.0) <= 1e-6)


@fast
@given(seeds, st.integers(1, 40), st.integers(1, 50), st.booleans())
def test_query_is_exact(seed, n, k, ties):
    rng = np.random.default_rng(seed)
    V = unit_rows(rng, n, 4)
    if ties and n > 1:
        V[rng.integers(n, size=n // 2)] = V[0]
    ids = rng.permutation(10 * n)[:n]
    db = EmbeddingDatabase(ids, [FAMS[i % 3] for i in range(n)], V)
    q = unit_rows(rng, 1, 4)[0] if not ties else V[0]
    res = query(db, q, k)
    ref = full_scan(ids, V, q, k)
    assert res.ids.tolist() == [i for _, i in ref]
    assert np.all(np.diff(res.distances) >= 0) and np.all((res.distances >= 0) & (res.distances <= 2))


@fast
@given(seeds)
def test_top1_never_exceeds_top5(seed):
    rng = np.random.default_rng(seed)
    db = EmbeddingDatabase(np.arange(12), [FAMS[i % 3] for i in range(12)], unit_rows(rng, 12, 6))
    noisy = db.vectors + rng.normal(0, rng.uniform(0, 2), size=db.vectors.shape)
    rep = evaluate_single_source(db, lambda v: v / np.linalg.norm(v), list(zip(noisy, db.ids)))
    assert 0 <= rep.top1 <= rep.top5 <= 1
    R = _orthogonal(rng, 6)
    rot = EmbeddingDatabase(db.ids, db.families, db.vectors @ R.T)
    rep_r = evaluate_single_source(rot, lambda v: (R @ v) / np.linalg.norm(v), list(zip(noisy, db.ids)))
    assert rep_r.accuracy == rep.accuracy
