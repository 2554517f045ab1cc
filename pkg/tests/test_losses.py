import itertools
import math

import numpy as np
import pytest
from batches import describe, mixture_batch, random_batch, single_batch, unit_rows
from oracles import central_diff, naive_infonce, naive_multi_encoder, naive_triplet, rule_target_matrix

from timbre_retrieval.encoder.losses import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    build_target_matrix,
    infonce_loss,
    multi_encoder_loss,
    softmax_cross_entropy,
    triplet_count,
    triplet_loss,
)
from timbre_retrieval.errors import InvalidArgumentError


def _upper(T, value):
    return int(np.sum(np.triu(T == value, 1)))


def test_two_mixtures_three_constituents():
    b = mixture_batch(2, 3)
    T = build_target_matrix(b)
    assert T.shape == (8, 8) and _upper(T, POSITIVE) == 6
    assert T[0, 1] == NEGATIVE and T[1, 0] == NEGATIVE
    assert np.all(np.diag(T) == IGNORE) and np.array_equal(T, T.T)


def test_single_source_n4():
    T = build_target_matrix(single_batch(2))
    assert _upper(T, POSITIVE) == 2 and _upper(T, NEGATIVE) == 4


def test_duplicate_instrument_across_mixtures_rejected():
    b = mixture_batch(2, 2)
    b.items[1] = b.items[0]
    with pytest.raises(InvalidArgumentError):
        build_target_matrix(b)


@pytest.mark.parametrize("n_mix,n_const", list(itertools.product(range(0, 4), range(1, 5))))
def test_target_matrix_matches_rule_enumerator(n_mix, n_const):
    for extra in range(0, 3):
        if n_mix == 0 and extra == 0:
            continue
        b = mixture_batch(n_mix, n_const, extra)
        assert np.array_equal(build_target_matrix(b), rule_target_matrix(*describe(b)))


def test_infonce_uniform_similarity_is_log_m():
    # identical embeddings: every similarity is 1, so each anchor sees a uniform softmax
    b = single_batch(3)
    T = build_target_matrix(b)
    E = np.tile(np.eye(4)[0], (6, 1))
    loss, _ = infonce_loss(E, T, 0.1)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_infonce_two_item_zero():
    T = build_target_matrix(single_batch(1))
    loss, dE = infonce_loss(np.array([[1.0, 0.0], [1.0, 0.0]]), T, 0.5)
    assert loss == pytest.approx(0.0, abs=1e-15)


def test_infonce_rejects_batch_without_positives():
    T = np.full((3, 3), NEGATIVE)
    np.fill_diagonal(T, IGNORE)
    with pytest.raises(InvalidArgumentError):
        infonce_loss(np.eye(3), T, 0.1)


def test_infonce_excludes_rows_without_positives(rng):
    b = single_batch(2)
    T = build_target_matrix(b)
    T2 = np.full((5, 5), NEGATIVE)
    T2[:4, :4] = T
    np.fill_diagonal(T2, IGNORE)
    E = unit_rows(rng, 5)
    assert infonce_loss(E, T2, 0.2)[0] == pytest.approx(naive_infonce(E, T2, 0.2), abs=1e-12)


def test_infonce_random_batch_matches_loops_and_fd(rng):
    b = mixture_batch(1, 3, 2)
    T = build_target_matrix(b)
    E = unit_rows(rng, len(b))
    loss, dE = infonce_loss(E, T, 0.1)
    assert abs(loss - naive_infonce(E, T, 0.1)) <= 1e-9
    num = central_diff(lambda X: infonce_loss(X, T, 0.1)[0], E)
    assert np.max(np.abs(num - dE)) / np.max(np.abs(dE)) < 1e-5


def test_triplet_hinge_terms():
    # a at angle 0; positive / negative placed at chosen cosine distances
    def emb(d_ap, d_an):
        return np.array([[1.0, 0.0, 0.0], [1 - d_ap, math.sqrt(1 - (1 - d_ap) ** 2), 0.0],
                         [1 - d_an, 0.0, math.sqrt(1 - (1 - d_an) ** 2)]])

    T = np.array([[IGNORE, POSITIVE, NEGATIVE], [POSITIVE, IGNORE, NEGATIVE], [NEGATIVE, NEGATIVE, IGNORE]])
    mix = np.array([True, False, False])
    assert triplet_loss(emb(0.3, 0.6), T, 0.2, "mixture_anchored", mix)[0] == pytest.approx(0.0, abs=1e-12)
    assert triplet_loss(emb(0.5, 0.4), T, 0.2, "mixture_anchored", mix)[0] == pytest.approx(0.3, abs=1e-12)


@pytest.mark.parametrize("mode", ["singles_and_pairs", "mixture_anchored", "full"])
def test_triplet_random_batch_matches_loops(mode, rng):
    b = mixture_batch(2, 3, 1)
    T = build_target_matrix(b)
    E = unit_rows(rng, len(b))
    loss, dE = triplet_loss(E, T, 0.2, mode, b.is_mixture)
    ref, count = naive_triplet(E, T, 0.2, mode, b.is_mixture)
    assert abs(loss - ref) <= 1e-9 and triplet_count(T, mode, b.is_mixture) == count


def test_full_has_more_triplets_than_mixture_anchored():
    b = mixture_batch(2, 3)
    T = build_target_matrix(b)
    assert triplet_count(T, "full", b.is_mixture) > triplet_count(T, "mixture_anchored", b.is_mixture)


def test_triplet_errors():
    T = build_target_matrix(single_batch(2))
    with pytest.raises(InvalidArgumentError):
        triplet_loss(np.eye(4), T, 0.2, "mixture_anchored", np.zeros(4, bool))
    with pytest.raises(InvalidArgumentError):
        triplet_loss(np.eye(4), T, 0.2, "sideways")


def test_softmax_cross_entropy_examples():
    loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(math.log(7), abs=1e-12)
    logits = np.zeros((1, 5))
    logits[0, 2] = 20.0
    assert softmax_cross_entropy(logits, np.array([2]))[0] < 1e-8
    with pytest.raises(InvalidArgumentError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_multi_encoder_loss_examples(rng):
    t = unit_rows(rng, 3)
    assert multi_encoder_loss(t, t)[0] == pytest.approx(0.0, abs=1e-12)
    assert multi_encoder_loss(-t, t)[0] == pytest.approx(2.0, abs=1e-12)
    O, Tg = unit_rows(rng, 12).reshape(4, 3, 8), unit_rows(rng, 12).reshape(4, 3, 8)
    assert abs(multi_encoder_loss(O, Tg)[0] - naive_multi_encoder(O, Tg)) <= 1e-9
    with pytest.raises(InvalidArgumentError):
        multi_encoder_loss(unit_rows(rng, 3), unit_rows(rng, 2))


def test_random_batches_keep_a_positive_per_row(rng):
    for _ in range(20):
        T = build_target_matrix(random_batch(rng))
        assert np.all((T == POSITIVE).any(axis=1))
