"""Contrastive, classification and distillation objectives.

Every loss returns ``(value, gradient)`` where the gradient is taken with
respect to its direct input (unit embeddings, logits, or head outputs).
Target matrices use ``POSITIVE = 1``, ``NEGATIVE = -1`` and ``IGNORE = 0``.
"""
from __future__ import annotations

import numpy as np

from ..datasetgen import BatchSpec, MixtureSpec
from ..errors import InvalidArgumentError

POSITIVE, NEGATIVE, IGNORE = 1, -1, 0
ANCHOR_MODES = ("singles_and_pairs", "mixture_anchored", "full")


def build_target_matrix(batch: BatchSpec) -> np.ndarray:
    """Pairwise positive/negative/ignore labels for a batch of sounds and mixtures.

    A mixture is positive with each single sound of one of its constituents
    and negative with everything else, other mixtures included. Two single
    sounds are positive iff they come from the same instrument.
    """
    items = batch.items
    n = len(items)
    seen: dict[int, int] = {}
    for idx, it in enumerate(items):
        if isinstance(it, MixtureSpec):
            for iid in it.instruments:
                if iid in seen:
                    raise InvalidArgumentError(f"instrument {iid} appears in two mixtures")
                seen[iid] = idx
    T = np.full((n, n), NEGATIVE, dtype=np.int8)
    for i, a in enumerate(items):
        for j in range(i + 1, n):
            b = items[j]
            mix_a, mix_b = isinstance(a, MixtureSpec), isinstance(b, MixtureSpec)
            if mix_a and mix_b:
                continue
            if mix_a or mix_b:
                mix, single = (a, b) if mix_a else (b, a)
                positive = single.instrument_id in mix.instruments
            else:
                positive = a.instrument_id == b.instrument_id
            if positive:
                T[i, j] = T[j, i] = POSITIVE
    np.fill_diagonal(T, IGNORE)
    return T


def cosine_similarity_matrix(E: np.ndarray) -> np.ndarray:
    return E @ E.T


def _scatter_similarity_grad(G: np.ndarray, E: np.ndarray) -> np.ndarray:
    # S = E E^T  =>  dL/dE = G E + G^T E
    return G @ E + G.T @ E


def infonce_loss(E: np.ndarray, targets: np.ndarray, temperature: float = 0.1):
    """Multi-positive InfoNCE averaged over every (anchor, positive) pair.

    Each pair contributes ``-log softmax`` of its similarity over the anchor's
    candidate set (all positive and negative entries of the row). Anchors
    without positives are skipped.
    """
    if temperature <= 0:
        raise InvalidArgumentError("temperature must be > 0")
    E = np.asarray(E, dtype=np.float64)
    pos = targets == POSITIVE
    cand = targets != IGNORE
    npos = pos.sum(axis=1)
    valid = npos > 0
    if not valid.any():
        raise InvalidArgumentError("no anchor has a positive")
    n_pairs = int(npos[valid].sum())
    S = (E @ E.T) / temperature
    Sm = np.where(cand, S, -np.inf)
    m = np.max(np.where(cand, S, -np.inf), axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    ex = np.where(cand, np.exp(Sm - m), 0.0)
    z = ex.sum(axis=1)
    lse = m[:, 0] + np.log(np.where(z > 0, z, 1.0))
    per_anchor = npos * lse - np.sum(np.where(pos, S, 0.0), axis=1)
    loss = float(per_anchor[valid].sum() / n_pairs)
    q = ex / np.where(z > 0, z, 1.0)[:, None]
    G = (npos[:, None] * q - pos) / (temperature * n_pairs)
    G[~valid] = 0.0
    return loss, _scatter_similarity_grad(G, E)


def anchor_mask(mode: str, is_mixture: np.ndarray | None, n: int) -> np.ndarray:
    if mode not in ANCHOR_MODES:
        raise InvalidArgumentError(f"unknown anchor mode {mode!r}")
    mix = np.zeros(n, dtype=bool) if is_mixture is None else np.asarray(is_mixture, dtype=bool)
    if mode == "full":
        return np.ones(n, dtype=bool)
    if mode == "mixture_anchored":
        return mix.copy()
    return ~mix


def triplet_count(targets: np.ndarray, mode: str = "full", is_mixture=None) -> int:
    A = anchor_mask(mode, is_mixture, len(targets))
    npos = (targets == POSITIVE).sum(axis=1)
    nneg = (targets == NEGATIVE).sum(axis=1)
    return int(np.sum((npos * nneg)[A]))


def triplet_margins(E: np.ndarray, targets: np.ndarray, margin: float, mode: str = "full", is_mixture=None):
    """Hinge arguments ``d(a,p) - d(a,n) + m`` and the mask of valid triplets, indexed [a, p, n]."""
    S = E @ E.T
    A = anchor_mask(mode, is_mixture, len(targets))
    pos = (targets == POSITIVE) & A[:, None]
    neg = (targets == NEGATIVE) & A[:, None]
    M = S[:, None, :] - S[:, :, None] + margin
    valid = pos[:, :, None] & neg[:, None, :]
    return M, valid


def triplet_loss(E: np.ndarray, targets: np.ndarray, margin: float = 0.2, anchor_mode: str = "full",
                 is_mixture=None):
    """Batch-all triplet hinge on cosine distance, averaged over valid triplets.

    ``singles_and_pairs`` anchors on single sounds, ``mixture_anchored`` on
    mixtures only, ``full`` on every item.
    """
    if margin < 0:
        raise InvalidArgumentError("margin must be >= 0")
    E = np.asarray(E, dtype=np.float64)
    M, valid = triplet_margins(E, targets, margin, anchor_mode, is_mixture)
    count = int(valid.sum())
    if count == 0:
        raise InvalidArgumentError("batch has no valid triplet")
    active = valid & (M > 0)
    loss = float(M[active].sum() / count)
    G = (active.sum(axis=1) - active.sum(axis=2)) / count
    return loss, _scatter_similarity_grad(G, E)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise InvalidArgumentError(f"labels must be integers in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def multi_encoder_loss(outputs: np.ndarray, frozen_targets: np.ndarray):
    """Mean cosine distance between each head's output and its slot's frozen target.

    Heads and targets are matched by slot position; no permutation search.
    Accepts (K, d) or batched (n, K, d) arrays of unit vectors.
    """
    O = np.asarray(outputs, dtype=np.float64)
    Tg = np.asarray(frozen_targets, dtype=np.float64)
    if O.shape != Tg.shape:
        raise InvalidArgumentError(f"outputs {O.shape} and frozen targets {Tg.shape} do not align")
    count = int(np.prod(O.shape[:-1]))
    loss = float(np.sum(1.0 - np.sum(O * Tg, axis=-1)) / count)
    return loss, -Tg / count

