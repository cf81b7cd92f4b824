"""Ranking metrics over one retrieved list and a binary relevant set."""
import logging
import math

import numpy as np

from ..errors import DomainError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def _relevant(relevant):
    rel = set(relevant)
    if not rel:
        raise DomainError("relevant set must be non-empty")
    return rel


def _check_k(K):
    if int(K) != K or K <= 0:
        raise DomainError(f"K must be a positive integer, got {K!r}")
    return int(K)


def recall_at_k(retrieved, relevant, K):
    """|top-K ∩ relevant| / |relevant|."""
    K = _check_k(K)
    rel = _relevant(relevant)
    hits = len(rel.intersection(list(retrieved)[:K]))
    return hits / len(rel)


def mrr(retrieved, relevant):
    """Reciprocal rank of the first relevant item, 0 when none was retrieved."""
    rel = _relevant(relevant)
    for rank, item in enumerate(retrieved, start=1):
        if item in rel:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(retrieved, relevant, K):
    """Binary-gain NDCG with discount 1/log2(rank + 1)."""
    K = _check_k(K)
    rel = _relevant(relevant)
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(retrieved)[:K]) if item in rel)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(len(rel), K)))
    return dcg / ideal


def nll_at_k(probabilities):
    """Sum of -log p over the top-K candidates' interest probabilities.

    Exact zeros are clamped to 1e-12 (with a warning); anything outside [0, 1]
    is rejected.
    """
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DomainError("probabilities must lie in (0, 1]")
    if np.any(p < PROB_FLOOR):
        log.warning("%d probabilities below %g clamped for NLL", int(np.sum(p < PROB_FLOOR)), PROB_FLOOR)
        p = np.maximum(p, PROB_FLOOR)
    return float(-np.sum(np.log(p)))


def pair_similarity(keys, reps, measure):
    """Row-wise similarity of matched (key, rep) rows; larger means closer."""
    keys = np.asarray(keys, dtype=np.float64)
    reps = np.asarray(reps, dtype=np.float64)
    if measure == "cosine":
        kn = np.linalg.norm(keys, axis=-1)
        rn = np.linalg.norm(reps, axis=-1)
        if np.any(kn == 0) or np.any(rn == 0):
            raise DomainError("cosine similarity with a zero vector")
        return np.sum(keys * reps, axis=-1) / (kn * rn)
    if measure == "euclidean":
        return -np.linalg.norm(keys - reps, axis=-1)
    raise DomainError(f"unknown measure {measure!r}")


def alignment_rate(keys, reps_a, reps_b, interest_a, interest_b, measure="cosine"):
    """Share of triples whose key-similarity order agrees with the interest order.

    Row ``t`` describes a triple (u, a, b): the user's key, both items'
    representations and the recommender's interest in each.  Triples with
    equal interest carry no order and are skipped; a similarity tie counts as
    a disagreement.
    """
    ia = np.asarray(interest_a, dtype=np.float64)
    ib = np.asarray(interest_b, dtype=np.float64)
    valid = ia != ib
    if not np.any(valid):
        raise DomainError("no triple has distinct interest scores")
    keys = np.asarray(keys, dtype=np.float64)[valid]
    sa = pair_similarity(keys, np.asarray(reps_a)[valid], measure)
    sb = pair_similarity(keys, np.asarray(reps_b)[valid], measure)
    agree = np.sign(sa - sb) == np.sign(ia[valid] - ib[valid])
    return float(np.mean(agree))


def sample_triples(users, n_items, n, rng):
    """``n`` (user, a, b) index triples with a != b, drawn uniformly."""
    if n_items < 2:
        raise DomainError("alignment triples need at least two items")
    users = np.asarray(users, dtype=np.int64)
    u = users[rng.integers(len(users), size=n)]
    a = rng.integers(n_items, size=n)
    b = rng.integers(n_items - 1, size=n)
    b = np.where(b >= a, b + 1, b)
    return np.stack([u, a, b], axis=1)
