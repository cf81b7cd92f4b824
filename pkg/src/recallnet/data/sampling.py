import numpy as np

from ..errors import DomainError


def sample_negatives(user, n, rng, universe):
    """Draw up to ``n`` item ids the user has not consumed, uniformly without replacement.

    ``universe`` is the full list of item ids.  When fewer than ``n`` items
    are eligible, all of them are returned (in universe order).
    """
    consumed = set(user.item_ids)
    eligible = [i for i in universe if i not in consumed]
    if not eligible:
        raise DomainError(f"user {user.user_id!r} has consumed every item")
    if len(eligible) <= n:
        return eligible
    picks = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in picks]


class NegativeSampler:
    """Batched index-level negative sampling for training loops.

    Each row gets ``n`` distinct items outside the user's consumed set.
    ``popularity`` switches the proposal from uniform to interaction-count
    weighted.
    """

    def __init__(self, n_items, consumed_lists, popularity=None):
        self.n_items = n_items
        self.consumed = [frozenset(int(x) for x in c) for c in consumed_lists]
        self.cdf = None
        if popularity is not None:
            w = np.asarray(popularity, dtype=np.float64) + 1.0
            self.cdf = np.cumsum(w / w.sum())

    def _propose(self, rng, size):
        if self.cdf is None:
            return rng.integers(0, self.n_items, size=size)
        return np.minimum(np.searchsorted(self.cdf, rng.random(size), side="right"), self.n_items - 1)

    def sample(self, users, n, rng):
        out = np.empty((len(users), n), dtype=np.int64)
        for r, u in enumerate(users):
            consumed = self.consumed[u]
            if self.n_items - len(consumed) < n:
                raise DomainError(f"user {u} has fewer than {n} eligible negatives")
            chosen = []
            while len(chosen) < n:
                for c in self._propose(rng, 2 * n):
                    c = int(c)
                    if c not in consumed and c not in chosen:
                        chosen.append(c)
                        if len(chosen) == n:
                            break
            out[r] = chosen
        return out
