from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from .corpus import MAX_HISTORY


@dataclass
class SplitCorpus:
    """Leave-last-n split over an :class:`IndexedCorpus`.

    ``train[u]`` holds the chronological training items of user ``u`` and
    ``test[u]`` the held-out tail (empty for users excluded from evaluation).
    """

    corpus: object
    n_test: int
    train: list
    test: list
    train_intents: list
    test_intents: list
    eval_users: np.ndarray

    @property
    def cutoffs(self):
        return np.array([len(t) for t in self.train], dtype=np.int64)

    def consumed(self, u):
        return self.train[u]

    def training_interactions(self):
        """(user, position) pairs whose target has at least one prior item."""
        pairs = [(u, t) for u, hist in enumerate(self.train) for t in range(1, len(hist))]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def test_interactions(self):
        """(user, test item, intent) for every evaluated user's held-out items."""
        rows = []
        for u in self.eval_users:
            intents = self.test_intents[u] if self.test_intents is not None else None
            for j, v in enumerate(self.test[u]):
                rows.append((int(u), int(v), 0 if intents is None else int(intents[j])))
        return rows


def split_leave_last(corpus, n_test=1):
    if n_test <= 0:
        raise DomainError("n_test must be positive")
    train, test, tr_int, te_int, eval_users = [], [], [], [], []
    has_int = corpus.intents is not None
    for u, hist in enumerate(corpus.histories):
        if len(hist) >= n_test + 1:
            train.append(hist[:-n_test])
            test.append(hist[-n_test:])
            eval_users.append(u)
            if has_int:
                tr_int.append(corpus.intents[u][:-n_test])
                te_int.append(corpus.intents[u][-n_test:])
        else:
            train.append(hist)
            test.append(hist[:0])
            if has_int:
                tr_int.append(corpus.intents[u])
                te_int.append(corpus.intents[u][:0])
    return SplitCorpus(
        corpus=corpus,
        n_test=n_test,
        train=train,
        test=test,
        train_intents=tr_int if has_int else None,
        test_intents=te_int if has_int else None,
        eval_users=np.array(eval_users, dtype=np.int64),
    )


def history_window(hist, end, max_history=MAX_HISTORY):
    """The most recent ``max_history`` items strictly before position ``end``."""
    return hist[max(0, end - max_history):end]


def pad_histories(windows):
    """Stack variable-length index arrays into (B, H) plus a validity mask."""
    width = max(len(w) for w in windows)
    out = np.zeros((len(windows), width), dtype=np.int64)
    mask = np.zeros((len(windows), width), dtype=bool)
    for i, w in enumerate(windows):
        out[i, :len(w)] = w
        mask[i, :len(w)] = True
    return out, mask
