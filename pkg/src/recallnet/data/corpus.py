import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, ParseError

log = logging.getLogger(__name__)

MAX_TOKENS = 30
MAX_HISTORY = 50
OOV = 0

_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text, max_tokens=MAX_TOKENS):
    """Lowercase, split on non-alphanumeric runs, clip to ``max_tokens``."""
    return tuple(t for t in _SPLIT.split(text.lower()) if t)[:max_tokens]


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    text: str
    words: tuple


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    item_ids: tuple
    intents: tuple = None


@dataclass
class Corpus:
    items: list
    users: list
    dropped: int = 0
    item_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.item_index = {it.item_id: i for i, it in enumerate(self.items)}
        if len(self.item_index) != len(self.items):
            raise DomainError("duplicate item id in corpus")

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_users(self):
        return len(self.users)


class Vocabulary:
    """Token -> index map; index 0 is reserved for out-of-vocabulary tokens."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i + 1 for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens) + 1

    def encode(self, words):
        return np.array([self.index.get(w, OOV) for w in words], dtype=np.int64)


def build_vocab(corpus, min_freq=1):
    if min_freq < 1:
        raise DomainError("min_freq must be >= 1")
    counts = Counter(w for it in corpus.items for w in it.words)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", path, lineno)
            yield lineno, obj


def load_corpus(items_path, users_path, max_tokens=MAX_TOKENS):
    """Read the two JSON-lines files.

    History entries naming unknown items are dropped; the number dropped is
    kept in ``Corpus.dropped`` and logged.  Users left with no history are
    dropped too.
    """
    items = []
    seen = set()
    for lineno, obj in _read_jsonl(items_path):
        iid, text = obj.get("item"), obj.get("text")
        if not isinstance(iid, str) or not isinstance(text, str):
            raise ParseError('item lines need string fields "item" and "text"', items_path, lineno)
        if iid in seen:
            raise ParseError(f"duplicate item id {iid!r}", items_path, lineno)
        words = tokenize(text, max_tokens)
        if not words:
            raise ParseError(f"item {iid!r} has no tokens", items_path, lineno)
        seen.add(iid)
        items.append(ItemRecord(iid, text, words))

    users = []
    dropped = 0
    for lineno, obj in _read_jsonl(users_path):
        uid, hist = obj.get("user"), obj.get("items")
        intents = obj.get("intents")
        if not isinstance(uid, str) or not isinstance(hist, list) or not all(isinstance(h, str) for h in hist):
            raise ParseError('user lines need "user" (string) and "items" (list of strings)', users_path, lineno)
        if intents is not None:
            if not isinstance(intents, list) or len(intents) != len(hist):
                raise ParseError('"intents" must be a list as long as "items"', users_path, lineno)
            intents = [str(x) for x in intents]
        keep = [i for i, h in enumerate(hist) if h in seen]
        dropped += len(hist) - len(keep)
        if not keep:
            continue
        users.append(UserHistory(
            uid,
            tuple(hist[i] for i in keep),
            None if intents is None else tuple(intents[i] for i in keep),
        ))
    if not items or not users:
        raise DomainError("empty corpus")
    if dropped:
        log.warning("dropped %d interactions referencing unknown items", dropped)
    return Corpus(items, users, dropped)


def write_corpus(corpus, items_path, users_path):
    with open(items_path, "w", encoding="utf-8") as fh:
        for it in corpus.items:
            fh.write(json.dumps({"item": it.item_id, "text": it.text}, ensure_ascii=False) + "\n")
    with open(users_path, "w", encoding="utf-8") as fh:
        for u in corpus.users:
            rec = {"user": u.user_id, "items": list(u.item_ids)}
            if u.intents is not None:
                rec["intents"] = list(u.intents)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class IndexedCorpus:
    """Array view of a corpus for the encoders.

    ``tokens`` is (n_items, max_len) padded with zeros; ``lengths`` gives the
    real length of each row.  Histories and intents are index arrays.
    """

    item_ids: list
    tokens: np.ndarray
    lengths: np.ndarray
    user_ids: list
    histories: list
    intents: list
    intent_names: list
    vocab_size: int

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def has_intents(self):
        return self.intents is not None


def index_corpus(corpus, vocab):
    n = corpus.n_items
    width = max(len(it.words) for it in corpus.items)
    tokens = np.zeros((n, width), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, it in enumerate(corpus.items):
        ids = vocab.encode(it.words)
        tokens[i, :len(ids)] = ids
        lengths[i] = len(ids)
    histories = [np.array([corpus.item_index[h] for h in u.item_ids], dtype=np.int64) for u in corpus.users]
    intents = intent_names = None
    if all(u.intents is not None for u in corpus.users):
        # index 0 is the unknown-intent row
        intent_names = sorted({x for u in corpus.users for x in u.intents})
        lut = {name: i + 1 for i, name in enumerate(intent_names)}
        intents = [np.array([lut[x] for x in u.intents], dtype=np.int64) for u in corpus.users]
    return IndexedCorpus(
        item_ids=[it.item_id for it in corpus.items],
        tokens=tokens,
        lengths=lengths,
        user_ids=[u.user_id for u in corpus.users],
        histories=histories,
        intents=intents,
        intent_names=intent_names,
        vocab_size=len(vocab),
    )
