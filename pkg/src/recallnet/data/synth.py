"""Planted-topic corpora for tests and experiments.

Items belong to a topic (and a facet within it) and draw their words mostly
from that topic's block of the vocabulary.  Users pick one or two topics,
a preferred facet in each, and consume items mostly from those.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DomainError
from .corpus import Corpus, ItemRecord, UserHistory, tokenize


@dataclass(frozen=True)
class SynthConfig:
    n_topics: int = 8
    items_per_topic: int = 250
    n_users: int = 500
    history_len: int = 20
    vocab_size: int = 1200
    min_words: int = 6
    max_words: int = 12
    purity: float = 0.9
    facets: int = 4
    facet_focus: float = 0.7
    topic_word_share: float = 0.7
    facet_word_share: float = 0.6
    background_share: float = 0.2
    two_topic_prob: float = 0.5
    word_dim: int = 32
    word_noise: float = 8.0

    def validate(self):
        ints = {
            "n_topics": self.n_topics, "items_per_topic": self.items_per_topic,
            "n_users": self.n_users, "history_len": self.history_len,
            "vocab_size": self.vocab_size, "min_words": self.min_words,
            "facets": self.facets, "word_dim": self.word_dim,
        }
        for k, v in ints.items():
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise DomainError(f"{k} must be a positive integer, got {v!r}")
        if self.max_words < self.min_words:
            raise DomainError("max_words must be >= min_words")
        if not 0.0 < self.purity <= 1.0:
            raise DomainError(f"purity must lie in (0, 1], got {self.purity}")
        for k in ("facet_focus", "topic_word_share", "facet_word_share", "two_topic_prob"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{k} must lie in [0, 1], got {v}")
        if not 0.0 <= self.background_share < 1.0:
            raise DomainError("background_share must lie in [0, 1)")
        if self.word_noise < 0:
            raise DomainError("word_noise must be non-negative")
        n_items = self.n_topics * self.items_per_topic
        if self.history_len > n_items:
            raise DomainError("history_len exceeds the number of items")
        if self.facets > self.items_per_topic:
            raise DomainError("more facets than items per topic")
        blocks = self.n_topics * self.facets
        if self.vocab_size - int(self.vocab_size * self.background_share) < blocks:
            raise DomainError("vocabulary too small for the topic/facet blocks")

    @property
    def n_items(self):
        return self.n_topics * self.items_per_topic


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    item_topic: np.ndarray
    item_facet: np.ndarray
    user_topics: list
    word_vectors: dict
    config: SynthConfig


def _zipf_weights(n, s=0.8):
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def _word(i):
    return f"w{i:05d}"


def generate_synthetic(config=SynthConfig(), seed=0):
    config.validate()
    rng = np.random.default_rng([seed, 0x5EED])
    T, F = config.n_topics, config.facets
    n_bg = int(config.vocab_size * config.background_share)
    n_blocks = T * F
    per_block = (config.vocab_size - n_bg) // n_blocks
    bg_words = np.arange(n_bg)
    block_words = n_bg + np.arange(n_blocks * per_block).reshape(T, F, per_block)
    bg_p = _zipf_weights(n_bg) if n_bg else None
    blk_p = _zipf_weights(per_block)

    # word vectors: topic centre + facet offset + noise; background words are pure noise
    centres = rng.normal(size=(T, config.word_dim))
    offsets = 0.5 * rng.normal(size=(T, F, config.word_dim))
    n_words = n_bg + n_blocks * per_block
    vecs = np.empty((n_words, config.word_dim))
    vecs[:n_bg] = config.word_noise * rng.normal(size=(n_bg, config.word_dim))
    for t in range(T):
        for f in range(F):
            ws = block_words[t, f]
            vecs[ws] = centres[t] + offsets[t, f] + config.word_noise * rng.normal(size=(per_block, config.word_dim))

    items, item_topic, item_facet = [], [], []
    for t in range(T):
        for j in range(config.items_per_topic):
            f = j % F
            n = int(rng.integers(config.min_words, config.max_words + 1))
            words = []
            for _ in range(n):
                if n_bg and rng.random() >= config.topic_word_share:
                    words.append(int(rng.choice(bg_words, p=bg_p)))
                    continue
                ff = f if rng.random() < config.facet_word_share else int(rng.integers(F))
                words.append(int(rng.choice(block_words[t, ff], p=blk_p)))
            text = " ".join(_word(w) for w in words)
            items.append(ItemRecord(f"i{len(items):05d}", text, tokenize(text)))
            item_topic.append(t)
            item_facet.append(f)
    item_topic = np.array(item_topic)
    item_facet = np.array(item_facet)
    members = {(t, f): np.flatnonzero((item_topic == t) & (item_facet == f)) for t in range(T) for f in range(F)}
    by_topic = {t: np.flatnonzero(item_topic == t) for t in range(T)}
    n_items = len(items)

    users, user_topics = [], []
    for u in range(config.n_users):
        k = 2 if (T > 1 and rng.random() < config.two_topic_prob) else 1
        topics = rng.choice(T, size=k, replace=False)
        weights = rng.dirichlet(np.full(k, 4.0)) if k > 1 else np.ones(1)
        facets = rng.integers(F, size=k)
        hist, intents = [], []
        taken = set()
        while len(hist) < config.history_len:
            if rng.random() < config.purity:
                c = int(rng.choice(k, p=weights))
                t = int(topics[c])
                pool = members[(t, int(facets[c]))] if rng.random() < config.facet_focus else by_topic[t]
                v = int(rng.choice(pool))
            else:
                v = int(rng.integers(n_items))
            if v in taken:
                continue
            taken.add(v)
            hist.append(items[v].item_id)
            intents.append(f"topic{item_topic[v]}")
        users.append(UserHistory(f"u{u:05d}", tuple(hist), tuple(intents)))
        user_topics.append(tuple(int(t) for t in topics))

    word_vectors = {_word(i): vecs[i] for i in range(n_words)}
    return SyntheticCorpus(Corpus(items, users), item_topic, item_facet, user_topics, word_vectors, config)


def write_synthetic(synth, out_dir):
    """Write items.jsonl, users.jsonl, labels.jsonl, words.tsv and synth_config.json under ``out_dir``."""
    from pathlib import Path

    from .corpus import write_corpus

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(synth.corpus, out / "items.jsonl", out / "users.jsonl")
    with open(out / "labels.jsonl", "w", encoding="utf-8") as fh:
        for it, t in zip(synth.corpus.items, synth.item_topic):
            fh.write(json.dumps({"item": it.item_id, "topic": int(t)}) + "\n")
    words = sorted(synth.word_vectors)
    with open(out / "words.tsv", "w", encoding="utf-8") as fh:
        for w in words:
            fh.write(w + "\t" + " ".join(repr(float(x)) for x in synth.word_vectors[w]) + "\n")
    with open(out / "synth_config.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(synth.config), fh, sort_keys=True, indent=1)
    return out


def read_labels(path):
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                labels[rec["item"]] = int(rec["topic"])
    return labels


def read_word_vectors(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                word, vals = line.rstrip("\n").split("\t")
                out[word] = np.array([float(x) for x in vals.split()])
    return out


def label_oracle_scores(split, item_topic):
    """Topic-label retrieval scores: share of the user's training history in each item's topic."""
    T = int(item_topic.max()) + 1
    scores = np.zeros((split.corpus.n_users, len(item_topic)))
    for u, hist in enumerate(split.train):
        share = np.bincount(item_topic[hist], minlength=T) / max(len(hist), 1)
        scores[u] = share[item_topic]
    return scores
