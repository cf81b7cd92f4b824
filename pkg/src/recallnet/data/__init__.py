"""Corpus ingestion, vocabulary, splitting, negative sampling and synthetic data."""
from .corpus import (
    MAX_HISTORY, MAX_TOKENS, OOV, Corpus, IndexedCorpus, ItemRecord, UserHistory,
    Vocabulary, build_vocab, index_corpus, load_corpus, tokenize, write_corpus,
)
from .sampling import NegativeSampler, sample_negatives
from .split import SplitCorpus, history_window, pad_histories, split_leave_last
from .synth import (
    SynthConfig, SyntheticCorpus, generate_synthetic, label_oracle_scores,
    read_labels, read_word_vectors, write_synthetic,
)

__all__ = [
    "MAX_HISTORY", "MAX_TOKENS", "OOV", "Corpus", "IndexedCorpus", "ItemRecord",
    "UserHistory", "Vocabulary", "build_vocab", "index_corpus", "load_corpus",
    "tokenize", "write_corpus", "NegativeSampler", "sample_negatives", "SplitCorpus",
    "history_window", "pad_histories", "split_leave_last", "SynthConfig",
    "SyntheticCorpus", "generate_synthetic", "label_oracle_scores", "read_labels",
    "read_word_vectors", "write_synthetic",
]
