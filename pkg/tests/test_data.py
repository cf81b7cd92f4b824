import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recallnet.data import (
    OOV, Corpus, ItemRecord, NegativeSampler, SynthConfig, UserHistory, build_vocab,
    generate_synthetic, history_window, index_corpus, label_oracle_scores, load_corpus,
    pad_histories, read_labels, read_word_vectors, sample_negatives, split_leave_last, tokenize,
    write_corpus, write_synthetic,
)
from recallnet.errors import DomainError, ParseError


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def small_corpus(histories, n_items=None):
    n_items = n_items or 1 + max(max(h) for h in histories)
    items = [ItemRecord(f"i{i}", f"tok{i} shared", (f"tok{i}", "shared")) for i in range(n_items)]
    users = [UserHistory(f"u{u}", tuple(f"i{i}" for i in h)) for u, h in enumerate(histories)]
    return Corpus(items, users)


class TestLoad:
    def test_single_item_single_user(self, tmp_path):
        write_jsonl(tmp_path / "items.jsonl", [{"item": "a", "text": "Hello world"}])
        write_jsonl(tmp_path / "users.jsonl", [{"user": "u", "items": ["a"]}])
        c = load_corpus(tmp_path / "items.jsonl", tmp_path / "users.jsonl")
        assert (c.n_items, c.n_users) == (1, 1)
        assert c.items[0].words == ("hello", "world")

    def test_missing_item_is_dropped_and_counted(self, tmp_path, caplog):
        write_jsonl(tmp_path / "items.jsonl", [{"item": "a", "text": "x"}])
        write_jsonl(tmp_path / "users.jsonl", [{"user": "u", "items": ["a", "ghost"]}])
        with caplog.at_level(logging.WARNING):
            c = load_corpus(tmp_path / "items.jsonl", tmp_path / "users.jsonl")
        assert c.dropped == 1
        assert c.users[0].item_ids == ("a",)
        assert any("dropped 1" in r.message for r in caplog.records)

    def test_bad_line_reports_location(self, tmp_path):
        (tmp_path / "items.jsonl").write_text('{"item": "a", "text": "x"}\n{not json\n')
        write_jsonl(tmp_path / "users.jsonl", [{"user": "u", "items": ["a"]}])
        with pytest.raises(ParseError) as info:
            load_corpus(tmp_path / "items.jsonl", tmp_path / "users.jsonl")
        assert info.value.line == 2

    def test_duplicate_item_rejected(self, tmp_path):
        write_jsonl(tmp_path / "items.jsonl", [{"item": "a", "text": "x"}, {"item": "a", "text": "y"}])
        write_jsonl(tmp_path / "users.jsonl", [{"user": "u", "items": ["a"]}])
        with pytest.raises(ParseError):
            load_corpus(tmp_path / "items.jsonl", tmp_path / "users.jsonl")

    def test_intents_must_match_history_length(self, tmp_path):
        write_jsonl(tmp_path / "items.jsonl", [{"item": "a", "text": "x"}])
        write_jsonl(tmp_path / "users.jsonl", [{"user": "u", "items": ["a"], "intents": ["p", "q"]}])
        with pytest.raises(ParseError):
            load_corpus(tmp_path / "items.jsonl", tmp_path / "users.jsonl")

    def test_round_trip_synthetic(self, tmp_path):
        syn = generate_synthetic(SynthConfig(n_users=100, items_per_topic=30), seed=4)
        write_corpus(syn.corpus, tmp_path / "i.jsonl", tmp_path / "u.jsonl")
        back = load_corpus(tmp_path / "i.jsonl", tmp_path / "u.jsonl")
        assert [it.words for it in back.items] == [it.words for it in syn.corpus.items]
        assert [u.item_ids for u in back.users] == [u.item_ids for u in syn.corpus.users]
        assert [u.intents for u in back.users] == [u.intents for u in syn.corpus.users]

    def test_tokenize_clips(self):
        assert tokenize("A-b  C!", max_tokens=2) == ("a", "b")


class TestVocab:
    def test_rare_tokens_map_to_oov(self):
        c = small_corpus([[0, 1]])
        vocab = build_vocab(Corpus(c.items[:1], c.users[:0]), min_freq=2)
        assert list(vocab.encode(("tok0", "shared"))) == [OOV, OOV]

    def test_size_is_distinct_plus_one(self):
        c = small_corpus([[0, 1, 2]])
        assert len(build_vocab(c, 1)) == 3 + 1 + 1

    def test_head_ids_stable_across_runs(self):
        a = build_vocab(generate_synthetic(SynthConfig(n_users=20), seed=1).corpus)
        b = build_vocab(generate_synthetic(SynthConfig(n_users=20), seed=1).corpus)
        assert a.tokens[:50] == b.tokens[:50]


class TestSplit:
    def test_leave_last(self):
        ic = index_corpus(small_corpus([[0, 1, 2]]), build_vocab(small_corpus([[0, 1, 2]])))
        s = split_leave_last(ic, 1)
        assert list(s.train[0]) == [0, 1] and list(s.test[0]) == [2]

    def test_short_user_excluded(self):
        c = small_corpus([[0, 1], [0, 1, 2]])
        s = split_leave_last(index_corpus(c, build_vocab(c)), 2)
        assert list(s.eval_users) == [1]
        assert len(s.test[0]) == 0

    def test_no_leakage_on_synthetic(self):
        syn = generate_synthetic(SynthConfig(), seed=0)
        ic = index_corpus(syn.corpus, build_vocab(syn.corpus))
        s = split_leave_last(ic, 2)
        for u in s.eval_users:
            assert not set(s.test[u]) & set(s.train[u])

    def test_windows_and_padding(self):
        h = np.arange(10)
        assert list(history_window(h, 6, 3)) == [3, 4, 5]
        out, mask = pad_histories([np.array([1, 2]), np.array([3])])
        assert out.tolist() == [[1, 2], [3, 0]]
        assert mask.tolist() == [[True, True], [True, False]]


class TestNegatives:
    def test_only_option(self):
        u = UserHistory("u", ("a",))
        got = sample_negatives(u, 2, np.random.default_rng(0), ["a", "b", "c"])
        assert sorted(got) == ["b", "c"]

    def test_seeded(self):
        u = UserHistory("u", ("a",))
        uni = [f"i{i}" for i in range(50)]
        a = sample_negatives(u, 5, np.random.default_rng(3), uni)
        b = sample_negatives(u, 5, np.random.default_rng(3), uni)
        assert a == b

    def test_everything_consumed(self):
        with pytest.raises(DomainError):
            sample_negatives(UserHistory("u", ("a",)), 1, np.random.default_rng(0), ["a"])

    def test_uniform_frequencies(self):
        uni = [f"i{i}" for i in range(10)]
        u = UserHistory("u", ("i0", "i1"))
        rng = np.random.default_rng(7)
        counts = dict.fromkeys(uni[2:], 0)
        draws = 10_000
        for _ in range(draws):
            counts[sample_negatives(u, 1, rng, uni)[0]] += 1
        p = 1 / 8
        sigma = np.sqrt(draws * p * (1 - p))
        assert all(abs(c - draws * p) <= 3 * sigma for c in counts.values())

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 19), min_size=1, max_size=15), st.integers(1, 5), st.integers(0, 10**6))
    def test_batched_sampler_excludes_consumed(self, consumed, n, seed):
        s = NegativeSampler(20, [consumed])
        out = s.sample([0], n, np.random.default_rng(seed))
        assert len(set(out[0])) == n
        assert not set(out[0].tolist()) & set(consumed)

    def test_popularity_proposal(self):
        s = NegativeSampler(5, [[0]], popularity=[0, 0, 0, 0, 1000])
        out = s.sample([0] * 200, 1, np.random.default_rng(0))
        assert np.mean(out == 4) > 0.9


class TestSynthetic:
    def test_default_sizes(self):
        syn = generate_synthetic(SynthConfig(), seed=0)
        assert (syn.corpus.n_items, syn.corpus.n_users) == (2000, 500)

    def test_purity_checked(self):
        with pytest.raises(DomainError):
            generate_synthetic(SynthConfig(purity=0.0))
        with pytest.raises(DomainError):
            generate_synthetic(SynthConfig(purity=1.2))

    def test_single_topic_ideal_set_is_everything(self):
        syn = generate_synthetic(SynthConfig(n_topics=1, purity=1.0, items_per_topic=40, n_users=5,
                                             history_len=5, vocab_size=200), seed=0)
        assert set(syn.item_topic) == {0}

    def test_label_oracle_perfect_at_topic_size(self):
        cfg = SynthConfig(purity=1.0, two_topic_prob=0.0, n_users=60)
        syn = generate_synthetic(cfg, seed=2)
        ic = index_corpus(syn.corpus, build_vocab(syn.corpus))
        split = split_leave_last(ic, 1)
        scores = label_oracle_scores(split, syn.item_topic)
        for u in split.eval_users:
            top = np.argsort(-scores[u], kind="stable")[:cfg.items_per_topic]
            assert split.test[u][0] in top

    def test_intents_are_topic_labels(self):
        syn = generate_synthetic(SynthConfig(n_users=20), seed=0)
        for u in syn.corpus.users:
            for iid, intent in zip(u.item_ids, u.intents):
                assert intent == f"topic{syn.item_topic[syn.corpus.item_index[iid]]}"

    def test_files_byte_identical(self, tmp_path):
        cfg = SynthConfig(n_users=30, items_per_topic=20)
        for d in ("a", "b"):
            write_synthetic(generate_synthetic(cfg, seed=9), tmp_path / d)
        for name in ("items.jsonl", "users.jsonl", "labels.jsonl", "words.tsv", "synth_config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        labels = read_labels(tmp_path / "a" / "labels.jsonl")
        assert len(labels) == 160
        vecs = read_word_vectors(tmp_path / "a" / "words.tsv")
        syn = generate_synthetic(cfg, seed=9)
        w = next(iter(syn.word_vectors))
        assert np.array_equal(vecs[w], syn.word_vectors[w])
