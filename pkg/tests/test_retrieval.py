import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recallnet import _kernels, retrieval
from recallnet.errors import DimensionError, DomainError, FormatError


def naive_topk(ids, reps, key, K, measure):
    """Score everything in Python, sort by (-score, id)."""
    rows = []
    for i, r in zip(ids, reps):
        if measure == "cosine":
            nr, nk = np.linalg.norm(r), np.linalg.norm(key)
            if nr == 0:
                continue
            s = float(np.dot(r / nr, key / nk))
        else:
            s = -float(np.linalg.norm(r - key))
        rows.append((-s, i))
    rows.sort()
    return [i for _, i in rows[:K]]


def random_index(rng, n, d, measure, **kw):
    reps = rng.normal(size=(n, d))
    ids = [f"item{j:04d}" for j in rng.permutation(n)]
    return ids, reps, retrieval.build_index(zip(ids, reps), measure, **kw)


class TestExact:
    def test_hand_cosines(self):
        idx = retrieval.build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [-1.0, 0.0])])
        res = retrieval.query_exact(idx, [1.0, 0.0], 2)
        assert res.ids == ["a", "b"]
        assert res.scores.tolist() == [1.0, 0.0]
        assert res.exact

    def test_k_beyond_size(self):
        idx = retrieval.build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0]), ("c", [-1.0, 0.0])])
        res = retrieval.query_exact(idx, [0.0, 1.0], 10)
        assert len(res) == 3 and list(res.scores) == sorted(res.scores, reverse=True)

    def test_single_item(self):
        idx = retrieval.build_index([("only", [0.3, 0.1])], "euclidean")
        assert retrieval.query(idx, [5.0, 5.0], 1).ids == ["only"]

    @pytest.mark.parametrize("measure", ["cosine", "euclidean"])
    def test_matches_naive_sort(self, measure):
        rng = np.random.default_rng(0)
        ids, reps, idx = random_index(rng, 500, 6, measure)
        for _ in range(20):
            key = rng.normal(size=6)
            assert retrieval.query_exact(idx, key, 10).ids == naive_topk(ids, reps, key, 10, measure)

    def test_ties_break_by_id(self):
        idx = retrieval.build_index([("b", [1.0, 0.0]), ("a", [2.0, 0.0]), ("c", [0.0, 1.0])])
        assert retrieval.query_exact(idx, [1.0, 0.0], 2).ids == ["a", "b"]

    def test_errors(self):
        idx = retrieval.build_index([("a", [1.0, 0.0])])
        with pytest.raises(DimensionError):
            retrieval.query_exact(idx, [1.0, 0.0, 0.0], 1)
        with pytest.raises(DomainError):
            retrieval.query_exact(idx, [0.0, 0.0], 1)
        with pytest.raises(DomainError):
            retrieval.query_exact(idx, [1.0, 0.0], 0)
        with pytest.raises(DomainError):
            retrieval.query_exact(idx, [1.0, 0.0], 1, measure="euclidean")
        with pytest.raises(DomainError):
            retrieval.build_index([("a", [1.0]), ("a", [2.0])])

    def test_zero_items_skipped_under_cosine(self):
        idx = retrieval.build_index([("z", [0.0, 0.0]), ("a", [1.0, 1.0])])
        assert retrieval.query_exact(idx, [1.0, 0.0], 5).ids == ["a"]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 50), st.integers(0, 10**6),
           st.sampled_from(["cosine", "euclidean"]))
    def test_property_matches_oracle(self, n, d, K, seed, measure):
        rng = np.random.default_rng(seed)
        ids, reps, idx = random_index(rng, n, d, measure)
        key = rng.normal(size=d)
        assert retrieval.query_exact(idx, key, K).ids == naive_topk(ids, reps, key, K, measure)


class TestApprox:
    def test_full_budget_is_exact(self):
        rng = np.random.default_rng(1)
        _, _, idx = random_index(rng, 300, 5, "cosine", graph_threshold=0)
        key = rng.normal(size=5)
        assert retrieval.query_approx(idx, key, 10, idx.size).ids == retrieval.query_exact(idx, key, 10).ids

    def test_graph_structure_and_determinism(self):
        rng = np.random.default_rng(2)
        reps = rng.normal(size=(400, 4))
        a = retrieval.build_index(zip(range(400), reps), graph_threshold=0, seed=3)
        b = retrieval.build_index(zip(range(400), reps), graph_threshold=0, seed=3)
        assert np.array_equal(a.neighbors, b.neighbors)
        assert a.neighbors.shape[1] <= retrieval.DEGREE
        assert all(i not in set(row) for i, row in enumerate(a.neighbors))
        key = rng.normal(size=4)
        assert retrieval.query_approx(a, key, 5, 50).ids == retrieval.query_approx(b, key, 5, 50).ids

    def test_budget_monotone(self):
        rng = np.random.default_rng(3)
        _, _, idx = random_index(rng, 500, 4, "euclidean", graph_threshold=0)
        key = rng.normal(size=4)
        exact = set(retrieval.query_exact(idx, key, 10).ids)
        hits = [len(exact & set(retrieval.query_approx(idx, key, 10, b).ids)) for b in (20, 80, 500)]
        assert hits == sorted(hits) and hits[-1] == 10

    def test_without_graph_falls_back(self):
        idx = retrieval.build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0])])
        assert retrieval.query_approx(idx, [1.0, 0.1], 1).exact


class TestFiles:
    @pytest.mark.parametrize("threshold", [0, 10_000])
    def test_round_trip(self, tmp_path, threshold):
        rng = np.random.default_rng(4)
        _, _, idx = random_index(rng, 60, 3, "cosine", graph_threshold=threshold)
        raw = retrieval.save_index(idx, tmp_path / "x.idx")
        back = retrieval.load_index(tmp_path / "x.idx")
        assert retrieval.encode_index(back) == raw
        key = rng.normal(size=3)
        a, b = retrieval.query_exact(idx, key, 7), retrieval.query_exact(back, key, 7)
        assert a.ids == b.ids and np.array_equal(a.scores, b.scores)

    def test_little_endian_layout(self):
        idx = retrieval.build_index([("a", [1.0, 2.0])], "euclidean")
        raw = retrieval.encode_index(idx)
        assert raw[:8] == b"RCLIDX01"
        assert raw[8] == _kernels.MEASURE_EUCLIDEAN
        assert raw[9:17] == (1).to_bytes(8, "little")
        assert np.frombuffer(raw[-25:-9], dtype="<f8").tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("cut", [3, 12, 30, -1])
    def test_truncated(self, tmp_path, cut):
        rng = np.random.default_rng(5)
        _, _, idx = random_index(rng, 30, 3, "cosine", graph_threshold=0)
        raw = retrieval.encode_index(idx)
        with pytest.raises(FormatError):
            retrieval.decode_index(raw[:cut])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            retrieval.decode_index(b"NOTANIDX" + bytes(40))
