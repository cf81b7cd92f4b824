"""Item-representation index with exact and graph-based approximate top-K search.

Items are stored sorted by id, so breaking score ties by row index is the
same as breaking them by ascending id.  Cosine indexes keep unit-normalized
rows for scoring; the raw representations are what gets saved.
"""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionError, DomainError, FormatError
from .numcore.serialize import read_str, read_u64, write_str

log = logging.getLogger(__name__)

MAGIC = b"RCLIDX01"
MEASURE_TAGS = {"cosine": _kernels.MEASURE_COSINE, "euclidean": _kernels.MEASURE_EUCLIDEAN}
GRAPH_THRESHOLD = 10_000
DEGREE = 16
REFINE_ITERATIONS = 10
DEFAULT_BUDGET = 400
N_ENTRY = 8

_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class RetrievalResult:
    ids: list
    scores: np.ndarray
    exact: bool

    def __len__(self):
        return len(self.ids)


class VectorIndex:
    """Immutable id -> representation store.  Build with :func:`build_index`."""

    def __init__(self, ids, reps, measure, neighbors=None, seed=0):
        self.ids = list(ids)
        self.reps = np.array(reps, dtype=np.float64)
        self.reps.setflags(write=False)
        self.measure = measure
        self.seed = int(seed)
        self.neighbors = None if neighbors is None else np.ascontiguousarray(neighbors, dtype=np.int64)
        self._tag = MEASURE_TAGS[measure]
        norms = np.sqrt(np.einsum("ij,ij->i", self.reps, self.reps))
        self.active = np.ones(len(self.ids), dtype=bool)
        if measure == "cosine":
            self.active = norms > 0
            if not self.active.all():
                log.warning("%d zero-norm items are excluded from cosine queries", int((~self.active).sum()))
            self._mat = np.ascontiguousarray(self.reps / np.where(self.active, norms, 1.0)[:, None])
        else:
            self._mat = np.ascontiguousarray(self.reps)
        self._entry = np.random.default_rng([self.seed, 0x1D]).permutation(len(self.ids)).astype(np.int64)

    @property
    def dim(self):
        return self.reps.shape[1]

    @property
    def size(self):
        return len(self.ids)

    @property
    def has_graph(self):
        return self.neighbors is not None

    def _prepare_key(self, key, measure=None):
        if measure is not None and measure != self.measure:
            raise DomainError(f"index was built for {self.measure}, queried with {measure}")
        key = np.asarray(key, dtype=np.float64).reshape(-1)
        if key.shape[0] != self.dim:
            raise DimensionError(f"key has dimension {key.shape[0]}, index has {self.dim}")
        if not np.all(np.isfinite(key)):
            raise DomainError("key has non-finite entries")
        if self.measure == "cosine":
            n = np.sqrt(key @ key)
            if n == 0:
                raise DomainError("cosine query with a zero key")
            key = key / n
        return np.ascontiguousarray(key)

    def _result(self, idx, scores, K, exact):
        keep = self.active[idx]
        idx, scores = idx[keep], scores[keep]
        # stable sort over index-ascending input: ties resolve to the smaller id
        pre = np.argsort(idx, kind="stable")
        idx, scores = idx[pre], scores[pre]
        order = np.argsort(-scores, kind="stable")[:K]
        return RetrievalResult([self.ids[i] for i in idx[order]], scores[order].copy(), exact)


def _check_k(K):
    if int(K) <= 0:
        raise DomainError(f"K must be positive, got {K}")
    return int(K)


def _initial_graph(n, degree, rng):
    out = np.empty((n, degree), dtype=np.int64)
    for i in range(n):
        pick = rng.choice(n - 1, size=degree, replace=False)
        out[i] = np.where(pick >= i, pick + 1, pick)
    return out


def build_graph(mat, measure_tag, degree=DEGREE, iterations=REFINE_ITERATIONS, seed=0):
    n = mat.shape[0]
    if n <= degree + 1:
        # small enough to link every pair
        full = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.int64).reshape(n, n - 1)
        return full
    rng = np.random.default_rng([seed, 0x6A])
    nbrs = _initial_graph(n, degree, rng)
    return _kernels.refine_graph(mat, nbrs, measure_tag, iterations)


def build_index(items, measure="cosine", graph_threshold=GRAPH_THRESHOLD, degree=DEGREE,
                iterations=REFINE_ITERATIONS, seed=0):
    """Index (id, representation) pairs; a neighbour graph is added above ``graph_threshold`` items."""
    if measure not in MEASURE_TAGS:
        raise DomainError(f"unknown measure {measure!r}")
    items = list(items)
    if not items:
        raise DomainError("cannot index an empty item set")
    ids = [str(i) for i, _ in items]
    if len(set(ids)) != len(ids):
        raise DomainError("duplicate item id in index build")
    dims = {np.asarray(r).shape for _, r in items}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionError(f"item representations must share one vector shape, got {sorted(dims)}")
    order = sorted(range(len(ids)), key=ids.__getitem__)
    reps = np.stack([np.asarray(items[i][1], dtype=np.float64) for i in order])
    if not np.all(np.isfinite(reps)):
        raise DomainError("item representations must be finite")
    index = VectorIndex([ids[i] for i in order], reps, measure, seed=seed)
    if index.size > graph_threshold:
        index.neighbors = build_graph(index._mat, index._tag, degree, iterations, seed)
    return index


def query_exact(index, key, K, measure=None):
    K = _check_k(K)
    key = index._prepare_key(key, measure)
    scores = _kernels.score_all(index._mat, key, index._tag)
    return index._result(np.arange(index.size), scores, K, True)


def query_approx(index, key, K, search_budget=DEFAULT_BUDGET, measure=None):
    """Best-first graph search scoring at most ``search_budget`` items."""
    K = _check_k(K)
    if not index.has_graph:
        log.warning("index has no neighbour graph; answering exactly")
        return query_exact(index, key, K, measure)
    key = index._prepare_key(key, measure)
    budget = max(int(search_budget), K)
    idx, scores = _kernels.graph_search(index._mat, index.neighbors, index._entry, key,
                                        index._tag, budget, N_ENTRY)
    return index._result(idx, scores, K, budget >= index.size)


def query(index, key, K, approximate=None, search_budget=DEFAULT_BUDGET):
    """Exact below the graph threshold, approximate when a graph exists (unless overridden)."""
    if approximate is None:
        approximate = index.has_graph
    if approximate:
        return query_approx(index, key, K, search_budget)
    return query_exact(index, key, K)


# --------------------------------------------------------------- file i/o

def encode_index(index):
    buf = bytearray(MAGIC)
    buf += bytes([index._tag])
    buf += _U64.pack(index.size)
    buf += _U64.pack(index.dim)
    for i in index.ids:
        write_str(buf, i)
    buf += np.ascontiguousarray(index.reps, dtype="<f8").tobytes()
    if index.neighbors is None:
        buf += b"\x00"
    else:
        buf += b"\x01"
        buf += _U64.pack(index.neighbors.shape[1])
        buf += _U64.pack(index.seed)
        buf += np.ascontiguousarray(index.neighbors, dtype="<u8").tobytes()
    if index.neighbors is None:
        buf += _U64.pack(index.seed)
    return bytes(buf)


def decode_index(raw):
    view = memoryview(raw)
    if len(view) < 9 or bytes(view[:8]) != MAGIC:
        raise FormatError("not a recallnet index file (bad magic or version)")
    tags = {v: k for k, v in MEASURE_TAGS.items()}
    if view[8] not in tags:
        raise FormatError(f"unknown measure tag {view[8]}")
    measure = tags[view[8]]
    n, pos = read_u64(view, 9)
    d, pos = read_u64(view, pos)
    ids = []
    for _ in range(n):
        s, pos = read_str(view, pos)
        ids.append(s)
    nbytes = 8 * n * d
    if pos + nbytes + 1 > len(view):
        raise FormatError("truncated representation matrix")
    reps = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(n, d)
    pos += nbytes
    flag = view[pos]
    pos += 1
    neighbors = None
    if flag == 1:
        r, pos = read_u64(view, pos)
        seed, pos = read_u64(view, pos)
        nb = 8 * n * r
        if pos + nb > len(view):
            raise FormatError("truncated adjacency section")
        neighbors = np.frombuffer(view[pos:pos + nb], dtype="<u8").astype(np.int64).reshape(n, r)
        pos += nb
    elif flag == 0:
        seed, pos = read_u64(view, pos)
    else:
        raise FormatError("bad adjacency flag")
    if pos != len(view):
        raise FormatError("trailing bytes in index file")
    if neighbors is not None and neighbors.size and (neighbors.max() >= n):
        raise FormatError("adjacency refers to a missing row")
    return VectorIndex(ids, reps, measure, neighbors, seed)


def save_index(index, path):
    raw = encode_index(index)
    with open(path, "wb") as fh:
        fh.write(raw)
    return raw


def load_index(path):
    with open(path, "rb") as fh:
        return decode_index(fh.read())
