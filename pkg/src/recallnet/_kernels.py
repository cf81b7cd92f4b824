"""Hot loops used by the autograd engine and the vector index.

Each kernel has a numba-compiled path and a pure-numpy/Python fallback.  The
numba path is used when numba imports cleanly and ``RECALLNET_NUMBA`` is not
set to ``0``.  Both paths implement the same arithmetic in the same order, so
results agree bit-for-bit on everything the test-suite checks.
"""
import heapq
import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    njit = None

USE_NUMBA = njit is not None and os.environ.get("RECALLNET_NUMBA", "1") != "0"

MEASURE_COSINE = 0
MEASURE_EUCLIDEAN = 1


# ---------------------------------------------------------------- scatter add

def _scatter_add_rows_np(target, idx, values):
    np.add.at(target, idx, values)


def _scatter_add_rows_loop(target, idx, values):
    n, d = values.shape
    for i in range(n):
        r = idx[i]
        for j in range(d):
            target[r, j] += values[i, j]


# ------------------------------------------------------------- scoring scan

def _score_all_np(mat, key, measure):
    if measure == MEASURE_COSINE:
        return mat @ key
    diff = mat - key
    return -np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _score_all_loop(mat, key, measure):
    n, d = mat.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        if measure == MEASURE_COSINE:
            for j in range(d):
                acc += mat[i, j] * key[j]
            out[i] = acc
        else:
            for j in range(d):
                t = mat[i, j] - key[j]
                acc += t * t
            out[i] = -np.sqrt(acc)
    return out


# ----------------------------------------------------- neighbour refinement

def _pair_score(mat, i, j, measure):
    acc = 0.0
    d = mat.shape[1]
    if measure == MEASURE_COSINE:
        for t in range(d):
            acc += mat[i, t] * mat[j, t]
        return acc
    for t in range(d):
        diff = mat[i, t] - mat[j, t]
        acc += diff * diff
    return -np.sqrt(acc)


def _refine_graph_loop(mat, nbrs, measure, iterations):
    """Neighbour-of-neighbour refinement of a fixed-degree graph.

    Each round, node i's candidates are its current neighbours plus their
    neighbours; the best R (score desc, index asc) are kept.  Rounds are
    synchronous: all nodes read the previous round's lists.
    """
    n, r = nbrs.shape
    width = r + r * r
    cand = np.empty(width, dtype=np.int64)
    cscore = np.empty(width)
    for _ in range(iterations):
        new = np.empty_like(nbrs)
        for i in range(n):
            m = 0
            for a in range(r):
                j = nbrs[i, a]
                cand[m] = j
                m += 1
                for b in range(r):
                    cand[m] = nbrs[j, b]
                    m += 1
            cs = np.sort(cand[:m])
            u = 0
            prev = -1
            for a in range(m):
                c = cs[a]
                if c != prev and c != i:
                    cand[u] = c
                    cscore[u] = _pair_score(mat, i, c, measure)
                    u += 1
                prev = c
            # stable selection: score descending, index ascending
            order = np.argsort(-cscore[:u], kind="mergesort")
            for a in range(r):
                new[i, a] = cand[order[a]]
        nbrs = new
    return nbrs


def _refine_graph_np(mat, nbrs, measure, iterations):
    n, r = nbrs.shape
    rows = np.arange(n)[:, None]
    for _ in range(iterations):
        two_hop = nbrs[nbrs].reshape(n, r * r)
        cand = np.sort(np.concatenate([nbrs, two_hop], axis=1), axis=1)
        dup = np.zeros(cand.shape, dtype=bool)
        dup[:, 1:] = cand[:, 1:] == cand[:, :-1]
        bad = dup | (cand == rows)
        if measure == MEASURE_COSINE:
            sc = np.einsum("id,ikd->ik", mat, mat[cand])
        else:
            diff = mat[cand] - mat[:, None, :]
            sc = -np.sqrt(np.einsum("ikd,ikd->ik", diff, diff))
        sc = np.where(bad, -np.inf, sc)
        # candidates are index-sorted, so a stable sort on -score breaks ties by index
        order = np.argsort(-sc, axis=1, kind="stable")[:, :r]
        nbrs = np.take_along_axis(cand, order, axis=1)
    return nbrs


# --------------------------------------------------------- best-first search

def _heap_push(hs, hi, size, s, i):
    # max-heap on (score, -index)
    k = size
    hs[k] = s
    hi[k] = i
    while k > 0:
        p = (k - 1) // 2
        if hs[p] > hs[k] or (hs[p] == hs[k] and hi[p] < hi[k]):
            break
        hs[p], hs[k] = hs[k], hs[p]
        hi[p], hi[k] = hi[k], hi[p]
        k = p
    return size + 1


def _heap_pop(hs, hi, size):
    s = hs[0]
    i = hi[0]
    size -= 1
    hs[0] = hs[size]
    hi[0] = hi[size]
    k = 0
    while True:
        a = 2 * k + 1
        b = a + 1
        best = k
        if a < size and (hs[a] > hs[best] or (hs[a] == hs[best] and hi[a] < hi[best])):
            best = a
        if b < size and (hs[b] > hs[best] or (hs[b] == hs[best] and hi[b] < hi[best])):
            best = b
        if best == k:
            break
        hs[best], hs[k] = hs[k], hs[best]
        hi[best], hi[k] = hi[k], hi[best]
        k = best
    return s, i, size


def _key_score(mat, i, key, measure):
    acc = 0.0
    d = mat.shape[1]
    if measure == MEASURE_COSINE:
        for t in range(d):
            acc += mat[i, t] * key[t]
        return acc
    for t in range(d):
        diff = mat[i, t] - key[t]
        acc += diff * diff
    return -np.sqrt(acc)


def _graph_search_loop(mat, nbrs, entry_order, key, measure, budget, n_entry):
    """Best-first expansion until ``budget`` nodes have been scored.

    The expansion order does not depend on the budget, so a larger budget
    scores a superset of nodes.  When the frontier empties, the next unvisited
    node of ``entry_order`` is scored and expansion resumes from it; with
    budget >= n every node is scored.
    """
    n, r = nbrs.shape
    budget = min(budget, n)
    visited = np.zeros(n, dtype=np.bool_)
    scored_idx = np.empty(budget, dtype=np.int64)
    scored = np.empty(budget)
    hs = np.empty(budget)
    hi = np.empty(budget, dtype=np.int64)
    size = 0
    count = 0
    cursor = 0
    while count < budget and cursor < n and count < n_entry:
        e = entry_order[cursor]
        cursor += 1
        if not visited[e]:
            visited[e] = True
            s = _key_score(mat, e, key, measure)
            scored_idx[count] = e
            scored[count] = s
            count += 1
            size = _heap_push(hs, hi, size, s, e)
    while count < budget:
        if size == 0:
            while cursor < n and visited[entry_order[cursor]]:
                cursor += 1
            if cursor >= n:
                break
            e = entry_order[cursor]
            cursor += 1
            visited[e] = True
            s = _key_score(mat, e, key, measure)
            scored_idx[count] = e
            scored[count] = s
            count += 1
            size = _heap_push(hs, hi, size, s, e)
            continue
        _, cur, size = _heap_pop(hs, hi, size)
        for a in range(r):
            j = nbrs[cur, a]
            if visited[j]:
                continue
            visited[j] = True
            s = _key_score(mat, j, key, measure)
            scored_idx[count] = j
            scored[count] = s
            count += 1
            size = _heap_push(hs, hi, size, s, j)
            if count >= budget:
                break
    return scored_idx[:count], scored[:count]


def _graph_search_py(mat, nbrs, entry_order, key, measure, budget, n_entry):
    # heapq twin of _graph_search_loop; identical visiting order
    n, r = nbrs.shape
    budget = min(budget, n)

    def score(i):
        return float(_score_all_np(mat[i:i + 1], key, measure)[0])

    visited = np.zeros(n, dtype=bool)
    out_i, out_s, heap = [], [], []
    cursor = 0

    def visit(i):
        visited[i] = True
        s = score(i)
        out_i.append(i)
        out_s.append(s)
        heapq.heappush(heap, (-s, i))

    while len(out_i) < budget and cursor < n and len(out_i) < n_entry:
        e = int(entry_order[cursor])
        cursor += 1
        if not visited[e]:
            visit(e)
    while len(out_i) < budget:
        if not heap:
            while cursor < n and visited[entry_order[cursor]]:
                cursor += 1
            if cursor >= n:
                break
            visit(int(entry_order[cursor]))
            cursor += 1
            continue
        _, cur = heapq.heappop(heap)
        for j in nbrs[cur]:
            j = int(j)
            if visited[j]:
                continue
            visit(j)
            if len(out_i) >= budget:
                break
    return np.asarray(out_i, dtype=np.int64), np.asarray(out_s, dtype=np.float64)


if USE_NUMBA:
    scatter_add_rows = njit(cache=True)(_scatter_add_rows_loop)
    score_all = njit(cache=True)(_score_all_loop)
    _pair_score = njit(cache=True, inline="always")(_pair_score)
    _refine_graph_loop = njit(cache=True)(_refine_graph_loop)
    refine_graph = _refine_graph_loop
    _heap_push = njit(cache=True)(_heap_push)
    _heap_pop = njit(cache=True)(_heap_pop)
    _key_score = njit(cache=True)(_key_score)
    graph_search = njit(cache=True)(_graph_search_loop)
else:
    scatter_add_rows = _scatter_add_rows_np
    score_all = _score_all_np
    refine_graph = _refine_graph_np
    graph_search = _graph_search_py

BACKEND = "numba" if USE_NUMBA else "numpy"

# both implementations stay importable for the benchmark and parity tests
NUMPY_KERNELS = {
    "scatter_add_rows": _scatter_add_rows_np,
    "score_all": _score_all_np,
    "refine_graph": _refine_graph_np,
    "graph_search": _graph_search_py,
}
