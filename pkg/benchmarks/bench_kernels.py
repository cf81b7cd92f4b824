"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py --items 20000 --dim 64

Run with RECALLNET_NUMBA=0 to confirm the fallback path alone; the compiled
column is then skipped.
"""
import argparse
import time

import numpy as np

from recallnet import _kernels


def best_of(fn, repeats):
    fn()  # first call compiles
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(n, d, degree, rng):
    mat = rng.normal(size=(n, d))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    key = rng.normal(size=d)
    key /= np.linalg.norm(key)
    nbrs = np.stack([rng.choice(n, size=degree, replace=False) for _ in range(n)]).astype(np.int64)
    entry = rng.permutation(n).astype(np.int64)
    idx = rng.integers(n, size=8 * n)
    vals = rng.normal(size=(8 * n, d))
    cos = _kernels.MEASURE_COSINE
    return {
        "scatter_add_rows": lambda k: k(np.zeros((n, d)), idx, vals),
        "score_all": lambda k: k(mat, key, cos),
        "refine_graph (1 round)": lambda k: k(mat, nbrs, cos, 1),
        "graph_search (budget 400)": lambda k: k(mat, nbrs, entry, key, cos, 400, 8),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--items", type=int, default=20_000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--degree", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    active = {
        "scatter_add_rows": _kernels.scatter_add_rows,
        "score_all": _kernels.score_all,
        "refine_graph (1 round)": _kernels.refine_graph,
        "graph_search (budget 400)": _kernels.graph_search,
    }
    fallback = {name: _kernels.NUMPY_KERNELS[name.split()[0]] for name in active}
    compiled = _kernels.BACKEND == "numba"
    print(f"backend={_kernels.BACKEND} items={args.items} dim={args.dim} degree={args.degree}")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, run in cases(args.items, args.dim, args.degree, rng).items():
        t_np = best_of(lambda: run(fallback[name]), args.repeats)
        if compiled:
            t_nb = best_of(lambda: run(active[name]), args.repeats)
            print(f"{name:28s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.1f}")
        else:
            print(f"{name:28s} {1e3 * t_np:10.2f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
