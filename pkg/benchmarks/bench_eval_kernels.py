"""Compare the numba and pure-numpy evaluation kernels.

    python3 benchmarks/bench_eval_kernels.py [--queries 500] [--database 2000] [--repeat 5]

Both paths are checked for identical outputs before timing. Reported times
are the best of `--repeat` runs, after one warm-up call (which also absorbs
numba compilation).
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from mimco import kernels


def _cases(nq: int, nd: int, k: int, seed: int):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(nq, nd))
    labels = rng.integers(0, 10, nd)
    relevant = rng.random((nq, nd)) < 0.1
    relevant[:, 0] = True
    return {
        "topk": (kernels.topk_indices_numba, kernels.topk_indices_numpy, (scores, k)),
        "knn_vote": (kernels.knn_predict_numba, kernels.knn_predict_numpy, (scores, labels, k, 10)),
        "average_precision": (kernels.average_precision_numba, kernels.average_precision_numpy,
                              (scores, relevant)),
    }


def _best(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--database", type=int, default=2000)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)

    rows = []
    for name, (nb, npy, fargs) in _cases(args.queries, args.database, args.k, args.seed).items():
        if not np.array_equal(nb(*fargs), npy(*fargs)):
            if not np.allclose(nb(*fargs), npy(*fargs), atol=1e-12):
                raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_nb, t_np = _best(nb, fargs, args.repeat), _best(npy, fargs, args.repeat)
        rows.append({"kernel": name, "numba_ms": t_nb * 1e3, "numpy_ms": t_np * 1e3,
                     "speedup": t_np / t_nb})
    if args.json:
        print(json.dumps({"queries": args.queries, "database": args.database, "k": args.k,
                          "results": rows}, indent=2))
        return
    print(f"{args.queries} queries x {args.database} database items, k={args.k}")
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numba_ms']:>12.2f}{r['numpy_ms']:>12.2f}{r['speedup']:>9.1f}x")


if __name__ == "__main__":
    main()
