"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each kernel runs on the same inputs under both backends; the best of
``--repeat`` wall-clock timings is reported together with the speedup.
"""

import argparse
import csv
import sys
import time

import numpy as np

from owdisc import _pykernels

try:
    from owdisc import _ckernels
except ImportError:
    _ckernels = None


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    X = rng.normal(size=(100_000, 128))
    C = rng.normal(size=(1000, 128))
    yield "assign_nearest n=100k k=1000 d=128", lambda m: m.assign_nearest(X, C)

    Xs = X[:20_000]
    labels = rng.integers(0, 1000, Xs.shape[0])
    yield "accumulate n=20k k=1000 d=128", lambda m: m.accumulate(Xs, labels, 1000)

    batch = X[:256]
    blabels = rng.integers(0, 1000, 256)

    def update(m):
        centers = C.copy()
        counts = np.ones(1000, dtype=np.int64)
        m.minibatch_update(centers, counts, batch, blabels)

    yield "minibatch_update batch=256 k=1000", update

    xy = rng.uniform(0, 1000, (3000, 2))
    boxes = np.hstack([xy, xy + rng.uniform(5, 120, (3000, 2))])
    groups = np.repeat(np.arange(30), 100)
    yield "nms_keep n=3000 (30 images)", lambda m: m.nms_keep(boxes, groups, 0.5)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--csv", help="also write the table as CSV")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    rows = []
    for name, fn in cases(np.random.default_rng(args.seed)):
        t_c = best_time(lambda: fn(_ckernels), args.repeat)
        t_p = best_time(lambda: fn(_pykernels), args.repeat)
        rows.append((name, t_c, t_p, t_p / t_c))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'cython s':>10}  {'python s':>10}  {'speedup':>8}")
    for name, t_c, t_p, ratio in rows:
        print(f"{name:<{width}}  {t_c:10.5f}  {t_p:10.5f}  {ratio:7.1f}x")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "cython_seconds", "python_seconds", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
