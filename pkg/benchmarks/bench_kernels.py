"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --classes 100 --dim 512 --samples 5000

Prints one row per kernel with the per-call time of each backend and the
speedup of the compiled one.  Exits with status 1 if the extension has not
been built.
"""
import argparse
import sys
import timeit

import numpy as np

from fluidbench.kernels import _py

try:
    from fluidbench.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(k, d, n, seed):
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((k, d))
    x = rng.standard_normal(d)
    sums = np.zeros((k, d))
    counts = np.zeros(k, dtype=np.int64)
    # rounded scores so the tie handling in the ranking kernels is exercised
    scores = np.round(rng.standard_normal(n), 2)
    labels = rng.random(n) < 0.3
    return {
        "dot_rows": lambda m: m.dot_rows(mat, x),
        "sq_dists": lambda m: m.sq_dists(mat, x),
        "add_row": lambda m: m.add_row(sums, counts, k // 2, x, 0.5),
        "positive_rank_sum": lambda m: m.positive_rank_sum(scores, labels),
        "f1_sweep": lambda m: m.f1_sweep(scores, labels),
    }


def per_call(fn, module, repeat, min_time):
    timer = timeit.Timer(lambda: fn(module))
    number, _ = timer.autorange()
    number = max(number, int(number * min_time / 0.2))
    return min(timer.repeat(repeat, number)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--classes", type=int, default=100, help="rows in the class matrix")
    p.add_argument("--dim", type=int, default=512, help="feature dimension")
    p.add_argument("--samples", type=int, default=5000, help="length of the score vector")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--min-time", type=float, default=0.2,
                   help="approximate seconds per timing repeat")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1

    print(f"classes={args.classes} dim={args.dim} samples={args.samples}")
    print(f"{'kernel':<18} {'cython (us)':>12} {'numpy (us)':>12} {'speedup':>8}")
    for name, fn in cases(args.classes, args.dim, args.samples, args.seed).items():
        c = per_call(fn, _ckernels, args.repeat, args.min_time)
        py = per_call(fn, _py, args.repeat, args.min_time)
        print(f"{name:<18} {c * 1e6:>12.2f} {py * 1e6:>12.2f} {py / c:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
