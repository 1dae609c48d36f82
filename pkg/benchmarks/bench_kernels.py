"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the environment switch is not needed.
Each case also checks that the two backends agree bit for bit.
"""

import argparse
import time

import numpy as np

from incremad import _pykernels

try:
    from incremad import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def slda_case(mod, n, dim, n_classes, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    y = rng.integers(0, n_classes, n).astype(np.int64)

    def run():
        means = np.zeros((n_classes, dim))
        counts = np.zeros(n_classes)
        cov = np.zeros((dim, dim))
        total = mod.slda_fit_batch(means, counts, cov, 0.0, x, y)
        return means, counts, cov, total
    return run


def sweep_case(mod, n, seed=0):
    rng = np.random.default_rng(seed)
    scores = np.sort(rng.random(n))
    # the merge walk needs ascending thresholds, as the metrics module supplies
    thr = np.sort(np.concatenate([[-np.inf], scores, (scores[1:] + scores[:-1]) / 2]))

    def run():
        return mod.count_above(scores, thr)
    return run


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _kernels is None:
        print("compiled kernels are not built; only the fallback is available")
        return
    cases = [
        ("slda n=2000 d=16 c=2", lambda m: slda_case(m, 2000, 16, 2)),
        ("slda n=2000 d=64 c=10", lambda m: slda_case(m, 2000, 64, 10)),
        ("slda n=20000 d=16 c=2", lambda m: slda_case(m, 20000, 16, 2)),
        ("sweep n=1000", lambda m: sweep_case(m, 1000)),
        ("sweep n=100000", lambda m: sweep_case(m, 100_000)),
    ]
    print(f"{'case':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, make in cases:
        py, cy = make(_pykernels), make(_kernels)
        identical = same(py(), cy())
        t_py = best_of(py, args.repeat) * 1e3
        t_cy = best_of(cy, args.repeat) * 1e3
        print(f"{name:<24}{t_py:>12.2f}{t_cy:>12.2f}{t_py / t_cy:>9.1f}x  {identical}")


if __name__ == "__main__":
    main()
