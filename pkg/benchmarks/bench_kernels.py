"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Setting FEDBACKDOOR_NO_NUMBA=1 hides numba entirely; this script instead
forces each path per call so both are timed in one process.
"""

import argparse
import timeit

import numpy as np

from fedbackdoor import _kernels as K

CASES = {
    "im2col 64x8x16x16 k3 s1": lambda x, y, v, nb: K.im2col(x, 3, 1, use_numba=nb),
    "col2im 64x8x16x16 k3 s1": lambda x, y, v, nb: K.col2im(y, x.shape, 3, 1, use_numba=nb),
    "pairwise_sq_dists 30x5000": lambda x, y, v, nb: K.pairwise_sq_dists(v, use_numba=nb),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    r = np.random.default_rng(0)
    x = r.normal(size=(64, 8, 16, 16))
    y = r.normal(size=K.im2col(x, 3, 1, use_numba=False).shape)
    v = r.normal(size=(30, 5000))
    paths = [False, True] if K.HAVE_NUMBA else [False]
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in CASES.items():
        times = {}
        for nb in paths:
            fn(x, y, v, nb)  # warm-up and JIT compile
            times[nb] = min(timeit.repeat(lambda: fn(x, y, v, nb), number=1, repeat=args.repeat)) * 1e3
        if True in times:
            print(f"{name:28s} {times[False]:10.2f} {times[True]:10.2f} {times[False] / times[True]:7.2f}x")
        else:
            print(f"{name:28s} {times[False]:10.2f} {'n/a':>10s}")


if __name__ == "__main__":
    main()
