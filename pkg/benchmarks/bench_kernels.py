"""Time the numba kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run once first so JIT compilation is excluded, then timed as
the best of N repeats. Outputs are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from megdecode import _kernels


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    gray = rng.uniform(size=(128, 128))
    g_row, g_col = rng.normal(size=(2, 128, 128))
    sims = rng.normal(size=(200, 2400))
    true_idx = rng.integers(0, 2400, size=200)
    tie_key = rng.permutation(2400)
    return [
        ("lbp 128x128 P=8 R=1", _kernels.lbp_uniform_codes_np, _kernels.lbp_uniform_codes_nb, (gray, 8, 1.0)),
        ("hog cells 128x128", _kernels.hog_cell_histograms_np, _kernels.hog_cell_histograms_nb, (g_row, g_col, 8, 9)),
        ("ranks 200 x 2400", _kernels.count_ranks_np, _kernels.count_ranks_nb, (sims, true_idx, tie_key)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, np_fn, nb_fn, fargs in cases(rng):
        a, b = np_fn(*fargs), nb_fn(*fargs)  # also compiles the numba version
        if not np.allclose(a, b, atol=1e-12):
            raise SystemExit(f"{name}: numpy and numba outputs differ")
        t_np = best_of(np_fn, fargs, args.repeat)
        t_nb = best_of(nb_fn, fargs, args.repeat)
        print(f"{name:<24}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
