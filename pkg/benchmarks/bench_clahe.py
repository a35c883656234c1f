"""Time the compiled CLAHE kernels against the numpy fallback.

    python benchmarks/bench_clahe.py --sizes 256 512 1024 --repeat 5
"""

import argparse
import statistics
import timeit

import numpy as np

from clinfuse.preprocess import ClaheParams, clahe, kernels


def have_extension() -> bool:
    try:
        kernels("cython")
    except ImportError:
        return False
    return True


def bench(size, backend, params, repeat):
    img = np.random.default_rng(size).integers(0, 256, (size, size), dtype=np.uint8)
    clahe(img, params, backend=backend)  # warm-up
    times = timeit.repeat(lambda: clahe(img, params, backend=backend), number=1, repeat=repeat)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 512, 1024])
    ap.add_argument("--tiles", type=int, nargs=2, default=[8, 8])
    ap.add_argument("--clip", type=float, default=2.0)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    params = ClaheParams(tuple(args.tiles), args.clip)
    backends = ["python"] + (["cython"] if have_extension() else [])
    if len(backends) == 1:
        print("compiled extension not built; timing the fallback only")

    print(f"{'size':>6}  " + "  ".join(f"{b + ' (ms)':>13}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for size in args.sizes:
        t = {b: bench(size, b, params, args.repeat) for b in backends}
        line = f"{size:>6}  " + "  ".join(f"{t[b] * 1e3:>13.2f}" for b in backends)
        if len(backends) > 1:
            line += f"  {t['python'] / t['cython']:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
