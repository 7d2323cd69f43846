"""Timing comparison of the compiled and pure-numpy kernel backends.

Both backends are bitwise-identical, so this only reports speed.  Run:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from pvlu import backend

CASES = [
    # (label, kernel name, argument builder)
    ("im2col 32x3x28x28 k3", "im2col",
     lambda rng: (rng.standard_normal((32, 3, 28, 28), dtype=np.float32),
                  3, 3, 1, 1, 1, 1, 1, 1)),
    ("im2col 16x32x16x16 k3", "im2col",
     lambda rng: (rng.standard_normal((16, 32, 16, 16), dtype=np.float32),
                  3, 3, 1, 1, 1, 1, 1, 1)),
    ("col2im 32x3x28x28 k3", "col2im",
     lambda rng: (rng.standard_normal((32 * 28 * 28, 27), dtype=np.float32),
                  32, 3, 28, 28, 3, 3, 1, 1, 1, 1, 1, 1)),
    ("col2im 16x32x16x16 k3", "col2im",
     lambda rng: (rng.standard_normal((16 * 16 * 16, 288), dtype=np.float32),
                  16, 32, 16, 16, 3, 3, 1, 1, 1, 1, 1, 1)),
    ("maxpool_fwd 32x16x28x28", "maxpool_forward",
     lambda rng: (rng.standard_normal((32, 16, 28, 28), dtype=np.float32), 2, 2)),
    ("maxpool_bwd 32x16x14x14", "maxpool_backward", None),  # built below
]


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per case (best is reported)")
    args = parser.parse_args()

    try:
        compiled = backend.get_kernels("compiled")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return
    pure = backend.get_kernels("numpy")
    rng = np.random.default_rng(0)

    print(f"{'case':<28} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for label, name, build in CASES:
        if build is None:
            x = rng.standard_normal((32, 16, 28, 28), dtype=np.float32)
            _, idx = pure.maxpool_forward(x, 2, 2)
            dy = rng.standard_normal(idx.shape, dtype=np.float32)
            case_args = (dy, idx, 28, 28)
        else:
            case_args = build(rng)
        t_py = _time(getattr(pure, name), case_args, args.repeats)
        t_c = _time(getattr(compiled, name), case_args, args.repeats)
        print(f"{label:<28} {t_py * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms "
              f"{t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
