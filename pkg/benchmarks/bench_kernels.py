"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 50] [--size 79510]
"""

import argparse
import timeit

import numpy as np

from fedmac import _pykernels

try:
    from fedmac import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n: int, rng: np.random.Generator):
    x = rng.standard_normal(n) * 1e-3
    g = rng.standard_normal(n)
    w = rng.standard_normal(n)
    logits = rng.standard_normal((20, 10))
    labels = rng.integers(0, 10, 20)
    G = rng.standard_normal((200, 256))
    lo = -np.abs(rng.standard_normal(256))
    hi = lo + 1.0
    return {
        "logcosh_excess": lambda m: m.logcosh_excess(x, 1e-4),
        "tanh_scaled": lambda m: m.tanh_scaled(x, 1e-4),
        "theta_step": lambda m: m.theta_step(x.copy(), g, w, 0.05, 3e-4, 1e-4, 1e-4),
        "prox_step": lambda m: m.prox_step(x.copy(), g, w, 0.05, 3e-4, 15.0, 1e-4),
        "w_step": lambda m: m.w_step(x.copy(), w, 3000.0, 1e-4, 1e-8, 1e-4),
        "softmax_xent": lambda m: m.softmax_xent(logits.copy(), labels),
        "ista_step": lambda m: m.ista_step(x.copy(), g, 0.01, 1e-3),
        "box_sq_dist": lambda m: m.box_sq_dist(G, lo, hi),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--size", type=int, default=79510, help="vector length (default: MLP 784-100-10)")
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not available; only the numpy fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy (us)':>12}{'cython (us)':>13}{'speedup':>9}")
    for name, fn in cases(args.size, rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e6
        if _ckernels is None:
            print(f"{name:<16}{t_py:>12.1f}{'-':>13}{'-':>9}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e6
        print(f"{name:<16}{t_py:>12.1f}{t_c:>13.1f}{t_py / t_c:>8.2f}x")


if __name__ == "__main__":
    main()
