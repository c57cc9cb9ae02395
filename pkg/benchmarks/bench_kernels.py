"""Compiled vs numpy kernels: wall time per call and agreement.

    python3 benchmarks/bench_kernels.py [--size 224] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from shadowtrace.kernels import BACKEND, _pykernels

try:
    from shadowtrace.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(size, rng):
    mu = rng.uniform(0.0, 0.6 / size, (size, size))
    excess = np.where(rng.random((size, size)) < 0.05, 0.2, 0.0)
    g = rng.random((size, size))
    return {
        "ray_integrals": lambda m: m.ray_integrals(mu, excess, size / 2.0, -size / 2.0, 0.5),
        "rw_edge_weights": lambda m: m.rw_edge_weights(g, 90.0, 0.3, 1e-6),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"active backend: {BACKEND}")
    print("kernel\tsize\tnumpy_ms\tcython_ms\tspeedup\tmax_abs_diff")
    for name, fn in cases(a.size, rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=a.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name}\t{a.size}\t{t_py:.2f}\t-\t-\t-")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=a.repeat)) * 1e3
        diff = max(float(np.max(np.abs(x - y))) for x, y in zip(fn(_pykernels), fn(_ckernels)))
        print(f"{name}\t{a.size}\t{t_py:.2f}\t{t_c:.2f}\t{t_py / t_c:.1f}x\t{diff:.1e}")


if __name__ == "__main__":
    main()
