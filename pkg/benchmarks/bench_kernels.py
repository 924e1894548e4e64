"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--rows 15000] [--repeat 50]

Each kernel runs on the same inputs under both backends; the script checks
that the outputs agree and prints mean wall time per call.
"""
import argparse
import timeit

import numpy as np

from figmm import kernels


def make_inputs(rows, p, G, cell, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((rows, p))
    comp = np.sort(rng.integers(0, G, rows)).astype(np.intp)
    weights = rng.random(rows)
    means = rng.standard_normal((G, p))
    A = rng.standard_normal((p, p))
    chol = np.linalg.cholesky(A @ A.T + p * np.eye(p))
    ptr = np.r_[np.arange(0, rows, cell), rows].astype(np.intp)
    logw = rng.standard_normal(rows)
    return values, comp, weights, means, chol, ptr, logw


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=15000)
    ap.add_argument("--p", type=int, default=3)
    ap.add_argument("--G", type=int, default=3)
    ap.add_argument("--cell", type=int, default=50, help="rows per softmax segment")
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    values, comp, weights, means, chol, ptr, logw = make_inputs(args.rows, args.p, args.G, args.cell)
    cases = {
        "quadform_by_component": lambda impl: kernels.quadform_by_component(values, comp, means, chol,
                                                                            impl=impl),
        "segment_softmax": lambda impl: kernels.segment_softmax(logw, ptr, impl=impl)[0],
        "weighted_component_stats": lambda impl: kernels.weighted_component_stats(
            values, comp, weights, args.G, impl=impl)[2],
    }
    try:
        kernels.backend_module("cython")
        backends = ("cython", "python")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")
        backends = ("python",)
    print(f"rows={args.rows} p={args.p} G={args.G} repeat={args.repeat} default={kernels.BACKEND}")
    print(f"{'kernel':<26}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        ref = fn("python")
        times = []
        for b in backends:
            out = fn(b)
            if not np.allclose(out, ref, rtol=1e-12, atol=1e-12):
                raise SystemExit(f"{name}: {b} output differs from the numpy backend")
            times.append(timeit.timeit(lambda: fn(b), number=args.repeat) / args.repeat * 1e3)
        speed = f"{times[-1] / times[0]:>9.2f}x" if len(times) == 2 else ""
        print(f"{name:<26}" + "".join(f"{t:>12.4f}" for t in times) + speed)


if __name__ == "__main__":
    main()
