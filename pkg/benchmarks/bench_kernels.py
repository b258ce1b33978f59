"""Compare the compiled and numpy inner kernels.

    python benchmarks/bench_kernels.py [--nodes 50] [--records 2000] [--repeat 20]

Prints per-call timings for both backends and the speedup. Both backends
are imported directly, so the ``SPARCC_PURE_PYTHON`` switch is irrelevant
here.
"""

import argparse
import timeit

import numpy as np

from sparcc._kernels import _pykernels
from sparcc.outcome import NormalOutcome
from sparcc.quadrature import gauss_hermite

try:
    from sparcc._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def inputs(m, n, seed=0):
    rng = np.random.default_rng(seed)
    outcome = NormalOutcome()
    theta = np.array([1.0, 10.0, 2.0, 0.0])
    nodes = np.linspace(0.01, 0.97, m)
    r = rng.random(m)
    r /= r.sum()
    pi = np.diff(np.concatenate([[0.0], np.sort(rng.random(m))])) * 0.5
    t, w = gauss_hermite(20)
    means = np.ascontiguousarray(outcome.mean(nodes, 1.0, theta))
    design = np.ascontiguousarray(outcome.design(nodes, 1.0))
    asm = (means, r, np.ascontiguousarray(pi), design, 1.0, np.ascontiguousarray(t),
           np.ascontiguousarray(w), 1e-300)
    y = 1 + 10 * rng.random(n) + rng.standard_normal(n)
    ww = rng.random(n) * 0.9
    tail = (y, ww, nodes, np.log(r), means, 1.0)
    return asm, tail


def bench(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=50)
    ap.add_argument("--records", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    asm, tail = inputs(args.nodes, args.records)
    print(f"m = {args.nodes} nodes, n = {args.records} records, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, a in (("assemble_fredholm", asm), ("tail_weights", tail)):
        tp = bench(getattr(_pykernels, name), a, args.repeat)
        if _ckernels is None:
            print(f"{name:<20}{1e3 * tp:>12.3f}{'n/a':>14}{'':>10}")
            continue
        tc = bench(getattr(_ckernels, name), a, args.repeat)
        print(f"{name:<20}{1e3 * tp:>12.3f}{1e3 * tc:>14.3f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
