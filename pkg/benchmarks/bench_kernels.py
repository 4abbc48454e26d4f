"""Compiled kernels versus the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-``repeat`` time for each kernel and backend, and checks
that both backends agree on the result.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from carnot_flow import _kernels_py
from carnot_flow._backend import COMPILED, kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def gather_case(rng, nodes=200_000, stencil=8):
    f = rng.random(nodes)
    idx = rng.integers(-1, nodes, size=(nodes, stencil))
    w = rng.random((nodes, stencil))
    return f, idx, w


def bench_gather(impl, case, repeat):
    f, idx, w = case
    out = np.zeros_like(f)

    def run():
        out[:] = 0.0
        impl.gather_accumulate(out, f, idx, w, 1.0)

    return best_of(run, repeat), out.copy()


def ssp_case(rng, n):
    a = rng.random(n)
    b = rng.random(n)
    a /= a.sum()
    b /= b.sum()
    return rng.random((n, n)), a, b


def bench_ssp(impl, case, repeat):
    cost, a, b = case
    result = {}

    def run():
        result["plan"] = impl.transport_ssp(cost, a, b)[0]

    t = best_of(run, repeat)
    return t, float(np.sum(result["plan"] * cost))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not COMPILED:
        print("compiled extension not built; only the fallback is timed")
    rng = np.random.default_rng(0)
    impls = [("fallback", _kernels_py)] + ([("compiled", kernels)] if COMPILED else [])

    print(f"{'kernel':<28}{'backend':<10}{'seconds':>12}")
    case = gather_case(rng)
    ref = None
    for name, impl in impls:
        t, out = bench_gather(impl, case, args.repeat)
        ref = out if ref is None else ref
        print(f"{'gather_accumulate 200k x 8':<28}{name:<10}{t:12.5f}")
    assert np.allclose(out, ref), "backends disagree on gather_accumulate"

    for n in (64, 256):
        case = ssp_case(rng, n)
        costs = []
        for name, impl in impls:
            t, c = bench_ssp(impl, case, max(1, args.repeat // 2))
            costs.append(c)
            print(f"{f'transport_ssp {n}x{n}':<28}{name:<10}{t:12.5f}")
        assert max(costs) - min(costs) <= 1e-12, "backends disagree on transport cost"


if __name__ == "__main__":
    main()
