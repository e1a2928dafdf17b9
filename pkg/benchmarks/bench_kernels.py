"""Time the compiled kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 2000]

Prints one line per kernel with the per-call time of each backend and the
speedup. Inputs are sized like a weekly run over 32 assets.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from hybridfolio import kernels


def cases(rng: np.random.Generator) -> dict[str, tuple]:
    n = 32
    logits = rng.normal(size=n)
    r, v = rng.normal(size=512), rng.normal(size=512)
    equity = np.cumprod(1 + rng.normal(0, 0.02, 1000))
    row = rng.normal(0, 0.02, n)
    w, w0 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    return {
        "project_topk (N=32, K=5)": ("project_topk", (logits, 5, 0.01)),
        "gae (T=512)": ("gae", (r, v, 0.0, 0.99, 0.95)),
        "running_drawdown (T=1000)": ("running_drawdown", (equity,)),
        "step_accounting (N=32)": ("step_accounting", (row, w, w0, 0.001, 0.001)),
    }


def bench(repeat: int, number: int) -> list[dict]:
    impls = kernels.backends()
    rng = np.random.default_rng(0)
    rows = []
    for label, (fn, args) in cases(rng).items():
        timings = {}
        for name, mod in impls.items():
            f = getattr(mod, fn)
            best = min(timeit.repeat(lambda: f(*args), repeat=repeat, number=number))
            timings[name] = best / number
        rows.append({"kernel": label, **timings})
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=2000)
    args = ap.parse_args()
    rows = bench(args.repeat, args.number)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<28} {'python (us)':>12} {'compiled (us)':>14} {'speedup':>8}")
    for r in rows:
        py = r["python"] * 1e6
        if "compiled" in r:
            c = r["compiled"] * 1e6
            print(f"{r['kernel']:<28} {py:>12.2f} {c:>14.2f} {py / c:>7.1f}x")
        else:
            print(f"{r['kernel']:<28} {py:>12.2f} {'n/a':>14} {'':>8}")


if __name__ == "__main__":
    main()
