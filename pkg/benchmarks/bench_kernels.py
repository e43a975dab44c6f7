"""Compiled versus pure-Python kernels.

Runs each kernel on identical inputs and generator states with both
backends, checks that the outputs agree bit for bit, and reports the median
wall time over ``--repeat`` runs.

    python benchmarks/bench_kernels.py --N 1000 --repeat 5
"""
from __future__ import annotations

import argparse
import json
import math
import statistics
import time

import numpy as np

from fvlab.kernels import get_backend
from fvlab.rng import stream


def _cases(N):
    rates = np.array([0.0, math.log(4.0)])
    states = (np.arange(N) % 2).astype(np.int64)
    levels = np.linspace(0.0, 1.0, 51)
    x0 = np.full(N, 1.0)
    return {
        "fv_finite_state": lambda mod, g: mod.fv_finite_state(rates, states.copy(), 1.0, g),
        "fv_ruin_exp": lambda mod, g: mod.fv_ruin_exp(x0.copy(), 1.0, 1.0, 1.0, 1.0, g),
        "discrete_finite_state": lambda mod, g: mod.discrete_finite_state(rates, states.copy(), levels, g),
    }


def _flatten(out):
    if isinstance(out, tuple):
        return [x for o in out for x in _flatten(o)]
    if out is None:
        return []
    return [np.asarray(out)]


def _time(fn, mod, seed, repeat):
    times, out = [], None
    for _ in range(repeat):
        g = stream(seed, 0)
        t0 = time.perf_counter()
        out = fn(mod, g)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=1000, help="particles per run")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args(argv)

    try:
        cy = get_backend("cython")
    except ImportError:
        raise SystemExit("the compiled extension is not built; run `pip install -e . --no-build-isolation` first")
    py = get_backend("python")

    results = []
    for name, fn in _cases(args.N).items():
        t_cy, out_cy = _time(fn, cy, args.seed, args.repeat)
        t_py, out_py = _time(fn, py, args.seed, args.repeat)
        same = all(np.array_equal(a, b) for a, b in zip(_flatten(out_cy), _flatten(out_py)))
        results.append({"kernel": name, "N": args.N, "cython_s": t_cy, "python_s": t_py,
                        "speedup": t_py / t_cy if t_cy > 0 else float("inf"), "identical": same})

    if args.json:
        print(json.dumps(results, indent=2))
    else:
        print(f"{'kernel':<24}{'cython [ms]':>13}{'python [ms]':>13}{'speedup':>10}  identical")
        for r in results:
            print(f"{r['kernel']:<24}{1e3 * r['cython_s']:>13.3f}{1e3 * r['python_s']:>13.3f}{r['speedup']:>9.1f}x  {r['identical']}")
    return 0 if all(r["identical"] for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
