"""Compare the compiled hot loops against the NumPy fallback.

Runs the same solve twice in subprocesses, one with the compiled extension
and one with ``KIFMM_PURE_PYTHON=1``, and prints a per-operator timing
table. Each subprocess imports the package fresh, so the loop selection
happens exactly the way it does for end users.

Usage::

    python3 benchmarks/compare_hotloops.py --n 50000 --depth 3 --pe 4
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def build_parser():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--pe", type=int, default=4)
    p.add_argument("--pc", type=int, default=None)
    p.add_argument("--backend", choices=["blas", "fft"], default="blas")
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--sigma-min", type=float, default=1e-6)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--emit-json", action="store_true",
                   help="run one measurement and print JSON (worker mode)")
    return p


def measure(args):
    from kifmm3d import hotloops
    from kifmm3d.engine import FmmConfig, relative_error, setup
    from kifmm3d.points import generate_points

    points = generate_points("uniform-cube", args.n, seed=7)
    charges = np.random.default_rng(11).random(args.n)
    cfg = FmmConfig(depth=args.depth, order_equiv=args.pe,
                    order_check=args.pc, backend=args.backend,
                    precision=args.precision, sigma_min=args.sigma_min,
                    seed=args.seed, threads=args.threads)
    t0 = time.perf_counter()
    inst = setup(points, points, cfg)
    setup_seconds = time.perf_counter() - t0

    sums = {}
    walls = []
    for _ in range(args.reps):
        t0 = time.perf_counter()
        pot = inst.evaluate(charges)
        walls.append(time.perf_counter() - t0)
        for name, sec in inst.timings.items():
            sums[name] = sums.get(name, 0.0) + sec
    stats = relative_error(inst, pot)
    return {
        "hot_loops": hotloops.BACKEND,
        "setup_seconds": setup_seconds,
        "evaluate_seconds": float(np.mean(walls)),
        "timings": {k: v / args.reps for k, v in sums.items()},
        "error": stats.error,
    }


def run_worker(argv, pure_python):
    env = dict(os.environ)
    if pure_python:
        env["KIFMM_PURE_PYTHON"] = "1"
    else:
        env.pop("KIFMM_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, os.path.abspath(__file__),
                          *argv, "--emit-json"],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.emit_json:
        json.dump(measure(args), sys.stdout)
        return 0

    worker_argv = [a for a in argv if a != "--emit-json"]
    compiled = run_worker(worker_argv, pure_python=False)
    fallback = run_worker(worker_argv, pure_python=True)
    if compiled["hot_loops"] != "compiled":
        print("note: compiled extension unavailable; both rows use the "
              "NumPy fallback", file=sys.stderr)

    rows = list(compiled["timings"]) + ["evaluate", "setup"]
    values = {
        "evaluate": ("evaluate_seconds",),
        "setup": ("setup_seconds",),
    }
    print(f"n={args.n} depth={args.depth} pe={args.pe} backend={args.backend} "
          f"precision={args.precision} reps={args.reps}")
    print(f"errors: compiled {compiled['error']:.3e}, "
          f"fallback {fallback['error']:.3e}")
    print(f"{'operator':<10} {'compiled':>12} {'pure-python':>12} {'speedup':>9}")
    for name in rows:
        if name in values:
            a = compiled[values[name][0]]
            b = fallback[values[name][0]]
        else:
            a = compiled["timings"][name]
            b = fallback["timings"][name]
        ratio = b / a if a > 0 else float("inf")
        print(f"{name:<10} {a * 1e3:>10.2f}ms {b * 1e3:>10.2f}ms {ratio:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
