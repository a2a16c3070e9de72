"""Benchmark and verification command line.

Subcommands: ``verify`` (run once, gate the sampled relative error),
``bench`` (repeat evaluations, report per-operator timings), ``search``
(grid over tuning parameters), ``generate`` (write a point file).

Exit codes: 0 success, 1 tolerance failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys

import numpy as np

from . import points as pointsmod
from .engine import ConfigError, FmmConfig, operator_timings, relative_error, setup
from .hotloops import BACKEND

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2
EXIT_IO = 3

_TIMING_KEYS = ("p2m", "m2m", "m2l", "l2l", "l2p", "p2p", "setup")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kifmm3d",
        description="Fast multipole benchmark and verification tool "
                    f"(hot loops: {BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--n", type=int, default=10000,
                       help="number of points (default 10000)")
        p.add_argument("--depth", default="3",
                       help="tree depth (comma list under search)")
        p.add_argument("--pe", default="6",
                       help="equivalent surface order (comma list under search)")
        p.add_argument("--pc", default=None,
                       help="check surface order (default: same as --pe)")
        p.add_argument("--backend", default="blas",
                       choices=["blas", "fft", "both"])
        p.add_argument("--precision", default="f64", choices=["f32", "f64"])
        p.add_argument("--sigma-min", default="1e-6",
                       help="relative singular value truncation "
                            "(comma list under search)")
        p.add_argument("--n-over", default="5",
                       help="randomized SVD oversampling (comma list under search)")
        p.add_argument("--rank-estimate", type=int, default=None)
        p.add_argument("--alpha", type=float, default=0.0,
                       help="Tikhonov regularization weight")
        p.add_argument("--block-size", type=int, default=32,
                       help="FFT translation tile size")
        p.add_argument("--rhs", type=int, default=1,
                       help="number of charge columns")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="thread count (default: KIFMM_THREADS or all cores)")
        p.add_argument("--format", default="json", choices=["json", "csv"])
        p.add_argument("--points", default="uniform-cube",
                       help="uniform-cube | sphere-surface | file:<path>")
        p.add_argument("--reps", type=int, default=1,
                       help="evaluation repetitions (bench)")
        p.add_argument("--tolerance", type=float, default=None,
                       help="fail (exit 1) when the sampled error exceeds this")
        p.add_argument("--target-error", type=float, default=None,
                       help="accuracy goal for search")

    p_verify = sub.add_parser("verify", help="run once and gate the error")
    common(p_verify)
    p_bench = sub.add_parser("bench", help="repeat evaluations and report timings")
    common(p_bench)
    p_search = sub.add_parser("search",
                              help="grid over depth/pe/pc/sigma-min/n-over "
                                   "(comma-separated values)")
    common(p_search)
    p_gen = sub.add_parser("generate", help="write a point file")
    common(p_gen)
    p_gen.add_argument("--out", required=True, help="output path (.csv for CSV)")
    p_gen.add_argument("--with-charges", action="store_true",
                       help="attach uniform random charges")
    return parser


def _load_cloud(args):
    spec = args.points
    if spec.startswith("file:"):
        cloud = pointsmod.load_points(spec[5:])
        if cloud.n < 1:
            raise ValueError("the point file holds no points")
        return cloud
    pts = pointsmod.generate_points(spec, args.n, args.seed)
    return pointsmod.PointCloud(points=pts)


def _charges_for(cloud, args):
    if cloud.charges is not None and args.rhs == 1:
        return cloud.charges
    rng = np.random.default_rng(args.seed + 1)
    q = rng.random((cloud.n, args.rhs))
    return q[:, 0] if args.rhs == 1 else q


def _config_for(args, backend, depth=None, pe=None, pc=None, sigma_min=None,
                n_over=None) -> FmmConfig:
    return FmmConfig(
        depth=depth if depth is not None else args.depth,
        order_equiv=pe if pe is not None else args.pe,
        order_check=pc if pc is not None else args.pc,
        backend=backend,
        precision=args.precision,
        sigma_min=sigma_min if sigma_min is not None else args.sigma_min,
        oversamples=n_over if n_over is not None else args.n_over,
        rank_estimate=args.rank_estimate,
        alpha=args.alpha,
        block_size=args.block_size,
        n_rhs=args.rhs,
        seed=args.seed,
        threads=args.threads,
    )


def _run_once(cloud, charges, config, reps=1):
    inst = setup(cloud.points, cloud.points, config)
    rep_timings = []
    potentials = None
    for _ in range(max(1, reps)):
        potentials = inst.evaluate(charges)
        rep_timings.append(dict(inst.timings))
    err = relative_error(inst, potentials)
    timings = {k: float(np.mean([t[k] for t in rep_timings]))
               for k in rep_timings[0]}
    timings["setup"] = inst.setup_seconds
    report = {
        "config": {
            "n": cloud.n, "depth": config.depth, "pe": config.order_equiv,
            "pc": config.resolved_order_check(), "backend": config.backend,
            "precision": config.precision, "sigma_min": config.sigma_min,
            "n_over": config.oversamples, "alpha": config.alpha,
            "block_size": config.block_size, "rhs": config.n_rhs,
            "seed": config.seed, "threads": config.resolved_threads(),
            "hot_loops": BACKEND,
        },
        "timings": {k: timings.get(k, 0.0) for k in _TIMING_KEYS},
        "error": float(err.error),
        "reps": int(max(1, reps)),
    }
    report["error_excluded_targets"] = int(err.n_excluded)
    if reps >= 2:
        report["timings_std"] = {
            k: float(np.std([t[k] for t in rep_timings]))
            for k in rep_timings[0]}
    if config.backend == "blas":
        report["m2l_calls_per_level"] = [int(c) for c in inst.m2l_calls]
    return report, potentials


def _flatten(prefix, obj, rows):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, rows)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, rows)
    else:
        rows.append((prefix, obj))


def _emit(report, fmt, stream=None):
    stream = stream or sys.stdout
    if fmt == "json":
        json.dump(report, stream, indent=2, sort_keys=True)
        stream.write("\n")
    else:
        rows = []
        _flatten("", report, rows)
        stream.write("key,value\n")
        for k, v in rows:
            stream.write(f"{k},{v}\n")


def _split_values(raw, cast):
    return [cast(v) for v in str(raw).split(",") if v != ""]


def cmd_verify(args) -> int:
    cloud = _load_cloud(args)
    charges = _charges_for(cloud, args)
    backends = ["blas", "fft"] if args.backend == "both" else [args.backend]
    reports = {}
    pots = {}
    for b in backends:
        reports[b], pots[b] = _run_once(cloud, charges, _config_for(args, b),
                                        reps=1)
    if len(backends) == 2:
        a = np.asarray(pots["blas"], dtype=np.float64)
        f = np.asarray(pots["fft"], dtype=np.float64)
        denom = np.abs(a).max()
        cross = float(np.abs(a - f).max() / denom) if denom > 0 else 0.0
        out = {"blas": reports["blas"], "fft": reports["fft"],
               "cross_backend_max_relative_deviation": cross}
    else:
        out = reports[backends[0]]
    _emit(out, args.format)
    worst = max(r["error"] for r in reports.values())
    if args.tolerance is not None and worst > args.tolerance:
        print(f"error {worst:.3e} exceeds tolerance {args.tolerance:.3e}",
              file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_bench(args) -> int:
    cloud = _load_cloud(args)
    charges = _charges_for(cloud, args)
    backends = ["blas", "fft"] if args.backend == "both" else [args.backend]
    reports = {}
    pots = {}
    for b in backends:
        reports[b], pots[b] = _run_once(cloud, charges, _config_for(args, b),
                                        reps=args.reps)
    if len(backends) == 2:
        a = np.asarray(pots["blas"], dtype=np.float64)
        f = np.asarray(pots["fft"], dtype=np.float64)
        denom = np.abs(a).max()
        cross = float(np.abs(a - f).max() / denom) if denom > 0 else 0.0
        out = {"blas": reports["blas"], "fft": reports["fft"],
               "cross_backend_max_relative_deviation": cross}
    else:
        out = reports[backends[0]]
    _emit(out, args.format)
    if args.tolerance is not None:
        worst = max(r["error"] for r in reports.values())
        if worst > args.tolerance:
            return EXIT_TOLERANCE
    return EXIT_OK


def cmd_search(args) -> int:
    cloud = _load_cloud(args)
    charges = _charges_for(cloud, args)
    if args.backend == "both":
        print("search runs one backend at a time", file=sys.stderr)
        return EXIT_USAGE
    depths = _split_values(args.depth, int)
    pes = _split_values(args.pe, int)
    pcs = _split_values(args.pc, int) if args.pc is not None else [None]
    sigmas = _split_values(args.sigma_min, float)
    overs = _split_values(args.n_over, int)
    rows = []
    for depth, pe, pc, sig, nov in itertools.product(depths, pes, pcs,
                                                     sigmas, overs):
        try:
            config = _config_for(args, args.backend, depth=depth, pe=pe,
                                 pc=pc, sigma_min=sig, n_over=nov)
            report, _ = _run_once(cloud, charges, config, reps=1)
        except (ConfigError, ValueError) as exc:
            rows.append({"depth": depth, "pe": pe,
                         "pc": pc if pc is not None else pe,
                         "sigma_min": sig, "n_over": nov,
                         "error": None, "seconds": None, "meets_target": False,
                         "note": str(exc)})
            continue
        total = sum(report["timings"][k] for k in
                    ("p2m", "m2m", "m2l", "l2l", "l2p", "p2p"))
        meets = (args.target_error is None
                 or report["error"] <= args.target_error)
        rows.append({"depth": depth, "pe": pe,
                     "pc": pc if pc is not None else pe, "sigma_min": sig,
                     "n_over": nov, "error": report["error"],
                     "seconds": total, "meets_target": bool(meets)})
    rows.sort(key=lambda r: (not r["meets_target"],
                             r["seconds"] if r["seconds"] is not None else np.inf))
    out = {"rows": rows, "target_error": args.target_error,
           "backend": args.backend, "n": cloud.n}
    _emit(out, args.format)
    if args.target_error is not None and not any(r["meets_target"] for r in rows):
        print(f"no configuration reached target error "
              f"{args.target_error:.3e}", file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_generate(args) -> int:
    pts = pointsmod.generate_points(args.points, args.n, args.seed)
    charges = None
    if args.with_charges:
        charges = np.random.default_rng(args.seed + 1).random(args.n)
    try:
        if str(args.out).endswith(".csv"):
            data = pts if charges is None else np.hstack([pts, charges[:, None]])
            np.savetxt(args.out, data, delimiter=",")
        else:
            pointsmod.write_binary(args.out, pts, charges)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.n} points to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command != "search":        # comma lists are search-only
        try:
            args.depth = int(args.depth)
            args.pe = int(args.pe)
            args.pc = int(args.pc) if args.pc is not None else None
            args.sigma_min = float(args.sigma_min)
            args.n_over = int(args.n_over)
        except ValueError as exc:
            print(f"bad numeric flag: {exc}", file=sys.stderr)
            return EXIT_USAGE
    for name in ("n", "rhs", "reps"):
        if getattr(args, name) < 1:
            print(f"--{name} must be at least 1", file=sys.stderr)
            return EXIT_USAGE
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "search":
            return cmd_search(args)
        if args.command == "generate":
            return cmd_generate(args)
    except pointsmod.PointFileError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
