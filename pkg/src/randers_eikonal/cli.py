"""Command-line entry point.

Exit codes: 0 success, 2 usage or I/O error, 3 numerical failure.  Standard
output carries only ``key=value`` summary lines; tables go to files.
"""
from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time

import numpy as np

from . import inversion, oracle
from .adjoint import DegenerateDiagonal, InconsistentFixedPoint
from .fields import (DimensionMismatch, DriftField, FieldFileError, GridSpec, IoFailure,
                     MetricField, check_sources, load_drift, load_metric, point_sources,
                     read_field, write_field)
from .sweeper import NotConverged, SingularStencil, solve, solve_jacobi

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("randers_eikonal")


class UsageError(Exception):
    pass


def _emit(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _load_sources(path, shape=None) -> np.ndarray:
    _, ch = read_field(path)
    src = ch[0] > 0.5
    if shape is not None and src.shape != tuple(shape):
        raise DimensionMismatch(f"source mask {src.shape} vs metric {tuple(shape)}")
    return check_sources(src)


def _load_theta(path) -> np.ndarray:
    """Five-channel parameter stack from a 1, 3 or 5 channel field file."""
    _, ch = read_field(path)
    shape = ch[0].shape
    theta = inversion.default_theta(shape)
    if len(ch) == 1:
        theta[0] = theta[2] = ch[0]
    elif len(ch) in (3, 5):
        for i, a in enumerate(ch):
            theta[i] = a
    else:
        raise DimensionMismatch(f"{path}: expected 1, 3 or 5 channels, found {len(ch)}")
    return theta


def _write_rows(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad size list {text!r}")
    if not sizes or min(sizes) < 3:
        raise UsageError("sizes must be integers >= 3")
    return sizes


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_solve(args) -> int:
    G = load_metric(args.metric)
    b = load_drift(args.drift) if args.drift else DriftField.zeros(G.shape)
    if b.shape != G.shape:
        raise DimensionMismatch(f"drift {b.shape} vs metric {G.shape}")
    src = _load_sources(args.sources, G.shape)
    spec = GridSpec(*G.shape, args.h)
    kw = {} if args.max_iters is None else {"max_iters": args.max_iters}
    fn = solve if args.solver == "sweep" else solve_jacobi
    T, rep = fn(G, b, src, spec, tol=args.tol, **kw)
    write_field(args.out, T)
    _emit(iters=rep.iterations, max_delta=_fmt(rep.max_delta))
    if not rep.converged:
        print(f"error: not converged after {rep.iterations} iterations", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


_GRAD_CHANNELS = {"iso": (0, 1, 2, 3, 4), "aniso": (0, 1, 2), "drift": (3, 4)}


def cmd_gradcheck(args) -> int:
    if args.points < 1:
        raise UsageError("--points must be at least 1")
    if not args.eps > 0:
        raise UsageError("--eps must be positive")
    problem, theta = oracle.gradcheck_problem(args.case, args.size, args.seed)
    channels = _GRAD_CHANNELS[args.case]
    checks = oracle.pointwise_check(problem, theta, channels, args.points, args.eps, args.seed)
    by_node = {}
    for c in checks:
        by_node.setdefault(c.site[1:], []).append(c.rel_error)
    worst = 0.0
    for i, (node, errs) in enumerate(by_node.items()):
        e = max(errs)
        worst = max(worst, e)
        _emit(point=i, row=node[0], col=node[1], max_rel_err=f"{e:.3e}",
              status="PASS" if e < args.threshold else "FAIL")
    ok = len(by_node) >= args.points and worst < args.threshold
    _emit(case=args.case, points=len(by_node), max_rel_err=f"{worst:.3e}",
          result="PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_invert(args) -> int:
    obs = []
    for path in args.obs:
        (rows, cols), ch = read_field(path)
        h = args.h if args.h else 1.0 / cols
        obs.append(inversion.ObservationSet.from_bundle(ch, h))
    shape = obs[0].src.shape
    if any(o.src.shape != shape for o in obs):
        raise DimensionMismatch("observation bundles differ in size")
    init = None if args.init == "default" else _load_theta(args.init)
    truth = _load_theta(args.truth) if args.truth else None
    for arr in (init, truth):
        if arr is not None and arr.shape[1:] != shape:
            raise DimensionMismatch(f"field {arr.shape[1:]} vs observations {shape}")
    cfg = inversion.InverseConfig(
        param=args.param, lambda_G=args.lambda_g, lambda_b=args.lambda_b, iters=args.iters,
        optimizer=args.optimizer, step_G=args.step_g, step_b=args.step_b,
        regularizer=args.regularizer, tv=args.tv, seed=args.seed)
    res = inversion.recover(obs, cfg, init=init, truth=truth)
    write_field(f"{args.out_prefix}_metric.rfek", list(res.theta[:3]))
    write_field(f"{args.out_prefix}_drift.rfek", list(res.theta[3:]))
    hist = [(i, l, res.error_history[i] if res.error_history else float("nan"))
            for i, l in enumerate(res.loss_history)]
    _write_rows(f"{args.out_prefix}_history.csv", ("iter", "loss", "rel_error"), hist)
    summary = {"iters": res.iterations, "final_loss": _fmt(res.loss_history[-1])}
    if truth is not None:
        summary["rel_error"] = _fmt(inversion.param_error(res.theta, truth, args.param))
    _emit(**summary)
    return EXIT_OK


def cmd_observe(args) -> int:
    theta = _load_theta(args.truth)
    if args.drift:
        b = load_drift(args.drift)
        theta[3], theta[4] = b.b1, b.b2
    shape = theta.shape[1:]
    h = args.h if args.h else 1.0 / shape[1]
    if args.sources:
        sources = [_load_sources(args.sources, shape)]
    else:
        sources = [tuple(int(v) for v in p.split(":")) for p in args.at]
    for s in sources:
        if not isinstance(s, np.ndarray) and not (0 <= s[0] < shape[0] and 0 <= s[1] < shape[1]):
            raise UsageError(f"source {s} outside the grid")
    sets = inversion.generate_observations(theta, sources, args.density, args.noise, args.seed, h)
    for i, o in enumerate(sets):
        write_field(f"{args.out_prefix}_{i}.rfek", o.bundle())
    _emit(bundles=len(sets), observations=sum(o.count for o in sets))
    return EXIT_OK


def cmd_convergence(args) -> int:
    sizes = _sizes(args.sizes)
    need = 4 if args.case == "combined" else 3
    if len(set(sizes)) < need:
        raise UsageError(f"rate fit for case {args.case!r} needs at least {need} distinct sizes")
    rep = oracle.convergence_study(sorted(set(sizes)), args.case, tol=args.tol)
    rep.write_csv(args.out)
    for row in rep.rows():
        _emit(N=row[0], rel_l2=f"{row[4]:.4e}", iterations=row[6])
    _emit(case=args.case, alpha=f"{rep.alpha:.4f}")
    return EXIT_OK


def cmd_scenario(args) -> int:
    params = {}
    if args.alpha is not None:
        params["alpha"] = args.alpha
    sc = oracle.scenario(args.kind, args.size, args.seed, **params)
    write_field(f"{args.out_prefix}_metric.rfek", sc.G.channels())
    write_field(f"{args.out_prefix}_drift.rfek", sc.b.channels())
    write_field(f"{args.out_prefix}_sources.rfek", sc.src.astype(float))
    if sc.T is not None:
        write_field(f"{args.out_prefix}_arrival.rfek", sc.T)
    rep = sc.report or {}
    if args.kind == "sensitivity":
        _write_rows(f"{args.out_prefix}_report.csv", ("noise_level", "rel_max", "rel_l2"), rep["levels"])
    elif rep:
        _write_rows(f"{args.out_prefix}_report.csv", tuple(rep), [tuple(rep.values())])
    _emit(kind=args.kind, size=args.size, **{k: _fmt(v) for k, v in rep.items() if k != "levels"})
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise UsageError("--repeat must be at least 1")
    sizes = _sizes(args.sizes)
    fn = solve if args.solver == "sweep" else solve_jacobi
    rows = []
    for N in sizes:
        spec = GridSpec(N, N, 1.0 / N)
        G = MetricField.isotropic(spec.shape)
        b = DriftField.zeros(spec.shape)
        src = point_sources(spec.shape, [(N // 2, N // 2)])
        times, iters = [], 0
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            _, rep = fn(G, b, src, spec)
            times.append(time.perf_counter() - t0)
            iters = rep.iterations
            if not rep.converged:
                raise NotConverged(f"{args.solver} did not converge at N={N}")
        rows.append((N, iters, statistics.median(times)))
        _emit(N=N, iterations=iters, median_time=f"{rows[-1][2]:.4g}")
    _write_rows(args.out, ("N", "iterations", "median_time"), rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="randers-eikonal",
                                description="Differentiable Randers-Finsler eikonal solver.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="forward solve from field files")
    s.add_argument("--metric", required=True)
    s.add_argument("--drift")
    s.add_argument("--sources", required=True)
    s.add_argument("--h", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iters", type=int, default=None)
    s.add_argument("--solver", choices=("sweep", "jacobi"), default="sweep")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("gradcheck", help="adjoint vs finite-difference gradients")
    s.add_argument("--case", choices=tuple(_GRAD_CHANNELS), default="iso")
    s.add_argument("--points", type=int, default=20)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--size", type=int, default=31)
    s.add_argument("--threshold", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("invert", help="recover fields from observation bundles")
    s.add_argument("--obs", nargs="+", required=True)
    s.add_argument("--init", default="default")
    s.add_argument("--truth")
    s.add_argument("--param", choices=tuple(inversion.PARAMS), default="iso")
    s.add_argument("--lambda-g", type=float, default=0.0)
    s.add_argument("--lambda-b", type=float, default=0.0)
    s.add_argument("--iters", type=int, default=300)
    s.add_argument("--optimizer", choices=("adam", "gd"), default="adam")
    s.add_argument("--step-g", type=float, default=1e-2)
    s.add_argument("--step-b", type=float, default=5e-3)
    s.add_argument("--regularizer", choices=("tv", "tikhonov", "none"), default="tv")
    s.add_argument("--tv", choices=("frobenius", "log_euclidean"), default="frobenius")
    s.add_argument("--h", type=float, default=None, help="grid spacing (default 1/cols)")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("observe", help="sample observation bundles from a true field")
    s.add_argument("--truth", required=True, help="1, 3 or 5 channel parameter file")
    s.add_argument("--drift")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--sources", help="source mask file")
    g.add_argument("--at", nargs="+", help="point sources as row:col, one bundle each")
    s.add_argument("--density", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--h", type=float, default=None, help="grid spacing (default 1/cols)")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_observe)

    s = sub.add_parser("convergence", help="grid refinement study")
    s.add_argument("--sizes", default="25,50,100,200,400")
    s.add_argument("--case", choices=tuple(oracle.CASES), default="iso")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convergence)

    s = sub.add_parser("scenario", help="synthetic propagation scenarios")
    s.add_argument("--kind", required=True, choices=("terrain", "drift", "heterogeneous", "combined",
                                                     "reconstruction", "sensitivity"))
    s.add_argument("--size", type=int, default=100)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--alpha", type=float, default=None, help="terrain slope sensitivity")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("bench", help="iteration counts and wall time")
    s.add_argument("--sizes", default="50,100,200,400")
    s.add_argument("--solver", choices=("sweep", "jacobi"), default="sweep")
    s.add_argument("--repeat", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NotConverged, InconsistentFixedPoint, DegenerateDiagonal, SingularStencil,
            inversion.DivergedLoss) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DimensionMismatch as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FieldFileError, IoFailure, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
