"""Command-line interface: ``rbf-solver {coeffs,sample,converge,optimize,verify}``.

Exit codes: 0 success, 1 numerical or runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .basis import NodeSet, SingularKernelError
from .coeffs import (
    adams_coefficients,
    coefficient_magnitude_ratio,
    equal_coefficients,
    euler_coefficients,
    rbf_coefficients,
    unipc_coefficients,
)
from .harness import (
    ReferenceError,
    builtin_problems,
    convergence_study,
    get_problem,
    reference_solve,
    relative_error,
    run_invariant_suite,
)
from .sampler import Method, ShapeSchedule, SolverConfig, NonFiniteStateError, sample, write_trace
from .schedule import CosineVP, LinearLogSNR, TabulatedSchedule, build_time_grid
from .shapeopt import MODES, SearchSpec, generate_target_set, schedule_mse, search_shape_parameters

SEED_ENV = "RBF_SOLVER_SEED"
MODULES = ("basis", "quadrature", "coeffs", "sampler", "harness")


class UsageError(Exception):
    """Bad flags or configuration; exit code 2."""


# -- argument parsing helpers ---------------------------------------------

def _floats(text, name):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def _ints(text, name):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated integers, got {text!r}") from None


def parse_log_gammas(text) -> np.ndarray:
    """``"0.5"``, ``"-1,0,1"``, ``"adams"`` or a sweep ``"lo..hi:count"``."""
    text = str(text).strip()
    if ".." in text:
        try:
            span, count = text.split(":")
            lo, hi = (float(v) for v in span.split(".."))
            count = int(count)
        except ValueError:
            raise UsageError(f"bad sweep {text!r}; expected lo..hi:count") from None
        if count < 1:
            raise UsageError("sweep count must be positive")
        return np.linspace(lo, hi, count)
    vals = []
    for part in text.split(","):
        part = part.strip().lower()
        if part in ("adams", "inf"):
            vals.append(math.inf)
        else:
            vals.extend(_floats(part, "log-gamma"))
    return np.array(vals)


def parse_schedule(text):
    """``linear``, ``linear:LMIN:LMAX``, ``cosine`` or ``table:PATH``."""
    text = str(text)
    kind, _, rest = text.partition(":")
    try:
        if kind == "linear":
            if rest:
                lo, hi = (float(v) for v in rest.split(":"))
                return LinearLogSNR(lo, hi)
            return LinearLogSNR()
        if kind == "cosine":
            return CosineVP()
        if kind == "table":
            return TabulatedSchedule.from_csv(rest)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad schedule {text!r}: {exc}") from None
    raise UsageError(f"unknown schedule {text!r}; use linear, linear:LMIN:LMAX, cosine or table:PATH")


def _seed_default():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _problem(name):
    try:
        return get_problem(name)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def _method(name):
    try:
        return Method(name)
    except ValueError:
        raise UsageError(f"unknown method {name!r}; choose from {[m.value for m in Method]}") from None


def _out(path):
    return open(path, "w", newline="") if path and path != "-" else None


def _emit(text, path):
    fh = _out(path)
    if fh is None:
        sys.stdout.write(text)
    else:
        with fh:
            fh.write(text)


def _x_T(problem, seed):
    return np.random.default_rng(seed).standard_normal(problem.dim)


def _reference(problem, schedule, x_T, M_max):
    if problem.exact is not None:
        return problem.exact(schedule, x_T)
    return reference_solve(problem, schedule, x_T, max(2000, 10 * M_max))


# -- commands ---------------------------------------------------------------

def cmd_coeffs(args):
    lo, hi = _floats(args.interval, "interval") if args.interval else (None, None)
    if lo is None or not hi > lo:
        raise UsageError("--interval needs lo,hi with hi > lo")
    if args.nodes:
        nodes = _floats(args.nodes, "nodes")
        p = len(nodes)
    else:
        p = args.p
        step = args.step if args.step is not None else hi - lo
        nodes = [lo - k * step for k in range(p)]
    if args.p is not None and args.p != p:
        raise UsageError(f"--p {args.p} disagrees with {p} nodes")
    method = args.method
    try:
        ns = NodeSet(nodes, args.width if args.width is not None else hi - lo)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if method == "euler" and p != 1:
        raise UsageError("euler coefficients have a single node; use --p 1")

    rows = []
    if method == "rbf":
        for lg in parse_log_gammas(args.log_gamma):
            if math.isinf(lg):
                c, label = adams_coefficients(ns, lo, hi), "inf"
            else:
                try:
                    c = rbf_coefficients(ns, lo, hi, math.exp(lg), not args.no_constant)
                except SingularKernelError as exc:
                    print(f"log_gamma={lg:g}: {exc}; using Adams", file=sys.stderr)
                    c = adams_coefficients(ns, lo, hi)
                label = repr(float(lg))
            rows.append((label, c))
    elif method in ("adams", "unipc"):
        c = adams_coefficients(ns, lo, hi) if method == "adams" else unipc_coefficients(ns, lo, hi)
        rows.append(("inf", c))
    elif method == "equal":
        rows.append(("-inf", equal_coefficients(p, lo, hi)))
    elif method == "euler":
        rows.append(("-inf", euler_coefficients(lo, hi)))
    else:
        raise UsageError(f"unknown method {method!r}")

    buf = []
    header = ["log_gamma"] + [f"c_{j}" for j in range(p)] + ["sum"] + [f"cmr_{j}" for j in range(p)]
    buf.append(",".join(header))
    for label, c in rows:
        vals = c.values
        cmr = coefficient_magnitude_ratio(c)
        buf.append(",".join([label] + [repr(float(v)) for v in vals] + [repr(float(vals.sum()))]
                            + [repr(float(v)) for v in cmr]))
    _emit("\n".join(buf) + "\n", args.output)
    return 0


def _solver_config(args, M):
    method = _method(args.method)
    shape = None
    if getattr(args, "shape", None):
        try:
            shape = ShapeSchedule.load(args.shape)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read shape schedule: {exc}") from None
        if shape.nfe != M:
            raise UsageError(f"shape schedule has {shape.nfe} steps but --M is {M}")
    lg = parse_log_gammas(args.log_gamma)
    if lg.size != 1:
        raise UsageError("--log-gamma must be a single value here")
    try:
        return SolverConfig(order=args.p, method=method, use_corrector=not args.no_corrector,
                            include_constant=not args.no_constant, log_gamma=float(lg[0]), shape=shape,
                            lower_order_final=args.lower_order_final)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_sample(args):
    if args.M < 1:
        raise UsageError("--M must be positive")
    problem = _problem(args.problem)
    schedule = parse_schedule(args.schedule)
    cfg = _solver_config(args, args.M)
    grid = build_time_grid(schedule, args.M, args.spacing)
    x_T = _x_T(problem, args.seed)
    res = sample(problem.evaluator(), grid, cfg, x_T, trace=bool(args.trace))
    err = relative_error(res.x0, _reference(problem, schedule, x_T, args.M))
    if res.trace is not None:
        write_trace(res.trace, args.trace)
    _emit("problem,method,p,M,nfe,error\n"
          f"{problem.name},{cfg.method.value},{cfg.order},{args.M},{res.nfe},{err!r}\n", args.output)
    return 0


def cmd_converge(args):
    problem = _problem(args.problem)
    M_list = _ints(args.M_list, "M-list")
    if len(M_list) < 3 or any(m < 1 for m in M_list) or any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise UsageError("--M-list needs at least 3 increasing positive integers")
    schedule = parse_schedule(args.schedule)
    method = _method(args.method)
    if method is Method.EULER and args.p != 1:
        raise UsageError("Euler is first order; use --p 1")
    lg = parse_log_gammas(args.log_gamma)
    report = convergence_study(problem, method, args.p, M_list, schedule, _x_T(problem, args.seed),
                               use_corrector=args.corrector, log_gamma=float(lg[0]), jobs=args.jobs)
    _emit(report.to_csv(), args.output)
    return 0


def cmd_optimize(args):
    problem = _problem(args.problem)
    schedule = parse_schedule(args.schedule)
    rng_lo, rng_hi = _floats(args.range, "range")
    try:
        spec = SearchSpec((rng_lo, rng_hi), args.resolution, args.mode, not args.no_adams_candidate,
                          args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.M < 3:
        raise UsageError("--M must be at least 3")
    if args.reference_nfe < 100:
        raise UsageError("--reference-nfe must be at least 100")
    if args.pairs < 1:
        raise UsageError("--pairs must be positive")
    grid = build_time_grid(schedule, args.M, args.spacing)
    targets = generate_target_set(problem.evaluator(), schedule, args.reference_nfe, args.pairs, args.seed, args.p)
    result = search_shape_parameters(problem.evaluator(), grid, spec, targets, args.p)
    shape = result.schedule
    opt = schedule_mse(problem.evaluator(), grid, shape, targets, args.p)
    adams = schedule_mse(problem.evaluator(), grid, ShapeSchedule.adams(args.M, spec.threshold), targets, args.p)
    if args.output:
        shape.save(args.output)
    else:
        print(json.dumps(shape.to_json(), indent=2))
    print(f"candidates_per_step={result.candidates_per_step[0]} optimized_mse={opt!r} adams_mse={adams!r}",
          file=sys.stderr)
    if spec.include_adams_candidate and spec.mode != "split-independent" and not opt <= adams:
        print("optimized schedule is worse than Adams on the training batch", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args):
    only = set(args.only) if args.only else None
    report = run_invariant_suite(only=only, seed=args.seed)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['module']}.{c['name']}: {c['detail']}")
    print(f"{report['passed']} passed, {report['failed']} failed")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2))
    return 0 if report["failed"] == 0 else 1


# -- parser -----------------------------------------------------------------

def _solver_flags(p):
    p.add_argument("--problem", default="sin", choices=[pr.name for pr in builtin_problems()])
    p.add_argument("--method", default="rbf", choices=[m.value for m in Method])
    p.add_argument("--p", type=int, default=3, help="solver order")
    p.add_argument("--schedule", default="linear", help="linear, linear:LMIN:LMAX, cosine or table:PATH")
    p.add_argument("--spacing", default="uniform-lambda", choices=["uniform-lambda", "uniform-t"])
    p.add_argument("--log-gamma", default="0", help="constant log shape parameter for --method rbf")
    p.add_argument("--no-constant", action="store_true", help="drop the constant basis")


def _global_flags(p, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=default(None), help="JSON file with option values; flags take precedence")
    p.add_argument("--seed", type=int, default=default(None), help=f"random seed (default ${SEED_ENV} or 0)")
    p.add_argument("--jobs", type=int, default=default(1), help="worker threads for studies")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbf-solver", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[common], **k)

    p = sub.add_parser("coeffs", help="coefficient vectors as CSV")
    p.add_argument("--nodes", help="comma-separated half log-SNR nodes, newest first")
    p.add_argument("--p", type=int, default=None, help="number of nodes when --nodes is absent")
    p.add_argument("--step", type=float, default=None, help="node spacing when --nodes is absent")
    p.add_argument("--interval", default="0,0.1", help="lo,hi")
    p.add_argument("--width", type=float, default=None, help="Gaussian width scale (default hi-lo)")
    p.add_argument("--method", default="rbf", choices=["rbf", "adams", "equal", "euler", "unipc"])
    p.add_argument("--log-gamma", default="-3..3:25", help="value, list or sweep lo..hi:count")
    p.add_argument("--no-constant", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_coeffs)

    p = sub.add_parser("sample", help="one sampling run")
    _solver_flags(p)
    p.add_argument("--M", type=int, default=20, help="number of steps (= NFE)")
    p.add_argument("--no-corrector", action="store_true")
    p.add_argument("--lower-order-final", action="store_true")
    p.add_argument("--shape", help="ShapeSchedule JSON")
    p.add_argument("--trace", help="write a JSON-lines step trace here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("converge", help="convergence study as CSV")
    _solver_flags(p)
    p.add_argument("--M-list", default="10,20,40,80,160")
    p.add_argument("--corrector", action="store_true", help="enable the corrector (off by default)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_converge, method="adams", p=2)

    p = sub.add_parser("optimize", help="shape parameter search")
    p.add_argument("--problem", default="linear", choices=[pr.name for pr in builtin_problems()])
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--M", type=int, default=10)
    p.add_argument("--schedule", default="linear")
    p.add_argument("--spacing", default="uniform-lambda", choices=["uniform-lambda", "uniform-t"])
    p.add_argument("--range", default="-2,2", help="log gamma range lo,hi")
    p.add_argument("--resolution", type=int, default=33)
    p.add_argument("--mode", default="split-joint", choices=list(MODES))
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--no-adams-candidate", action="store_true")
    p.add_argument("--pairs", type=int, default=128)
    p.add_argument("--reference-nfe", type=int, default=200)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--only", action="append", choices=list(MODULES))
    p.add_argument("--json", help="write the report here")
    p.set_defaults(func=cmd_verify)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(parser, argv, args):
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    sub = _subparser(parser, args.command)
    top = {a.dest for a in parser._actions} - {"help", "command", "config"}
    sub_dests = {a.dest for a in sub._actions} - {"help", "func"}
    unknown = set(data) - top - sub_dests
    if unknown:
        raise UsageError(f"unknown config keys for '{args.command}': {sorted(unknown)}")
    parser.set_defaults(**{k: v for k, v in data.items() if k in top})
    sub.set_defaults(**{k: v for k, v in data.items() if k in sub_dests})
    return parser.parse_args(argv)


# options whose values may start with '-' (negative numbers, sweeps)
_VALUE_OPTIONS = ("--log-gamma", "--range", "--nodes", "--interval")


def _join_values(argv):
    out, k = [], 0
    while k < len(argv):
        a = argv[k]
        if a in _VALUE_OPTIONS and k + 1 < len(argv):
            out.append(f"{a}={argv[k + 1]}")
            k += 2
        else:
            out.append(a)
            k += 1
    return out


def main(argv=None) -> int:
    argv = _join_values(sys.argv[1:] if argv is None else list(argv))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        if args.seed is None:
            args.seed = _seed_default()
        if args.jobs < 1:
            raise UsageError("--jobs must be positive")
        return args.func(args)
    except UsageError as exc:
        print(f"rbf-solver: error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteStateError, ReferenceError, FloatingPointError, np.linalg.LinAlgError,
            RuntimeError, OSError) as exc:
        print(f"rbf-solver: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
