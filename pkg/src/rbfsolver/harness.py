"""Analytic model problems, reference solutions, convergence studies and the
invariant suite.

Oracles come in tiers: closed-form solutions first, then the Richardson
reference integrator, and only then the solver under test.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import jsonschema
import numpy as np

from . import basis as _basis
from . import coeffs as _coeffs
from . import quadrature as _quad
from .sampler import Method, ModelEvaluator, SolverConfig, sample
from .schedule import LinearLogSNR, NoiseSchedule, build_time_grid, vp_alpha_sigma

__all__ = [
    "TestProblem",
    "ReferenceError",
    "ConvergenceReport",
    "builtin_problems",
    "get_problem",
    "reference_solve",
    "relative_error",
    "convergence_study",
    "run_invariant_suite",
    "REPORT_SCHEMA",
    "CHECKS",
]


class ReferenceError(RuntimeError):
    """The reference integrator failed its self-consistency check."""


@dataclass
class TestProblem:
    """A stand-in for a trained data-prediction model.

    ``fn(x, lam)`` is the model.  ``exact(schedule, x_T)`` is set for
    closed-form problems and returns the solution at ``t_min``.
    """

    __test__ = False  # not a pytest class

    name: str
    fn: Callable
    dim: int
    exact_kind: str
    description: str
    exact: Callable | None = None

    def evaluator(self) -> ModelEvaluator:
        return ModelEvaluator(self.fn, self.dim, self.name)


def _endpoints(schedule: NoiseSchedule):
    lam_T, lam_0 = schedule.lambda_range
    a_T, s_T = vp_alpha_sigma(lam_T)
    a_0, s_0 = vp_alpha_sigma(lam_0)
    return lam_T, lam_0, a_T, s_T, a_0, s_0


def _state_independent(name, dim, F, g, description):
    """Problem with ``x0_hat = g(lam)``; ``F`` is an antiderivative of ``e^lam g``."""

    def fn(x, lam):
        return np.broadcast_to(g(lam), np.shape(x)).astype(float)

    def exact(schedule, x_T):
        lam_T, lam_0, _, s_T, _, s_0 = _endpoints(schedule)
        return (s_0 / s_T) * np.asarray(x_T, dtype=float) + s_0 * (F(lam_0) - F(lam_T))

    return TestProblem(name, fn, dim, "closed-form", description, exact)


def constant_problem(v=None, dim: int = 2) -> TestProblem:
    v = np.linspace(-1.0, 1.0, dim) * 0.7 + 0.1 if v is None else np.asarray(v, dtype=float)
    return _state_independent("constant", v.size, lambda lam: math.exp(lam) * v, lambda lam: v,
                              "x0_hat = v, a constant vector")


def polynomial_problem(coefficients=(0.3, -0.5, 0.2), dim: int = 2) -> TestProblem:
    """``x0_hat = q(lam)`` in every component, ``q(lam) = sum_k a_k lam^k``."""
    a = tuple(float(v) for v in coefficients)

    def F(lam):
        # e^lam * sum_k a_k sum_m (-1)^m k!/(k-m)! lam^(k-m)
        total = 0.0
        for k, ak in enumerate(a):
            for m in range(k + 1):
                total += ak * (-1) ** m * math.factorial(k) / math.factorial(k - m) * lam ** (k - m)
        return math.exp(lam) * total

    return _state_independent("polynomial", dim, F, lambda lam: sum(ak * lam ** k for k, ak in enumerate(a)),
                              f"x0_hat = polynomial in lambda with coefficients {a}")


def sin_problem(omega: float = 3.0, dim: int = 1) -> TestProblem:
    w = float(omega)
    F = lambda lam: math.exp(lam) * (math.sin(w * lam) - w * math.cos(w * lam)) / (1.0 + w * w)
    return _state_independent("sin", dim, F, lambda lam: math.sin(w * lam),
                              f"x0_hat = sin({w:g} lambda)")


def linear_problem(a: float = -0.5, b: float = 0.3, dim: int = 4) -> TestProblem:
    return TestProblem("linear", lambda x, lam: a * x + b, dim, "fine-reference",
                       f"x0_hat = {a:g} x + {b:g}, componentwise")


def stiff_problem() -> TestProblem:
    A = np.array([[-4.0, 1.0], [0.5, -0.25]])
    b = np.array([0.2, -0.1])
    return TestProblem("stiff2d", lambda x, lam: x @ A.T + b, 2, "fine-reference",
                       "x0_hat = A x + b with eigenvalues about -4.1 and -0.13")


def gaussian_data_problem(mu=(0.5, -1.0, 0.0), s: float = 0.5) -> TestProblem:
    """Data distributed as N(mu, s^2 I); the model is the exact posterior mean."""
    mu = np.asarray(mu, dtype=float)
    s2 = s * s

    def fn(x, lam):
        alpha, sigma = vp_alpha_sigma(lam)
        return mu + alpha * s2 / (alpha * alpha * s2 + sigma * sigma) * (x - alpha * mu)

    def exact(schedule, x_T):
        _, _, a_T, s_T, a_0, s_0 = _endpoints(schedule)
        scale = math.sqrt((a_0 ** 2 * s2 + s_0 ** 2) / (a_T ** 2 * s2 + s_T ** 2))
        return a_0 * mu + scale * (np.asarray(x_T, dtype=float) - a_T * mu)

    return TestProblem("gaussian-data", fn, mu.size, "closed-form",
                       f"exact denoiser of N(mu, {s:g}^2 I)", exact)


def builtin_problems() -> list[TestProblem]:
    return [constant_problem(), polynomial_problem(), sin_problem(), linear_problem(),
            stiff_problem(), gaussian_data_problem()]


def get_problem(name: str) -> TestProblem:
    for prob in builtin_problems():
        if prob.name == name:
            return prob
    raise KeyError(f"unknown problem {name!r}; choose from {[p.name for p in builtin_problems()]}")


def _euler_y_chart(fn, schedule, x_T, n):
    # y = x / sigma obeys dy/dlam = e^lam x0_hat(sigma y, lam) exactly
    lam_T, lam_0 = schedule.lambda_range
    lams = np.linspace(lam_T, lam_0, n + 1)
    alphas, sigmas = vp_alpha_sigma(lams)
    d = lams[1] - lams[0]
    y = np.asarray(x_T, dtype=float) / sigmas[0]
    for k in range(n):
        y = y + d * math.exp(lams[k]) * fn(sigmas[k] * y, lams[k])
    return sigmas[-1] * y


def reference_solve(problem: TestProblem, schedule: NoiseSchedule, x_T, resolution: int = 2000,
                    levels: int = 5, rtol: float = 1e-9):
    """Fine-step reference at ``t_min``.

    Euler in the ``y = x / sigma`` chart at ``R, 2R, ..., 2^(levels-1) R``
    steps, combined by repeated Richardson extrapolation.  The two most
    accurate extrapolants must agree to ``rtol`` (relative to the solution
    norm) or :class:`ReferenceError` is raised.
    """
    if resolution < 10 or levels < 2:
        raise ValueError("need resolution >= 10 and at least two levels")
    table = [[_euler_y_chart(problem.fn, schedule, x_T, resolution * 2 ** k)] for k in range(levels)]
    for k in range(1, levels):
        for j in range(1, k + 1):
            prev, coarse = table[k][j - 1], table[k - 1][j - 1]
            table[k].append(prev + (prev - coarse) / (2 ** j - 1))
    best, second = table[-1][-1], table[-1][-2]
    scale = max(np.linalg.norm(best), 1e-300)
    gap = np.linalg.norm(best - second) / scale
    if not gap <= rtol:
        raise ReferenceError(f"{problem.name}: reference extrapolants disagree by {gap:.3g} (rtol {rtol:g})")
    return best


def relative_error(x, ref) -> float:
    """L2 error, normalized by the reference norm when that is nonzero."""
    diff = float(np.linalg.norm(np.asarray(x) - np.asarray(ref)))
    norm = float(np.linalg.norm(ref))
    return diff / norm if norm > 0 else diff


@dataclass
class ConvergenceReport:
    problem: str
    method: str
    p: int
    rows: list = field(default_factory=list)   # (M, h_max, error)
    slope: float = math.nan
    oracle: str = "closed-form"

    CSV_COLUMNS = ("problem", "method", "p", "M", "h_max", "error", "slope")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for M, h, err in self.rows:
            w.writerow([self.problem, self.method, self.p, M, repr(h), repr(err), repr(self.slope)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConvergenceReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or tuple(rows[0].keys()) != cls.CSV_COLUMNS:
            raise ValueError("not a convergence report CSV")
        r0 = rows[0]
        return cls(r0["problem"], r0["method"], int(r0["p"]),
                   [(int(r["M"]), float(r["h_max"]), float(r["error"])) for r in rows],
                   float(r0["slope"]))


def _tail_slope(h, err, tail=3):
    h, err = np.asarray(h[-tail:]), np.asarray(err[-tail:])
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def convergence_study(problem: TestProblem, method, p: int, M_list, schedule: NoiseSchedule | None = None,
                      x_T=None, use_corrector: bool = False, log_gamma: float = 0.0,
                      resolution: int | None = None, jobs: int = 1) -> ConvergenceReport:
    """Final-state error versus step count, with the log-log slope over the 3 finest grids."""
    M_list = [int(m) for m in M_list]
    if len(M_list) < 3 or any(b <= a for a, b in zip(M_list, M_list[1:])):
        raise ValueError("M_list must be increasing with at least 3 entries")
    schedule = schedule or LinearLogSNR()
    method = Method(method)
    if x_T is None:
        x_T = np.random.default_rng(0).standard_normal(problem.dim)
    if problem.exact is not None:
        ref, oracle = problem.exact(schedule, x_T), "closed-form"
    else:
        ref = reference_solve(problem, schedule, x_T, resolution or 10 * max(M_list))
        oracle = "richardson"
    cfg = SolverConfig(order=p, method=method, use_corrector=use_corrector, log_gamma=log_gamma)
    report = ConvergenceReport(problem.name, method.value, p, oracle=oracle)

    def run(M):
        grid = build_time_grid(schedule, M)
        res = sample(problem.evaluator(), grid, cfg, x_T)
        return M, grid.h_max, relative_error(res.x0, ref)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(run, M_list))
    else:
        rows = [run(M) for M in M_list]
    for M, _, err in rows:
        if not (math.isfinite(err) and err > 0):
            raise FloatingPointError(f"non-finite or zero error at M={M}: {err}")
    report.rows = rows
    report.slope = _tail_slope([r[1] for r in report.rows], [r[2] for r in report.rows])
    return report


# ---------------------------------------------------------------------------
# invariant suite

REPORT_SCHEMA = {
    "type": "object",
    "required": ["passed", "failed", "checks"],
    "additionalProperties": False,
    "properties": {
        "passed": {"type": "integer", "minimum": 0},
        "failed": {"type": "integer", "minimum": 0},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["module", "name", "passed", "detail", "seconds"],
                "additionalProperties": False,
                "properties": {
                    "module": {"type": "string"},
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "detail": {"type": "string"},
                    "seconds": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


def _default_impl():
    return {
        "gaussian_basis": _basis.gaussian_basis,
        "build_kernel_system": _basis.build_kernel_system,
        "solve_interpolation_weights": _basis.solve_interpolation_weights,
        "lagrange_basis": _basis.lagrange_basis,
        "integral_exp_gaussian_closed": _quad.integral_exp_gaussian_closed,
        "integral_exp_gaussian_quadrature": _quad.integral_exp_gaussian_quadrature,
        "gauss_legendre": _quad.gauss_legendre,
        "rbf_coefficients": _coeffs.rbf_coefficients,
        "adams_coefficients": _coeffs.adams_coefficients,
        "equal_coefficients": _coeffs.equal_coefficients,
        "unipc_coefficients": _coeffs.unipc_coefficients,
        "sample": sample,
    }


def _random_nodes(rng, p, lo, h):
    gaps = rng.uniform(0.5, 1.5, p - 1) * h
    return _basis.NodeSet(lo - np.concatenate([[0.0], np.cumsum(gaps)]), h)


def _check_basis_interpolation(impl, rng):
    # the zero-sum residual is about eps * max|w|; beyond 4 nodes at gamma ~ e^2
    # the weights reach 1e6 and more, so the absolute bound is checked up to p = 4
    worst_fit, worst_sum = 0.0, 0.0
    for _ in range(50):
        p = int(rng.integers(2, 5))
        nodes = _random_nodes(rng, p, rng.uniform(-4, 4), rng.uniform(0.05, 1.0))
        gamma = math.exp(rng.uniform(-2, 2))
        data = rng.standard_normal((p, 3))
        interp = impl["solve_interpolation_weights"](impl["build_kernel_system"](nodes, gamma, True), data)
        fit = _basis.evaluate_interpolant(interp, nodes.nodes)
        worst_fit = max(worst_fit, float(np.max(np.abs(fit - data)) / np.max(np.abs(data))))
        worst_sum = max(worst_sum, float(np.max(np.abs(interp.weights.sum(axis=0)))))
    return worst_fit <= 1e-8 and worst_sum <= 1e-10, f"max fit error {worst_fit:.2e}, max weight sum {worst_sum:.2e}"


def _check_partition_of_unity(impl, rng):
    # Lagrange bases sum to one, so Adams coefficients sum to the step integral of e^lam
    worst, worst_sum = 0.0, 0.0
    for p in (2, 3, 4, 5):
        nodes = _random_nodes(rng, p, 0.0, 0.1)
        lam = rng.uniform(nodes.nodes[-1] - 0.1, 0.2, 100)
        total = sum(impl["lagrange_basis"](nodes, j, lam) for j in range(p))
        worst = max(worst, float(np.max(np.abs(total - 1.0))))
        c = impl["adams_coefficients"](nodes, 0.0, 0.1).values
        target = _quad.integral_exp_const(0.0, 0.1)
        worst_sum = max(worst_sum, abs(float(np.sum(c)) - target) / target)
    return (worst <= 1e-12 and worst_sum <= 1e-12,
            f"max |sum l_j - 1| = {worst:.2e}, max relative Adams summation error {worst_sum:.2e}")


def _check_gl_exactness(impl, rng):
    worst = 0.0
    for n in (2, 4, 8):
        rule = impl["gauss_legendre"](n)
        deg = 2 * n - 1
        # odd degree integrates to 0; check degree 2n-2 too
        worst = max(worst, abs(float(np.dot(rule.weights, rule.nodes ** deg))),
                    abs(float(np.dot(rule.weights, rule.nodes ** (deg - 1))) - 2.0 / deg))
    return worst <= 1e-13, f"max moment error {worst:.2e}"


def _check_route_agreement(impl, rng):
    bad, worst = 0, 0.0
    for _ in range(500):
        lo = rng.uniform(-5, 5)
        h = rng.uniform(0.01, 1.0)
        center = lo - int(rng.integers(0, 4)) * h * rng.uniform(0.5, 1.5)
        gamma = math.exp(rng.uniform(math.log(0.05), math.log(20.0)))
        req = _quad.IntegralRequest(lo, lo + h, center, gamma, h)
        closed = impl["integral_exp_gaussian_closed"](req).value
        q32 = impl["integral_exp_gaussian_quadrature"](req, 32)
        q64 = impl["integral_exp_gaussian_quadrature"](req, 64)
        # a 64-point value that underflows to zero counts as a failed case
        err = abs(closed - q32) / abs(q64) if q64 != 0 else math.inf
        if not err <= 1e-10:
            bad += 1
        worst = max(worst, err if math.isfinite(err) else 0.0)
    return bad == 0, f"{bad}/500 cases outside 1e-10 (largest finite relative gap {worst:.2e})"


def _check_summation(impl, rng):
    worst = 0.0
    for _ in range(200):
        p = int(rng.integers(1, 6))
        lo, h = rng.uniform(-5, 4), rng.uniform(0.02, 1.0)
        nodes = _random_nodes(rng, p, lo, h)
        gamma = math.exp(rng.uniform(-2, 2))
        c = impl["rbf_coefficients"](nodes, lo, lo + h, gamma, True)
        target = _quad.integral_exp_const(lo, lo + h)
        worst = max(worst, abs(float(np.sum(c.values)) - target) / target)
    return worst <= 1e-10, f"max relative summation error {worst:.2e}"


def _paper_grid(p):
    return _basis.NodeSet(np.array([0.0, -0.1, -0.2, -0.3])[:p], 0.1), 0.0, 0.1


def _check_adams_limit(impl, rng):
    details, ok = [], True
    for p in (2, 3):
        nodes, lo, hi = _paper_grid(p)
        adams = impl["adams_coefficients"](nodes, lo, hi).values
        dist = [float(np.max(np.abs(impl["rbf_coefficients"](nodes, lo, hi, g, True).values - adams)))
                for g in (1, 3, 10, 30, 100)]
        ok &= all(b <= a for a, b in zip(dist, dist[1:])) and dist[-1] < 2e-3
        details.append(f"p={p}: " + ", ".join(f"{d:.2e}" for d in dist))
    return ok, "; ".join(details)


def _check_equal_limit(impl, rng):
    details, ok = [], True
    for p in (2, 3, 4):
        nodes, lo, hi = _paper_grid(p)
        eq = impl["equal_coefficients"](p, lo, hi).values
        d = float(np.max(np.abs(impl["rbf_coefficients"](nodes, lo, hi, 1e-3, True).values - eq)))
        ok &= d < 1e-5
        details.append(f"p={p}: {d:.2e}")
    return ok, "gamma=1e-3 distance to equal coefficients " + "; ".join(details)


def _check_unipc(impl, rng):
    worst = 0.0
    for _ in range(50):
        for p in (1, 2, 3, 4):
            lo, h = rng.uniform(-5, 4), rng.uniform(0.02, 1.0)
            nodes = _random_nodes(rng, p, lo, h)
            a = impl["adams_coefficients"](nodes, lo, lo + h).values
            u = impl["unipc_coefficients"](nodes, lo, lo + h).values
            worst = max(worst, float(np.max(np.abs(a - u))))
    return worst <= 1e-10, f"max |adams - unipc| = {worst:.2e}"


def _check_golden(impl, rng):
    e = math.exp(0.1)
    expected = np.array([78 * e - 86, 180 - 163 * e, 86 * e - 95])
    nodes, lo, hi = _paper_grid(3)
    d = float(np.max(np.abs(impl["adams_coefficients"](nodes, lo, hi).values - expected)))
    return d <= 1e-10, f"max deviation {d:.2e}"


def _check_constant_exactness(impl, rng):
    prob = constant_problem()
    sched = LinearLogSNR()
    x_T = rng.standard_normal(prob.dim)
    exact = prob.exact(sched, x_T)
    worst = 0.0
    for M in (1, 5, 20):
        grid = build_time_grid(sched, M)
        for method in Method:
            cfg = SolverConfig(order=1 if method is Method.EULER else 3, method=method)
            res = impl["sample"](prob.evaluator(), grid, cfg, x_T)
            worst = max(worst, float(np.max(np.abs(res.x0 - exact))))
    return worst <= 1e-10, f"max error {worst:.2e}"


def _check_nfe(impl, rng):
    prob = sin_problem()
    sched = LinearLogSNR()
    ok = True
    for M in (1, 2, 7, 15):
        grid = build_time_grid(sched, M)
        for cfg in (SolverConfig(order=3), SolverConfig(order=1, method=Method.EULER)):
            model = prob.evaluator()
            res = impl["sample"](model, grid, cfg, np.zeros(prob.dim))
            ok &= res.nfe == M and model.nfe == M
    return ok, "model calls equal step count" if ok else "model call count differs from step count"


def _check_order(impl, rng):
    prob = sin_problem()
    slopes = []
    for p in (1, 2, 3):
        rep = convergence_study(prob, Method.ADAMS, p, [10, 20, 40, 80, 160])
        slopes.append(rep.slope)
    ok = all(s >= p - 0.3 for p, s in zip((1, 2, 3), slopes))
    return ok, "slopes " + ", ".join(f"p={p}: {s:.2f}" for p, s in zip((1, 2, 3), slopes))


# (module, name, function)
CHECKS = [
    ("basis", "interpolation-and-zero-sum", _check_basis_interpolation),
    ("basis", "partition-of-unity", _check_partition_of_unity),
    ("quadrature", "gauss-legendre-exactness", _check_gl_exactness),
    ("quadrature", "route-agreement", _check_route_agreement),
    ("coeffs", "golden-adams-vector", _check_golden),
    ("coeffs", "summation-condition", _check_summation),
    ("coeffs", "adams-limit", _check_adams_limit),
    ("coeffs", "equal-limit", _check_equal_limit),
    ("coeffs", "unipc-equals-adams", _check_unipc),
    ("sampler", "constant-exactness", _check_constant_exactness),
    ("sampler", "nfe-accounting", _check_nfe),
    ("harness", "empirical-order", _check_order),
]


def run_invariant_suite(only=None, registry: dict | None = None, seed: int = 0) -> dict:
    """Run the invariant checks and return a schema-valid report.

    ``only`` restricts to one module name or a collection of names.
    ``registry`` overrides implementation functions by name, for fault
    injection.
    """
    if isinstance(only, str):
        only = {only}
    impl = _default_impl()
    if registry:
        unknown = set(registry) - set(impl)
        if unknown:
            raise KeyError(f"unknown registry entries {sorted(unknown)}")
        impl.update(registry)
    checks = []
    for index, (module, name, fn) in enumerate(CHECKS):
        if only is not None and module not in only:
            continue
        # seeded by position in the full list so filtering does not change the cases
        rng = np.random.default_rng([seed, index])
        start = time.perf_counter()
        try:
            passed, detail = fn(impl, rng)
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append({"module": module, "name": name, "passed": bool(passed),
                       "detail": detail, "seconds": time.perf_counter() - start})
    report = {"passed": sum(c["passed"] for c in checks),
              "failed": sum(not c["passed"] for c in checks),
              "checks": checks}
    jsonschema.validate(report, REPORT_SCHEMA)
    return report
