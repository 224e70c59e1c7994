"""Exponentially weighted integrals over one step ``[lo, hi]`` in half log-SNR.

Three families of integrals appear in the solvers:

* ``int e^lam dlam`` (the constant basis),
* ``int e^lam exp(-((lam - c) / (gamma w))^2) dlam`` (one Gaussian basis),
* ``int e^lam lam^k dlam`` (monomials, for the Adams path).

The Gaussian integral has two independent routes: an erfc closed form
evaluated in log space and Gauss-Legendre quadrature.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.special import erf, erfc, erfcx

__all__ = [
    "QuadratureRule",
    "IntegralRequest",
    "GaussianIntegral",
    "gauss_legendre",
    "log_erfc",
    "integral_exp_const",
    "integral_exp_gaussian_closed",
    "integral_exp_gaussian_quadrature",
    "integral_exp_gaussian",
    "integral_exp_monomial",
    "build_integral_vector",
    "MAX_MONOMIAL_DEGREE",
    "DIGIT_LOSS_LIMIT",
]

_MONOMIAL_RULE_ORDER = 24
MAX_MONOMIAL_DEGREE = 12
# closed form is flagged once the erfc difference has lost this many digits
DIGIT_LOSS_LIMIT = 8
DEFAULT_QUADRATURE_ORDER = 32

_SQRT_PI_2 = 0.5 * math.sqrt(math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule of order ``n`` on ``[-1, 1]``."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


def _legendre_newton(n: int, tol: float = 1e-15, maxiter: int = 100):
    # Tricomi initial guesses, refined by Newton on P_n via the three-term recurrence
    k = np.arange(1, n + 1)
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(maxiter):
        p0 = np.ones_like(x)
        p1 = x.copy()
        for m in range(2, n + 1):
            p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        dx = p1 / dp
        x = x - dx
        if np.max(np.abs(dx)) < tol:
            break
    # one more evaluation for the derivative at the converged nodes
    p0 = np.ones_like(x)
    p1 = x.copy()
    for m in range(2, n + 1):
        p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    # ascending order, exactly symmetric
    x = x[::-1]
    w = w[::-1]
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    return x, w


_rule_lock = threading.Lock()


@lru_cache(maxsize=None)
def _cached_rule(n: int) -> QuadratureRule:
    x, w = _legendre_newton(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(n, x, w)


def gauss_legendre(n: int = DEFAULT_QUADRATURE_ORDER) -> QuadratureRule:
    """Return the cached ``n``-point Gauss-Legendre rule (2 <= n <= 128)."""
    if int(n) != n or not 2 <= n <= 128:
        raise ValueError(f"quadrature order must be an integer in [2, 128], got {n!r}")
    with _rule_lock:
        return _cached_rule(int(n))


def log_erfc(x):
    """``log(erfc(x))`` without underflow for large positive ``x``."""
    x = np.asarray(x, dtype=float)
    # erfc(x) = erfcx(x) exp(-x^2) for x >= 0; erfc(x) is in [1, 2] for x < 0
    out = np.where(x >= 0, np.log(erfcx(np.abs(x))) - x * x, np.log(erfc(np.minimum(x, 0.0))))
    return float(out) if out.ndim == 0 else out


def integral_exp_const(lo, hi):
    """``e^hi - e^lo`` evaluated as ``e^hi (1 - e^(lo - hi))``."""
    return math.exp(hi) * -math.expm1(lo - hi)


@dataclass(frozen=True)
class IntegralRequest:
    """One Gaussian integral ``int_lo^hi e^lam exp(-((lam - center)/(gamma width))^2) dlam``."""

    lo: float
    hi: float
    center: float
    gamma: float
    width: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"need hi > lo, got [{self.lo}, {self.hi}]")
        if not (self.gamma > 0 and self.width > 0):
            raise ValueError("gamma and width must be positive")

    def integrand(self, lam):
        z = (lam - self.center) / (self.gamma * self.width)
        return np.exp(lam - z * z)


class GaussianIntegral(NamedTuple):
    value: float
    log_value: float
    degraded: bool
    digits_lost: float


def integral_exp_gaussian_closed(req: IntegralRequest) -> GaussianIntegral:
    """Gaussian integral from the erfc closed form, assembled in log space.

    With ``s = gamma * width`` and the shifted peak ``m = center + s^2/2``,
    the integral equals ``e^(center + s^2/4) s sqrt(pi)/2 [erf(a) - erf(b)]``
    where ``a = (m - lo)/s`` and ``b = (m - hi)/s``.  When ``a`` and ``b`` share
    a sign the erf difference is written as a ratio of erfc values so that
    ``erf(a) - erf(b) = erfc(b) [1 - exp(log erfc(a) - log erfc(b))]``; the
    Gaussian factor of ``erfc`` is folded into the exponential prefactor,
    which then simplifies to ``hi - ((hi - center)/s)^2`` (or the same at
    ``lo``) and cannot overflow.

    ``degraded`` is set when the erfc difference has lost more than
    ``DIGIT_LOSS_LIMIT`` decimal digits to cancellation.
    """
    lo, hi, c = float(req.lo), float(req.hi), float(req.center)
    s = req.gamma * req.width
    # a = (m - lo)/s with m never formed: m is huge when s is
    a = 0.5 * s + (c - lo) / s
    b = 0.5 * s + (c - hi) / s
    a_minus_b = (hi - lo) / s
    log_pref = math.log(s * _SQRT_PI_2)

    if b >= 0.0:
        # both arguments on the right tail: erf(a) - erf(b) = erfc(b) - erfc(a)
        la, lb = math.log(erfcx(a)), math.log(erfcx(b))
        sq = a_minus_b * (a + b)
        delta = la - lb - sq
        log_diff = math.log(-math.expm1(delta)) if delta < 0 else -math.inf
        base = hi - ((hi - c) / s) ** 2 + lb
        scale = abs(la) + abs(lb) + abs(sq)
    elif a <= 0.0:
        # both on the left tail: erf(a) - erf(b) = erfc(-a) - erfc(-b)
        la, lb = math.log(erfcx(-a)), math.log(erfcx(-b))
        sq = -a_minus_b * (b + a)
        delta = lb - la - sq
        log_diff = math.log(-math.expm1(delta)) if delta < 0 else -math.inf
        base = lo - ((lo - c) / s) ** 2 + la
        scale = abs(la) + abs(lb) + abs(sq)
    else:
        # straddles the peak: both erf terms add, no cancellation
        log_diff = math.log(erf(a) - erf(b))
        base = c + 0.25 * s * s
        delta = -1.0
        scale = 1.0

    # relative error of delta is about eps * scale / |delta|
    if math.isfinite(log_diff):
        digits_lost = max(0.0, math.log10(scale / abs(delta)))
    else:
        digits_lost = math.inf

    log_value = base + log_pref + log_diff
    value = math.exp(log_value) if math.isfinite(log_value) else 0.0
    return GaussianIntegral(value, log_value, digits_lost > DIGIT_LOSS_LIMIT, digits_lost)


def integral_exp_gaussian_quadrature(req: IntegralRequest, rule: QuadratureRule | int = DEFAULT_QUADRATURE_ORDER) -> float:
    """Gaussian integral by Gauss-Legendre quadrature on the mapped interval."""
    if not isinstance(rule, QuadratureRule):
        rule = gauss_legendre(rule)
    half = 0.5 * (req.hi - req.lo)
    mid = 0.5 * (req.hi + req.lo)
    lam = half * rule.nodes + mid
    return float(half * np.dot(rule.weights, req.integrand(lam)))


def integral_exp_gaussian(req: IntegralRequest, order: int = DEFAULT_QUADRATURE_ORDER) -> float:
    """Closed form, falling back to quadrature when the closed form is flagged."""
    res = integral_exp_gaussian_closed(req)
    if res.degraded:
        return integral_exp_gaussian_quadrature(req, order)
    return res.value


def _monomial_piece(a: float, b: float, k: int, rule: QuadratureRule) -> float:
    half = 0.5 * (b - a)
    x = a + half * (rule.nodes + 1.0)
    return half * float(np.dot(rule.weights, np.exp(x) * x ** k))


def integral_exp_monomial(lo, hi, k: int):
    """``int_lo^hi e^lam lam^k dlam``.

    The integrand keeps one sign on each side of the origin, so Gauss-Legendre
    on pieces split at zero (and at most 2 wide) is accurate relative to the
    result.  Differencing the exact antiderivative is not: near zero and for
    negative ``lam`` its two terms cancel.
    """
    if int(k) != k or not 0 <= k <= MAX_MONOMIAL_DEGREE:
        raise ValueError(f"monomial degree must be in [0, {MAX_MONOMIAL_DEGREE}], got {k!r}")
    k = int(k)
    lo, hi = float(lo), float(hi)
    if k == 0:
        return integral_exp_const(lo, hi) if hi >= lo else -integral_exp_const(hi, lo)
    if hi < lo:
        return -integral_exp_monomial(hi, lo, k)
    rule = gauss_legendre(_MONOMIAL_RULE_ORDER)
    cuts = [lo] + ([0.0] if lo < 0.0 < hi else []) + [hi]
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, math.ceil((b - a) / 2.0))
        edges = np.linspace(a, b, n + 1)
        total += sum(_monomial_piece(edges[j], edges[j + 1], k, rule) for j in range(n))
    return total


def build_integral_vector(nodes, lo, hi, gamma, include_constant=True, width=None,
                          route="closed", order=DEFAULT_QUADRATURE_ORDER):
    """Integral vector ``(l_0, ..., l_{p-1}[, l_const])`` for a Gaussian basis on ``nodes``.

    ``nodes`` is a :class:`~rbfsolver.basis.NodeSet` or a sequence of centers;
    ``width`` defaults to the node set's width scale, else ``hi - lo``.
    ``route`` is ``"closed"`` (closed form with quadrature fallback) or
    ``"quadrature"``.
    """
    centers = getattr(nodes, "nodes", nodes)
    if width is None:
        width = getattr(nodes, "width_scale", hi - lo)
    out = []
    for c in np.asarray(centers, dtype=float):
        req = IntegralRequest(lo, hi, float(c), gamma, width)
        if route == "closed":
            out.append(integral_exp_gaussian(req, order))
        elif route == "quadrature":
            out.append(integral_exp_gaussian_quadrature(req, order))
        else:
            raise ValueError(f"unknown route {route!r}")
    if include_constant:
        out.append(integral_exp_const(lo, hi))
    return np.array(out)
