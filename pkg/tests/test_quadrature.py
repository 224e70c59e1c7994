import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbfsolver.basis import NodeSet
from rbfsolver.quadrature import (
    IntegralRequest,
    build_integral_vector,
    gauss_legendre,
    integral_exp_const,
    integral_exp_gaussian,
    integral_exp_gaussian_closed,
    integral_exp_gaussian_quadrature,
    integral_exp_monomial,
    log_erfc,
)

mpmath.mp.dps = 40


def mp_log_gaussian_erfc(req):
    # same integral from high-precision erfc values, for results below double range
    s = mpmath.mpf(req.gamma) * mpmath.mpf(req.width)
    c = mpmath.mpf(req.center)
    m = c + s * s / 2
    a, b = (m - req.lo) / s, (m - req.hi) / s
    diff = mpmath.erfc(b) - mpmath.erfc(a) if b >= 0 else mpmath.erf(a) - mpmath.erf(b)
    if a <= 0:
        diff = mpmath.erfc(-a) - mpmath.erfc(-b)
    return c + s * s / 4 + mpmath.log(s * mpmath.sqrt(mpmath.pi) / 2) + mpmath.log(diff)


def mp_gaussian(req):
    s = mpmath.mpf(req.gamma) * mpmath.mpf(req.width)
    c = mpmath.mpf(req.center)
    f = lambda lam: mpmath.exp(lam - ((lam - c) / s) ** 2)
    # split at the integrand peak so the quadrature sees a smooth piece on each side
    peak = c + s * s / 2
    pts = [req.lo] + ([peak] if req.lo < peak < req.hi else []) + [req.hi]
    return mpmath.quad(f, pts)


def test_const_integral():
    assert integral_exp_const(0.0, 0.1) == pytest.approx(math.exp(0.1) - 1, rel=1e-15)
    assert integral_exp_const(1.0, 1.0) == 0.0
    v = integral_exp_const(-700.0, -699.0)
    assert math.isfinite(v) and v > 0
    assert v == pytest.approx(math.exp(-699) * (1 - math.exp(-1)), rel=1e-14)


def test_rule_properties():
    for n in (2, 4, 8, 32, 64, 128):
        rule = gauss_legendre(n)
        assert rule.weights.sum() == pytest.approx(2.0, abs=1e-13)
        np.testing.assert_array_equal(rule.nodes, -rule.nodes[::-1])
        x, w = np.polynomial.legendre.leggauss(n)
        np.testing.assert_allclose(rule.nodes, x, atol=1e-14)
        np.testing.assert_allclose(rule.weights, w, atol=1e-14)


def test_rule_polynomial_exactness():
    for n in (2, 4, 8):
        rule = gauss_legendre(n)
        for deg in range(2 * n):
            exact = 0.0 if deg % 2 else 2.0 / (deg + 1)
            assert float(np.dot(rule.weights, rule.nodes ** deg)) == pytest.approx(exact, abs=1e-13)


def test_rule_cached_and_validated():
    assert gauss_legendre(16) is gauss_legendre(16)
    for bad in (1, 129, 2.5):
        with pytest.raises(ValueError):
            gauss_legendre(bad)


def test_log_erfc_matches_mpmath():
    for x in (-30.0, -3.0, -0.1, 0.0, 0.5, 5.0, 30.0, 1e3):
        ref = float(mpmath.log(mpmath.erfc(x)))
        assert log_erfc(x) == pytest.approx(ref, rel=1e-14, abs=1e-300)


def test_request_validation():
    with pytest.raises(ValueError):
        IntegralRequest(0.1, 0.0, 0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        IntegralRequest(0.0, 0.1, 0.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        IntegralRequest(0.0, 0.1, 0.0, 1.0, -0.1)


def test_flat_gaussian_is_const():
    req = IntegralRequest(0.0, 0.1, 0.0, 100.0, 0.1)
    assert integral_exp_gaussian_closed(req).value == pytest.approx(integral_exp_const(0, 0.1), rel=1e-4)
    # centred in the step the flatness error of gamma=1000 is below 1e-8
    req = IntegralRequest(0.0, 0.1, 0.05, 1000.0, 0.1)
    assert integral_exp_gaussian_quadrature(req, 8) == pytest.approx(integral_exp_const(0, 0.1), abs=1e-8)
    # off-centre the deficit is flatness, not quadrature: GL8 still matches the closed form
    req = IntegralRequest(0.0, 0.1, -0.1, 1000.0, 0.1)
    q8 = integral_exp_gaussian_quadrature(req, 8)
    assert q8 == pytest.approx(integral_exp_gaussian_closed(req).value, rel=1e-13)
    assert q8 == pytest.approx(integral_exp_const(0, 0.1), rel=1e-5)


def test_narrow_gaussian_far_from_interval():
    req = IntegralRequest(0.0, 0.1, -0.1, 1e-3, 0.1)
    assert abs(integral_exp_gaussian_closed(req).value) < 1e-6


def test_closed_matches_gl64_moderate():
    req = IntegralRequest(0.0, 0.1, -0.1, 1.0, 0.1)
    assert integral_exp_gaussian_closed(req).value == pytest.approx(
        integral_exp_gaussian_quadrature(req, 64), rel=1e-12)


def test_quadrature_self_convergence():
    req = IntegralRequest(0.0, 0.1, -0.1, 0.5, 0.1)
    ref = integral_exp_gaussian_closed(req).value
    e4 = abs(integral_exp_gaussian_quadrature(req, 4) - ref)
    e32 = abs(integral_exp_gaussian_quadrature(req, 32) - ref)
    assert e32 <= max(e4 * 1e-6, 1e-16 * ref)
    assert abs(integral_exp_gaussian_quadrature(req, 32) - ref) <= 1e-12 * ref


def test_closed_form_against_mpmath(rng):
    # 80-digit erfc oracle; compared in log space so values below double range count too
    worst = 0.0
    for _ in range(300):
        lo = rng.uniform(-8, 8)
        h = rng.uniform(0.01, 2.0)
        center = lo + rng.uniform(-4, 2) * h
        gamma = math.exp(rng.uniform(math.log(1e-3), math.log(1e3)))
        req = IntegralRequest(lo, lo + h, center, gamma, h)
        with mpmath.workdps(80):
            ref_log = mp_log_gaussian_erfc(req)
        got = integral_exp_gaussian_closed(req)
        assert not got.degraded
        # absolute error in the log is relative error in the value; huge logs carry eps * |log|
        worst = max(worst, abs(got.log_value - float(ref_log)) / max(1.0, abs(float(ref_log))))
    assert worst <= 1e-12


def test_quad_oracle_agrees_on_moderate_cases(rng):
    for _ in range(20):
        lo = rng.uniform(-3, 3)
        h = rng.uniform(0.1, 1.0)
        req = IntegralRequest(lo, lo + h, lo - rng.uniform(0, 2) * h, rng.uniform(0.5, 5.0), h)
        with mpmath.workdps(40):
            a = mp_gaussian(req)
            b = mpmath.exp(mp_log_gaussian_erfc(req))
        assert abs(a - b) <= 1e-25 * abs(b)


def test_route_agreement_where_gl32_resolves(rng):
    # a 32-point rule resolves the Gaussian once gamma * width is not tiny next to the step
    for _ in range(500):
        lo = rng.uniform(-5, 5)
        h = rng.uniform(0.01, 1.0)
        center = lo - int(rng.integers(0, 4)) * h * rng.uniform(0.5, 1.5)
        gamma = math.exp(rng.uniform(math.log(0.3), math.log(20.0)))
        req = IntegralRequest(lo, lo + h, center, gamma, h)
        closed = integral_exp_gaussian_closed(req).value
        q32 = integral_exp_gaussian_quadrature(req, 32)
        q64 = integral_exp_gaussian_quadrature(req, 64)
        assert abs(closed - q32) <= 1e-10 * abs(q64)


def test_degraded_flag_falls_back():
    # interval far on the right tail of a narrow Gaussian: erfc values nearly equal
    req = IntegralRequest(0.0, 1e-12, -3.0, 1.0, 1.0)
    res = integral_exp_gaussian_closed(req)
    assert res.degraded
    assert integral_exp_gaussian(req) == integral_exp_gaussian_quadrature(req, 32)


def test_monomial_integrals():
    assert integral_exp_monomial(0.0, 1.0, 1) == pytest.approx(1.0, abs=1e-15)
    assert integral_exp_monomial(0.0, 0.1, 0) == integral_exp_const(0.0, 0.1)
    rule = gauss_legendre(32)
    lam = 0.05 * rule.nodes + 0.05
    ref = 0.05 * np.dot(rule.weights, np.exp(lam) * lam ** 3)
    assert integral_exp_monomial(0.0, 0.1, 3) == pytest.approx(ref, rel=1e-13)
    with pytest.raises(ValueError):
        integral_exp_monomial(0, 1, 13)


@settings(max_examples=60, deadline=None)
@given(st.floats(-6, 6), st.floats(0.01, 2), st.integers(0, 12))
def test_monomial_against_mpmath(lo, h, k):
    hi = lo + h
    ref = mpmath.quad(lambda x: mpmath.exp(x) * x ** k, [lo, hi])
    got = integral_exp_monomial(lo, hi, k)
    # the difference of antiderivatives cancels; bound the error by their size
    F = lambda x: abs(mpmath.quad(lambda u: mpmath.exp(u) * u ** k, [0, x]))
    scale = float(F(lo) + F(hi))
    assert abs(got - float(ref)) <= 1e-14 * scale + 1e-300


def test_integral_vector(paper_nodes):
    nodes, lo, hi = paper_nodes
    vec = build_integral_vector(nodes, lo, hi, 0.7)
    assert vec.shape == (4,)
    assert vec[-1] == integral_exp_const(lo, hi)
    for j, c in enumerate(nodes.nodes):
        assert vec[j] == integral_exp_gaussian(IntegralRequest(lo, hi, c, 0.7, 0.1))
    assert build_integral_vector(nodes, lo, hi, 0.7, include_constant=False).shape == (3,)
    q = build_integral_vector(nodes, lo, hi, 0.7, route="quadrature")
    np.testing.assert_allclose(q, vec, rtol=1e-12)
    with pytest.raises(ValueError):
        build_integral_vector(nodes, lo, hi, 0.7, route="simpson")


def test_single_node_bound():
    vec = build_integral_vector(NodeSet([0.0], 0.1), 0.0, 0.1, 2.0)
    assert 0 < vec[0] <= vec[1]


def test_bound_and_limits(rng):
    for _ in range(100):
        lo, h = rng.uniform(-5, 5), rng.uniform(0.05, 1)
        c = lo - rng.uniform(0, 3) * h
        g = math.exp(rng.uniform(-2, 2))
        v = integral_exp_gaussian(IntegralRequest(lo, lo + h, c, g, h))
        assert 0 < v <= integral_exp_const(lo, lo + h) * (1 + 1e-14)
    lo, h = 0.3, 0.2
    lc = integral_exp_const(lo, lo + h)
    flat = [integral_exp_gaussian(IntegralRequest(lo, lo + h, lo - h, g, h)) / lc for g in (1, 10, 100, 1000)]
    assert all(b >= a for a, b in zip(flat, flat[1:])) and flat[-1] == pytest.approx(1, rel=1e-5)
    # a past node (one step back) goes to zero quickly
    delta = [integral_exp_gaussian(IntegralRequest(lo, lo + h, lo - h, g, h)) for g in (1, 0.1, 0.01, 0.001)]
    assert all(b <= a for a, b in zip(delta, delta[1:])) and delta[-1] < 1e-8 * lc


def test_endpoint_center_decays_linearly():
    # centered on the step start, only half a Gaussian of width gamma*h lies inside
    lo, h = 0.3, 0.2
    for g in (1e-2, 1e-3, 1e-4):
        v = integral_exp_gaussian(IntegralRequest(lo, lo + h, lo, g, h))
        assert v == pytest.approx(math.exp(lo) * g * h * math.sqrt(math.pi) / 2, rel=2 * g * h)
