"""Coefficient vectors for one multistep update.

Every solver here advances ``x`` over ``[lo, hi]`` in half log-SNR as

    x_hi = (sigma_hi / sigma_lo) x_lo + sigma_hi * sum_j c_j X_j

and differs only in how ``c`` is chosen.  Only the ``p`` coefficients that
multiply model evaluations are exposed; the constant-basis entry of the RBF
system never touches data.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .basis import NodeSet, build_kernel_system
from .quadrature import (
    DEFAULT_QUADRATURE_ORDER,
    build_integral_vector,
    integral_exp_const,
    integral_exp_monomial,
)

__all__ = [
    "Provenance",
    "CoefficientVector",
    "rbf_coefficients",
    "adams_coefficients",
    "equal_coefficients",
    "euler_coefficients",
    "unipc_coefficients",
    "coefficient_magnitude_ratio",
    "psi_functions",
]


class Provenance(enum.Enum):
    RBF = "rbf"
    ADAMS = "adams"
    EQUAL = "equal"
    EULER = "euler"
    UNIPC = "unipc"


@dataclass(frozen=True)
class CoefficientVector:
    """Evaluation coefficients ``c_0..c_{p-1}`` for the step ``interval = (lo, hi)``.

    ``gamma`` is set only for RBF provenance.  ``condition`` is the kernel
    condition estimate when one was computed.
    """

    values: np.ndarray
    interval: tuple
    provenance: Provenance
    gamma: float | None = None
    include_constant: bool = True
    condition: float | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "interval", (float(self.interval[0]), float(self.interval[1])))

    @property
    def p(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def apply(self, evaluations):
        """``sum_j c_j X_j`` for evaluations stacked on axis 0, newest first."""
        X = np.asarray(evaluations, dtype=float)
        return np.tensordot(self.values, X, axes=(0, 0))


def _check_interval(lo, hi):
    if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
        raise ValueError(f"need a finite interval with hi > lo, got [{lo}, {hi}]")


def rbf_coefficients(nodes: NodeSet, lo: float, hi: float, gamma: float,
                     include_constant: bool = True, route: str = "closed",
                     order: int = DEFAULT_QUADRATURE_ORDER) -> CoefficientVector:
    """Gaussian-RBF coefficients from ``Phi^T c = l``.

    Raises :class:`~rbfsolver.basis.SingularKernelError` when the kernel is
    ill-conditioned; the caller decides whether to fall back to Adams.
    """
    _check_interval(lo, hi)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    p = nodes.p
    if p == 1 and include_constant:
        # Phi = [[1, 1], [1, 0]] gives c_0 = l_const exactly
        return CoefficientVector([integral_exp_const(lo, hi)], (lo, hi), Provenance.RBF,
                                 float(gamma), True, 1.0)
    system = build_kernel_system(nodes, gamma, include_constant)
    rhs = build_integral_vector(nodes, lo, hi, gamma, include_constant=include_constant,
                                route=route, order=order)
    c = system.solve(rhs, trans=1)
    return CoefficientVector(c[:p], (lo, hi), Provenance.RBF, float(gamma),
                             include_constant, system.condition)


def adams_coefficients(nodes: NodeSet, lo: float, hi: float) -> CoefficientVector:
    """Lagrange-integral coefficients ``c = V^{-T} l`` with monomial integrals ``l``.

    The monomials are shifted to the newest node and scaled by the step
    width before the Vandermonde solve; this only equilibrates the system.
    """
    _check_interval(lo, hi)
    p = nodes.p
    if p == 1:
        return CoefficientVector([integral_exp_const(lo, hi)], (lo, hi), Provenance.ADAMS)
    shift = float(nodes.nodes[0])
    scale = hi - lo
    u = (nodes.nodes - shift) / scale
    V = np.vander(u, p, increasing=True)
    # int_lo^hi e^lam ((lam - shift)/scale)^k dlam
    l = np.array([
        math.exp(shift) * integral_exp_monomial(lo - shift, hi - shift, k) / scale ** k
        for k in range(p)
    ])
    c = scipy.linalg.solve(V.T, l, check_finite=False)
    return CoefficientVector(c, (lo, hi), Provenance.ADAMS)


def equal_coefficients(p: int, lo: float, hi: float) -> CoefficientVector:
    """All ``p`` entries equal to ``(e^hi - e^lo) / p``."""
    if int(p) != p or p < 1:
        raise ValueError(f"p must be a positive integer, got {p!r}")
    _check_interval(lo, hi)
    p = int(p)
    return CoefficientVector(np.full(p, integral_exp_const(lo, hi) / p), (lo, hi), Provenance.EQUAL)


def euler_coefficients(lo: float, hi: float) -> CoefficientVector:
    _check_interval(lo, hi)
    return CoefficientVector([integral_exp_const(lo, hi)], (lo, hi), Provenance.EULER)


def psi_functions(h: float, kmax: int) -> np.ndarray:
    """``psi_k(h) = int_0^1 e^{(r-1) h} r^{k-1} / (k-1)! dr`` for ``k = 1..kmax``.

    Summed as ``sum_n (-h)^n / (n + k)!`` for small ``h``, otherwise by the
    recursion ``psi_{k+1} = (1/k! - psi_k) / h``, which is stable there.
    """
    out = np.empty(kmax)
    if h <= 2.0:
        for k in range(1, kmax + 1):
            term = 1.0 / math.factorial(k)
            total = term
            n = 0
            while abs(term) > 1e-18 * abs(total):
                n += 1
                term *= -h / (n + k)
                total += term
            out[k - 1] = total
    else:
        out[0] = -math.expm1(-h) / h
        for k in range(1, kmax):
            out[k] = (1.0 / math.factorial(k) - out[k - 1]) / h
    return out


def unipc_coefficients(nodes: NodeSet, lo: float, hi: float) -> CoefficientVector:
    """Coefficients from the UniPC-style r-system (``B(h) = h``).

    With ``r_m = (lambda_m - lo) / h`` and ``r_0 = 0``, the reduced system
    ``sum_m a~_m r_m^(k-1) = k! psi_{k+1}(h)`` (``k = 1..p-1``) gives
    ``a_m = a~_m / r_m``, and ``a_0 = psi_1(h) - sum_m a_m``.  The result is
    converted to the ``sigma``-scaled convention by ``c_m = h e^hi a_m``.
    """
    _check_interval(lo, hi)
    lam = nodes.nodes
    if lam[0] != lo:
        raise ValueError("the newest node must coincide with the interval start")
    p = nodes.p
    h = hi - lo
    psi = psi_functions(h, p)
    a = np.empty(p)
    if p > 1:
        r = (lam[1:] - lo) / h
        R = np.vander(r, p - 1, increasing=True).T       # R[k-1, m-1] = r_m^(k-1)
        rhs = np.array([math.factorial(k) * psi[k] for k in range(1, p)])
        a_tilde = scipy.linalg.solve(R, rhs, check_finite=False)
        a[1:] = a_tilde / r
        a[0] = psi[0] - a[1:].sum()
    else:
        a[0] = psi[0]
    c = h * math.exp(hi) * a
    return CoefficientVector(c, (lo, hi), Provenance.UNIPC)


def coefficient_magnitude_ratio(c) -> np.ndarray:
    """``|c_j| / sum_k |c_k|``."""
    v = np.abs(np.asarray(getattr(c, "values", c), dtype=float))
    total = v.sum()
    if not total > 0:
        raise ValueError("coefficient vector is all zero")
    return v / total
