"""Gaussian RBF interpolation with a constant term, and the Lagrange basis.

Nodes are always stored most-recent-first: ``nodes[0]`` is the newest half
log-SNR and the sequence is strictly decreasing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "MAX_NODES",
    "SINGULAR_CONDITION",
    "SingularKernelError",
    "NodeSet",
    "KernelSystem",
    "RBFInterpolant",
    "gaussian_basis",
    "build_kernel_system",
    "solve_interpolation_weights",
    "evaluate_interpolant",
    "lagrange_basis",
]

MAX_NODES = 12
SINGULAR_CONDITION = 1e14


class SingularKernelError(np.linalg.LinAlgError):
    """The kernel matrix is singular to working precision.

    Carries the condition estimate; callers usually fall back to Adams.
    """

    def __init__(self, condition: float, gamma: float):
        self.condition = condition
        self.gamma = gamma
        super().__init__(f"kernel matrix ill-conditioned (cond ~ {condition:.3g}) at gamma={gamma:.6g}")


@dataclass(frozen=True)
class NodeSet:
    """Interpolation nodes in half log-SNR, newest first, plus the width scale ``h``."""

    nodes: np.ndarray
    width_scale: float

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1)
        if not 1 <= nodes.size <= MAX_NODES:
            raise ValueError(f"need between 1 and {MAX_NODES} nodes, got {nodes.size}")
        if np.any(~np.isfinite(nodes)):
            raise ValueError("nodes must be finite")
        if np.any(np.diff(nodes) >= 0):
            raise ValueError("nodes must be pairwise distinct and strictly decreasing (newest first)")
        if not self.width_scale > 0:
            raise ValueError("width_scale must be positive")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "width_scale", float(self.width_scale))

    @property
    def p(self) -> int:
        return self.nodes.size

    def __len__(self):
        return self.nodes.size


def gaussian_basis(lam, center, gamma, h):
    """``exp(-((lam - center) / (gamma h))^2)``."""
    if not (gamma > 0 and h > 0):
        raise ValueError("gamma and h must be positive")
    z = (np.asarray(lam, dtype=float) - center) / (gamma * h)
    out = np.exp(-z * z)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelSystem:
    """Kernel matrix of a node set.

    With the constant basis the matrix is ``(p+1) x (p+1)``: the Gaussian
    block bordered by a row and column of ones and a zero corner.
    """

    phi: np.ndarray
    gamma: float
    include_constant: bool
    nodes: NodeSet
    condition: float
    _lu: tuple = field(repr=False, compare=False, default=None)

    def solve(self, rhs, trans: int = 0):
        return scipy.linalg.lu_solve(self._lu, rhs, trans=trans, check_finite=False)


def build_kernel_system(nodes: NodeSet, gamma: float, include_constant: bool = True) -> KernelSystem:
    """Assemble and factorize the kernel matrix.

    Raises :class:`SingularKernelError` when the 1-norm condition estimate
    exceeds ``SINGULAR_CONDITION``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    lam = nodes.nodes
    p = lam.size
    z = (lam[:, None] - lam[None, :]) / (gamma * nodes.width_scale)
    block = np.exp(-z * z)
    if include_constant:
        phi = np.zeros((p + 1, p + 1))
        phi[:p, :p] = block
        phi[:p, p] = 1.0
        phi[p, :p] = 1.0
    else:
        phi = block
    lu = scipy.linalg.lu_factor(phi, check_finite=False)
    if np.any(np.diag(lu[0]) == 0.0):
        raise SingularKernelError(np.inf, gamma)
    anorm = np.linalg.norm(phi, 1)
    rcond = scipy.linalg.lapack.dgecon(lu[0], anorm, norm="1")[0]
    condition = np.inf if rcond == 0 else 1.0 / rcond
    if condition > SINGULAR_CONDITION:
        raise SingularKernelError(condition, gamma)
    phi.setflags(write=False)
    return KernelSystem(phi, float(gamma), bool(include_constant), nodes, float(condition), lu)


@dataclass(frozen=True)
class RBFInterpolant:
    """Weights of ``R(lam) = sum_j w_j phi_j(lam) + w_const``."""

    weights: np.ndarray        # (p, D)
    constant: np.ndarray       # (D,)
    nodes: NodeSet
    gamma: float

    def __call__(self, lam):
        return evaluate_interpolant(self, lam)


def solve_interpolation_weights(system: KernelSystem, values) -> RBFInterpolant:
    """Solve ``Phi W = X`` for data ``values`` of shape ``(p,)`` or ``(p, D)``.

    With the constant basis, the last row of ``Phi`` enforces ``sum_j w_j = 0``.
    """
    values = np.asarray(values, dtype=float)
    scalar = values.ndim == 1
    X = values.reshape(values.shape[0], -1)
    p = system.nodes.p
    if X.shape[0] != p:
        raise ValueError(f"expected {p} data values, got {X.shape[0]}")
    if system.include_constant:
        rhs = np.vstack([X, np.zeros((1, X.shape[1]))])
        W = system.solve(rhs)
        weights, const = W[:p], W[p]
    else:
        weights, const = system.solve(X), np.zeros(X.shape[1])
    if scalar:
        weights, const = weights[:, 0], const[0]
    return RBFInterpolant(weights, np.asarray(const), system.nodes, system.gamma)


def evaluate_interpolant(interp: RBFInterpolant, lam):
    """Evaluate the interpolant at one or more ``lam``; returns shape ``(..., D)``."""
    lam = np.asarray(lam, dtype=float)
    z = (lam[..., None] - interp.nodes.nodes) / (interp.gamma * interp.nodes.width_scale)
    phi = np.exp(-z * z)
    return np.tensordot(phi, interp.weights, axes=(-1, 0)) + interp.constant


def lagrange_basis(nodes: NodeSet, j: int, lam):
    """Lagrange basis polynomial ``l_j`` on ``nodes`` evaluated at ``lam``."""
    lam_nodes = nodes.nodes
    p = lam_nodes.size
    if int(j) != j or not 0 <= j < p:
        raise IndexError(f"basis index {j!r} out of range for {p} nodes")
    lam = np.asarray(lam, dtype=float)
    out = np.ones_like(lam)
    for k in range(p):
        if k != j:
            out = out * (lam - lam_nodes[k]) / (lam_nodes[j] - lam_nodes[k])
    return float(out) if out.ndim == 0 else out
