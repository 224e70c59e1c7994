"""Multistep predictor-corrector sampling over an abstract data-prediction model.

One evaluation per step: the model is called at ``t_0``, then after each
predictor step except the last.  The corrector reuses that evaluation, so a
run over ``M`` steps costs exactly ``M`` model calls.
"""
from __future__ import annotations

import enum
import json
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .basis import NodeSet, SingularKernelError
from .coeffs import (
    CoefficientVector,
    Provenance,
    adams_coefficients,
    coefficient_magnitude_ratio,
    equal_coefficients,
    euler_coefficients,
    rbf_coefficients,
)
from .schedule import TimeGrid

__all__ = [
    "ADAMS",
    "DEFAULT_THRESHOLD",
    "MAX_ORDER",
    "Method",
    "ModelEvaluator",
    "EvaluationHistory",
    "ShapeSchedule",
    "SolverConfig",
    "SolverState",
    "SampleResult",
    "NonFiniteStateError",
    "coefficients_for",
    "select_coefficients",
    "predictor_nodes",
    "corrector_nodes",
    "predictor_order",
    "predictor_step",
    "corrector_step",
    "sample",
    "write_trace",
]

MAX_ORDER = 8
DEFAULT_THRESHOLD = 2.0
# log-gamma marker meaning "use Adams coefficients"
ADAMS = math.inf


class Method(enum.Enum):
    RBF = "rbf"
    ADAMS = "adams"
    EQUAL = "equal"
    EULER = "euler"


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step, where):
        self.step = step
        super().__init__(f"non-finite values in {where} at step {step}")


class ModelEvaluator:
    """Counts calls to a data-prediction model ``fn(x, lam) -> x0_hat``.

    ``x`` may be a single state ``(D,)`` or a batch ``(B, D)``; one call is one
    function evaluation regardless of batch size.  ``thread_safe`` declares
    whether the wrapped callable tolerates concurrent calls.
    """

    def __init__(self, fn: Callable, dim: int, name: str = "model", thread_safe: bool = True):
        self.fn = fn
        self.dim = int(dim)
        self.name = name
        self.thread_safe = thread_safe
        self._lock = threading.Lock()
        self.nfe = 0

    def __call__(self, x, lam: float):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"{self.name}: expected trailing dimension {self.dim}, got {x.shape}")
        with self._lock:
            self.nfe += 1
        out = np.asarray(self.fn(x, float(lam)), dtype=float)
        return np.broadcast_to(out, x.shape).copy() if out.shape != x.shape else out

    def reset(self):
        with self._lock:
            self.nfe = 0


class EvaluationHistory:
    """Most-recent-first ring buffer of ``(lam, evaluation)`` pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, lam: float, value):
        if self._items and not lam > self._items[0][0]:
            raise ValueError("new node must have a larger lambda than the newest stored one")
        self._items.appendleft((float(lam), np.asarray(value, dtype=float)))

    def __len__(self):
        return len(self._items)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([lam for lam, _ in self._items])

    def latest(self, k: int):
        """``(lambdas, stacked evaluations)`` of the ``k`` newest entries."""
        if k > len(self._items):
            raise ValueError(f"history holds {len(self._items)} entries, {k} requested")
        items = list(self._items)[:k]
        return np.array([lam for lam, _ in items]), np.stack([v for _, v in items])

    def copy(self) -> "EvaluationHistory":
        other = EvaluationHistory(self.capacity)
        other._items = deque(self._items, maxlen=self.capacity)
        return other


def _entry_to_json(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    if math.isinf(v):
        return "adams"
    return float(v)


def _entry_from_json(v):
    if v is None:
        return math.nan
    if v == "adams":
        return ADAMS
    return float(v)


@dataclass
class ShapeSchedule:
    """Per-step log shape parameters.

    ``log_gamma_pred[i]`` is used by the predictor that leaves ``t_i``
    (``i = 0..M-1``; entry 0 is never optimized) and ``log_gamma_corr[i]`` by
    the corrector into ``t_{i+1}`` (``i = 0..M-2``).  ``+inf`` marks Adams and
    ``nan`` marks an unset entry, which is treated as Adams.  Any finite value
    at or above ``threshold`` is stored as the Adams marker.
    """

    log_gamma_pred: np.ndarray
    log_gamma_corr: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    order: int | None = None
    mode: str = "split-joint"

    def __post_init__(self):
        pred = np.array(self.log_gamma_pred, dtype=float).reshape(-1)
        corr = np.array(self.log_gamma_corr, dtype=float).reshape(-1)
        if corr.size != max(pred.size - 1, 0):
            raise ValueError("need M predictor entries and M-1 corrector entries")
        for arr in (pred, corr):
            if np.any(arr == -np.inf):
                raise ValueError("log gamma may not be -inf")
            arr[arr >= self.threshold] = ADAMS
        self.log_gamma_pred, self.log_gamma_corr = pred, corr

    @property
    def nfe(self) -> int:
        return self.log_gamma_pred.size

    @classmethod
    def constant(cls, M: int, log_gamma: float, threshold: float = DEFAULT_THRESHOLD, **kw):
        return cls(np.full(M, float(log_gamma)), np.full(max(M - 1, 0), float(log_gamma)), threshold, **kw)

    @classmethod
    def adams(cls, M: int, threshold: float = DEFAULT_THRESHOLD, **kw):
        return cls.constant(M, ADAMS, threshold, **kw)

    def to_json(self) -> dict:
        M = self.nfe
        entries = []
        for i in range(M):
            entries.append({
                "i": i,
                "log_gamma_pred": _entry_to_json(self.log_gamma_pred[i]),
                "log_gamma_corr": _entry_to_json(self.log_gamma_corr[i]) if i < M - 1 else None,
            })
        return {"nfe": M, "order": self.order, "mode": self.mode,
                "threshold": self.threshold, "entries": entries}

    @classmethod
    def from_json(cls, data: dict) -> "ShapeSchedule":
        M = int(data["nfe"])
        entries = sorted(data["entries"], key=lambda e: e["i"])
        if [e["i"] for e in entries] != list(range(M)):
            raise ValueError("schedule entries must cover i = 0..nfe-1")
        pred = [_entry_from_json(e.get("log_gamma_pred")) for e in entries]
        corr = [_entry_from_json(e.get("log_gamma_corr")) for e in entries[:M - 1]]
        return cls(pred, corr, float(data.get("threshold", DEFAULT_THRESHOLD)),
                   data.get("order"), data.get("mode", "split-joint"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "ShapeSchedule":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    For ``Method.RBF`` the shape comes from ``shape`` when given, otherwise the
    constant ``log_gamma``.  ``corrector_method`` lets the corrector use a
    different family (ablations); by default it follows ``method``.  Euler is
    the one-step predictor-only update, so it requires ``order == 1`` and
    never corrects.
    """

    order: int = 3
    method: Method = Method.RBF
    use_corrector: bool = True
    include_constant: bool = True
    log_gamma: float = 0.0
    shape: ShapeSchedule | None = None
    corrector_method: Method | None = None
    warmup: str = "ramp-order"
    lower_order_final: bool = False
    corrector_width: str = "current"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.corrector_method is not None:
            object.__setattr__(self, "corrector_method", Method(self.corrector_method))
        if int(self.order) != self.order or not 1 <= self.order <= MAX_ORDER:
            raise ValueError(f"order must be in [1, {MAX_ORDER}], got {self.order!r}")
        if self.method is Method.EULER:
            if self.order != 1:
                raise ValueError("Euler is first order; use order=1")
            object.__setattr__(self, "use_corrector", False)
        if self.warmup != "ramp-order":
            raise ValueError("only the 'ramp-order' warm-up is supported")
        if self.corrector_width not in ("current", "next"):
            raise ValueError("corrector_width must be 'current' or 'next'")

    @property
    def corr_method(self) -> Method:
        return self.corrector_method or self.method

    def log_gamma_at(self, role: str, i: int) -> float:
        if self.shape is not None:
            arr = self.shape.log_gamma_pred if role == "pred" else self.shape.log_gamma_corr
            v = float(arr[i])
            return ADAMS if math.isnan(v) else v
        return float(self.log_gamma)


def coefficients_for(method: Method, nodes: NodeSet, lo: float, hi: float,
                     log_gamma: float = 0.0, include_constant: bool = True,
                     threshold: float = DEFAULT_THRESHOLD) -> CoefficientVector:
    """Dispatch one coefficient computation; RBF falls back to Adams at the
    threshold or when the kernel system is singular."""
    if method is Method.EULER:
        return euler_coefficients(lo, hi)
    if method is Method.EQUAL:
        return equal_coefficients(nodes.p, lo, hi)
    if method is Method.RBF and log_gamma < threshold:
        try:
            return rbf_coefficients(nodes, lo, hi, math.exp(log_gamma), include_constant)
        except SingularKernelError:
            pass
    return adams_coefficients(nodes, lo, hi)


def predictor_order(cfg: SolverConfig, i: int, M: int) -> int:
    p = min(cfg.order, i + 1)
    if cfg.lower_order_final:
        p = min(p, M - i)
    return p


def predictor_nodes(grid: TimeGrid, i: int, p_eff: int) -> NodeSet:
    return NodeSet(grid.lambdas[i::-1][:p_eff], grid.widths[i])


def _corrector_width(grid: TimeGrid, i: int, mode: str) -> float:
    if mode == "next" and i + 1 < grid.M:
        return grid.widths[i + 1]
    return grid.widths[i]


def corrector_nodes(grid: TimeGrid, i: int, p_eff: int, width: str = "current") -> NodeSet:
    return NodeSet(grid.lambdas[i + 1::-1][:p_eff + 1], _corrector_width(grid, i, width))


def select_coefficients(cfg: SolverConfig, i: int, nodes: NodeSet, interval, role: str = "pred"):
    """Coefficients for the predictor (``role="pred"``) or corrector of step ``i``."""
    method = cfg.method if role == "pred" else cfg.corr_method
    lo, hi = interval
    return coefficients_for(method, nodes, lo, hi, cfg.log_gamma_at(role, i),
                            cfg.include_constant, cfg.threshold)


@dataclass
class SolverState:
    """Current sample, evaluation history and step index."""

    x: np.ndarray
    history: EvaluationHistory
    i: int = 0
    trace: list | None = None


class SampleResult(NamedTuple):
    x0: np.ndarray
    nfe: int
    trace: list | None


def _check_finite(arr, step, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteStateError(step, where)


def _advance(x, grid: TimeGrid, i: int, c: CoefficientVector, X):
    sigma_ratio = grid.sigmas[i + 1] / grid.sigmas[i]
    return sigma_ratio * x + grid.sigmas[i + 1] * c.apply(X)


def predictor_step(state: SolverState, grid: TimeGrid, cfg: SolverConfig, return_coeffs=False):
    """``x_pred_{i+1}`` from ``x_i`` and the ``p_eff`` newest evaluations."""
    i = state.i
    if len(state.history) == 0:
        raise ValueError("predictor needs at least one evaluation")
    p_eff = min(predictor_order(cfg, i, grid.M), len(state.history))
    nodes = predictor_nodes(grid, i, p_eff)
    _, X = state.history.latest(p_eff)
    c = select_coefficients(cfg, i, nodes, (grid.lambdas[i], grid.lambdas[i + 1]), "pred")
    x_new = _advance(state.x, grid, i, c, X)
    _check_finite(x_new, i, "predictor")
    return (x_new, c) if return_coeffs else x_new


def corrector_step(state: SolverState, grid: TimeGrid, cfg: SolverConfig, new_eval=None,
                   return_coeffs=False):
    """``x_corr_{i+1}`` from ``x_i``, using the evaluation at ``t_{i+1}``.

    ``new_eval`` is pushed onto the history when given; otherwise the newest
    history entry must already belong to ``t_{i+1}``.
    """
    i = state.i
    if new_eval is not None:
        state.history.push(grid.lambdas[i + 1], new_eval)
    if state.history.lambdas[0] != grid.lambdas[i + 1]:
        raise ValueError("history does not contain the evaluation at t_{i+1}")
    if not cfg.use_corrector:
        return (None, None) if return_coeffs else None
    p_eff = min(predictor_order(cfg, i, grid.M), len(state.history) - 1)
    nodes = corrector_nodes(grid, i, p_eff, cfg.corrector_width)
    _, X = state.history.latest(p_eff + 1)
    c = select_coefficients(cfg, i, nodes, (grid.lambdas[i], grid.lambdas[i + 1]), "corr")
    x_new = _advance(state.x, grid, i, c, X)
    _check_finite(x_new, i, "corrector")
    return (x_new, c) if return_coeffs else x_new


def _gamma_record(c: CoefficientVector | None):
    if c is None:
        return None
    return c.gamma if c.provenance is Provenance.RBF else None


def _trace_record(grid, i, c_pred, c_corr, x):
    return {
        "i": i,
        "t": float(grid.times[i + 1]),
        "lambda": float(grid.lambdas[i + 1]),
        "method": c_pred.provenance.value,
        "method_corr": c_corr.provenance.value if c_corr is not None else None,
        "gamma_pred": _gamma_record(c_pred),
        "gamma_corr": _gamma_record(c_corr),
        "coeffs": c_pred.values.tolist(),
        "coeffs_corr": c_corr.values.tolist() if c_corr is not None else None,
        "cmr": coefficient_magnitude_ratio(c_pred).tolist(),
        "x_norm": float(np.linalg.norm(x)),
    }


def sample(model: ModelEvaluator, grid: TimeGrid, cfg: SolverConfig, x_T, trace: bool = False) -> SampleResult:
    """Run the predictor-corrector loop from ``t_0`` to ``t_M``.

    Returns the final predictor output, the number of model calls (always
    ``M``) and, when ``trace`` is set, one record per step.
    """
    M = grid.M
    if cfg.shape is not None and cfg.shape.nfe != M:
        raise ValueError(f"shape schedule is for {cfg.shape.nfe} steps, grid has {M}")
    x = np.array(x_T, dtype=float)
    _check_finite(x, 0, "initial state")
    start = model.nfe
    state = SolverState(x, EvaluationHistory(cfg.order + 1), 0, [] if trace else None)
    X0 = model(x, grid.lambdas[0])
    _check_finite(X0, 0, "model output")
    state.history.push(grid.lambdas[0], X0)
    for i in range(M):
        state.i = i
        x_pred, c_pred = predictor_step(state, grid, cfg, return_coeffs=True)
        if i >= M - 1:
            state.x = x_pred
            if trace:
                state.trace.append(_trace_record(grid, i, c_pred, None, x_pred))
            break
        X_new = model(x_pred, grid.lambdas[i + 1])
        _check_finite(X_new, i + 1, "model output")
        x_corr, c_corr = corrector_step(state, grid, cfg, X_new, return_coeffs=True)
        state.x = x_pred if x_corr is None else x_corr
        if trace:
            state.trace.append(_trace_record(grid, i, c_pred, c_corr, state.x))
    nfe = model.nfe - start
    if nfe != M:
        raise RuntimeError(f"evaluation count mismatch: {nfe} calls for {M} steps")
    return SampleResult(state.x, nfe, state.trace)


def write_trace(trace, path):
    """Write trace records as JSON lines."""
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
