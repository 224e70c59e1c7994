"""Per-step shape parameter search against a target trajectory.

After the evaluation at ``t_{i+1}`` the corrector into ``t_{i+1}`` and the
predictor out of ``t_{i+1}`` are chosen together by minimizing the error of
the two-step prediction at ``t_{i+2}``.  The two-step prediction is linear
in the two coefficient vectors, so every candidate pair is scored from the
same cached evaluations without calling the model again.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .sampler import (
    ADAMS,
    DEFAULT_THRESHOLD,
    EvaluationHistory,
    Method,
    ModelEvaluator,
    ShapeSchedule,
    SolverConfig,
    coefficients_for,
    corrector_nodes,
    predictor_nodes,
    predictor_order,
    sample,
)
from .schedule import NoiseSchedule, TimeGrid, build_time_grid

__all__ = [
    "MODES",
    "TargetPair",
    "SearchSpec",
    "SearchResult",
    "intermediate_target",
    "generate_target_set",
    "candidate_log_gammas",
    "composite_two_step_prediction",
    "search_shape_parameters",
    "optimize_shape_parameters",
    "batch_average_schedules",
    "schedule_mse",
]

MODES = ("split-joint", "split-independent", "shared")


@dataclass(frozen=True)
class TargetPair:
    x0_target: np.ndarray
    xT_target: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0_target, dtype=float)
        xT = np.asarray(self.xT_target, dtype=float)
        if x0.shape != xT.shape or x0.ndim != 1:
            raise ValueError("target pair vectors must share one dimension")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(xT))):
            raise ValueError("target pair must be finite")
        object.__setattr__(self, "x0_target", x0)
        object.__setattr__(self, "xT_target", xT)


@dataclass(frozen=True)
class SearchSpec:
    """Grid-search settings.

    Candidates are ``resolution`` equally spaced log gammas over
    ``log_gamma_range``; any at or above ``threshold`` become the Adams
    marker, and with ``include_adams_candidate`` the marker is appended when
    the range does not already reach the threshold.
    """

    log_gamma_range: tuple = (-2.0, 2.0)
    resolution: int = 33
    mode: str = "split-joint"
    include_adams_candidate: bool = True
    threshold: float = DEFAULT_THRESHOLD
    batch: tuple | None = None

    def __post_init__(self):
        lo, hi = (float(v) for v in self.log_gamma_range)
        if not lo < hi:
            raise ValueError("log_gamma_range needs lo < hi")
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise ValueError("resolution must be an integer >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch is not None:
            if len(self.batch) == 0:
                raise ValueError("batch must be nonempty")
            object.__setattr__(self, "batch", tuple(self.batch))
        object.__setattr__(self, "log_gamma_range", (lo, hi))


def candidate_log_gammas(spec: SearchSpec) -> np.ndarray:
    lo, hi = spec.log_gamma_range
    cands = np.linspace(lo, hi, int(spec.resolution))
    cands[cands >= spec.threshold] = ADAMS
    if spec.include_adams_candidate and not np.any(np.isinf(cands)):
        cands = np.append(cands, ADAMS)
    return cands


def intermediate_target(schedule: NoiseSchedule, pair: TargetPair, t: float) -> np.ndarray:
    """``alpha_t x0_target + sigma_t xT_target``."""
    alpha, sigma = schedule.alpha_sigma(t)
    return alpha * pair.x0_target + sigma * pair.xT_target


def generate_target_set(model: ModelEvaluator, schedule: NoiseSchedule, reference_nfe: int = 200,
                        n_pairs: int = 128, seed: int = 0, order: int = 3) -> list[TargetPair]:
    """Draw seeded standard-normal noise and solve each to data with the Adams
    predictor-corrector at ``reference_nfe`` steps."""
    if reference_nfe < 100:
        raise ValueError("reference_nfe must be at least 100")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    rng = np.random.default_rng(seed)
    xT = rng.standard_normal((n_pairs, model.dim))
    grid = build_time_grid(schedule, reference_nfe)
    cfg = SolverConfig(order=order, method=Method.ADAMS)
    x0 = sample(model, grid, cfg, xT).x0
    return [TargetPair(a, b) for a, b in zip(x0, xT)]


def _stack_targets(pairs):
    return (np.stack([p.x0_target for p in pairs]), np.stack([p.xT_target for p in pairs]))


def _targets_at(grid: TimeGrid, x0, xT, k: int):
    # the last grid time is where the targets were produced, so x0 is the target there
    if k == grid.M:
        return x0
    return grid.alphas[k] * x0 + grid.sigmas[k] * xT


def _coeff_set(method, nodes, lo, hi, log_gammas, cfg):
    out = []
    for lg in log_gammas:
        c = coefficients_for(method, nodes, lo, hi, float(lg), cfg.include_constant, cfg.threshold)
        out.append(c.values)
    return np.array(out)


def composite_two_step_prediction(x_i, history: EvaluationHistory, grid: TimeGrid, cfg: SolverConfig,
                                  i: int, log_gamma_corr: float, log_gamma_pred: float):
    """``x_pred_{i+2}`` from the corrector into ``t_{i+1}`` followed by the
    predictor out of ``t_{i+1}``; the history must already hold the
    evaluation at ``t_{i+1}``."""
    if i + 2 > grid.M:
        raise ValueError("no step i+2 on this grid")
    if len(history) < 2 or history.lambdas[0] != grid.lambdas[i + 1]:
        raise ValueError("history must contain the evaluation at t_{i+1} and one before it")
    pc = min(predictor_order(cfg, i, grid.M), len(history) - 1)
    pp = min(predictor_order(cfg, i + 1, grid.M), len(history))
    nodes_c = corrector_nodes(grid, i, pc, cfg.corrector_width)
    nodes_p = predictor_nodes(grid, i + 1, pp)
    _, Xc = history.latest(pc + 1)
    _, Xp = history.latest(pp)
    cc = coefficients_for(Method.RBF, nodes_c, grid.lambdas[i], grid.lambdas[i + 1], log_gamma_corr,
                          cfg.include_constant, cfg.threshold)
    cp = coefficients_for(Method.RBF, nodes_p, grid.lambdas[i + 1], grid.lambdas[i + 2], log_gamma_pred,
                          cfg.include_constant, cfg.threshold)
    s = grid.sigmas
    x_corr = (s[i + 1] / s[i]) * np.asarray(x_i) + s[i + 1] * cc.apply(Xc)
    return (s[i + 2] / s[i + 1]) * x_corr + s[i + 2] * cp.apply(Xp)


@dataclass
class SearchResult:
    schedule: ShapeSchedule
    step_losses: np.ndarray          # chosen training loss per step i = 0..M-2
    adams_losses: np.ndarray         # loss of the Adams/Adams pair on the same state
    candidates_per_step: list = field(default_factory=list)
    nfe: int = 0
    final_x: np.ndarray | None = None


def _pair_losses(R, sigma, U, V, chunk_bytes=64 << 20):
    # loss[k, m] = sum || R + sigma (U_k + V_m) ||^2 over the batch
    K, Mv = U.shape[0], V.shape[0]
    per_k = Mv * R.size * 8
    step = max(1, chunk_bytes // max(per_k, 1))
    out = np.empty((K, Mv))
    for k0 in range(0, K, step):
        S = R[None, None] + sigma * (U[k0:k0 + step, None] + V[None, :])
        out[k0:k0 + step] = np.einsum("kmbd,kmbd->km", S, S)
    return out


def _index_of(cands, value):
    if math.isinf(value):
        hits = np.flatnonzero(np.isinf(cands))
        return int(hits[0]) if hits.size else int(np.argmax(cands))
    return int(np.argmin(np.abs(np.where(np.isinf(cands), np.inf, cands) - value)))


def _pick(losses, lg_corr, lg_pred, allowed, scale):
    """Argmin with ties broken toward Adams, then toward larger log gamma."""
    L = np.where(allowed & np.isfinite(losses), losses, np.inf)
    best = L.min()
    if not np.isfinite(best):
        raise FloatingPointError("loss is non-finite for every candidate")
    tol = 1e-10 * best + 1e-24 * scale
    ties = np.argwhere(L <= best + tol)

    def key(km):
        c, p = lg_corr[km[0]], lg_pred[km[1]]
        return (math.isinf(p) + math.isinf(c), p, c)

    k, m = max(ties, key=key)
    return int(k), int(m)


def search_shape_parameters(model: ModelEvaluator, grid: TimeGrid, spec: SearchSpec, targets=None,
                            order: int = 3, include_constant: bool = True,
                            lower_order_final: bool = False, corrector_width: str = "current") -> SearchResult:
    """Greedy per-step grid search over ``(log_gamma_corr[i], log_gamma_pred[i+1])``."""
    targets = list(targets if targets is not None else (spec.batch or ()))
    if not targets:
        raise ValueError("empty target batch")
    M = grid.M
    if M < 2:
        raise ValueError("need at least two steps")
    cfg = SolverConfig(order=order, method=Method.RBF, include_constant=include_constant,
                       lower_order_final=lower_order_final, corrector_width=corrector_width,
                       threshold=spec.threshold)
    x0, xT = _stack_targets(targets)
    cands = candidate_log_gammas(spec)
    n = cands.size
    scale = float(np.sum(x0 * x0) + np.sum(xT * xT))

    log_pred = np.full(M, math.nan)
    log_corr = np.full(M - 1, math.nan)
    step_losses = np.empty(M - 1)
    adams_losses = np.empty(M - 1)
    counts = []
    lam, s = grid.lambdas, grid.sigmas
    start = model.nfe

    x = xT.copy()
    hist = EvaluationHistory(order + 1)
    hist.push(lam[0], model(x, lam[0]))
    prev_pred = 0.0 if spec.mode == "split-independent" else None
    for i in range(M):
        # predictor out of t_i with the parameter chosen at the previous step
        pp = min(predictor_order(cfg, i, M), len(hist))
        _, Xp = hist.latest(pp)
        lg = ADAMS if math.isnan(log_pred[i]) else log_pred[i]
        cp = coefficients_for(Method.RBF, predictor_nodes(grid, i, pp), lam[i], lam[i + 1], lg,
                              include_constant, spec.threshold)
        x_pred = (s[i + 1] / s[i]) * x + s[i + 1] * np.tensordot(cp.values, Xp, axes=(0, 0))
        if i >= M - 1:
            x = x_pred
            break
        X_new = model(x_pred, lam[i + 1])
        if not np.all(np.isfinite(X_new)):
            raise FloatingPointError(f"non-finite model output at step {i + 1}")
        hist.push(lam[i + 1], X_new)

        pc = min(predictor_order(cfg, i, M), len(hist) - 1)
        pn = min(predictor_order(cfg, i + 1, M), len(hist))
        nodes_c = corrector_nodes(grid, i, pc, corrector_width)
        nodes_p = predictor_nodes(grid, i + 1, pn)
        _, Xc = hist.latest(pc + 1)
        _, Xn = hist.latest(pn)
        Cc = _coeff_set(Method.RBF, nodes_c, lam[i], lam[i + 1], cands, cfg)
        Cp = _coeff_set(Method.RBF, nodes_p, lam[i + 1], lam[i + 2], cands, cfg)
        U = np.tensordot(Cc, Xc, axes=(1, 0))          # (n, B, D)
        V = np.tensordot(Cp, Xn, axes=(1, 0))
        R = (s[i + 2] / s[i]) * x - _targets_at(grid, x0, xT, i + 2)

        if spec.mode == "split-joint":
            allowed = np.ones((n, n), bool)
            losses = _pair_losses(R, s[i + 2], U, V)
            k, m = _pick(losses, cands, cands, allowed, scale)
            counts.append(int(allowed.sum()))
        elif spec.mode == "shared":
            losses = np.full((n, n), np.inf)
            diag = np.einsum("kbd,kbd->k", *(2 * [R[None] + s[i + 2] * (U + V)]))
            losses[np.arange(n), np.arange(n)] = diag
            k, m = _pick(losses, cands, cands, np.eye(n, dtype=bool), scale)
            counts.append(n)
        else:
            # corrector first with the predictor held at its previous best, then the predictor
            m0 = _index_of(cands, prev_pred)
            losses = np.full((n, n), np.inf)
            losses[:, m0] = _pair_losses(R, s[i + 2], U, V[m0:m0 + 1])[:, 0]
            col = np.zeros((n, n), bool)
            col[:, m0] = True
            k, _ = _pick(losses, cands, cands, col, scale)
            losses[k, :] = _pair_losses(R, s[i + 2], U[k:k + 1], V)[0]
            row = np.zeros((n, n), bool)
            row[k, :] = True
            _, m = _pick(losses, cands, cands, row, scale)
            counts.append(2 * n)
        if np.any(np.isinf(cands)):
            a = _index_of(cands, ADAMS)
            if not np.isfinite(losses[a, a]):
                losses[a, a] = _pair_losses(R, s[i + 2], U[a:a + 1], V[a:a + 1])[0, 0]
            adams_losses[i] = losses[a, a]
        else:
            adams_losses[i] = math.nan
        step_losses[i] = losses[k, m]
        log_corr[i], log_pred[i + 1] = cands[k], cands[m]
        prev_pred = cands[m]

        # advance the state with the chosen corrector
        x = (s[i + 1] / s[i]) * x + s[i + 1] * U[k]
    schedule = ShapeSchedule(log_pred, log_corr, spec.threshold, order, spec.mode)
    return SearchResult(schedule, step_losses, adams_losses, counts, model.nfe - start, x)


def optimize_shape_parameters(model: ModelEvaluator, schedule: NoiseSchedule, grid: TimeGrid,
                              spec: SearchSpec, targets=None, order: int = 3, batch_size: int | None = None,
                              jobs: int = 1, **kw) -> ShapeSchedule:
    """Optimized :class:`ShapeSchedule`.

    With ``batch_size`` the targets are split into batches that are searched
    independently and averaged with :func:`batch_average_schedules`.
    """
    targets = list(targets if targets is not None else (spec.batch or ()))
    if not targets:
        raise ValueError("empty target batch")
    if grid.M < 3:
        raise ValueError("need a grid with at least three steps")
    if batch_size is None or batch_size >= len(targets):
        return search_shape_parameters(model, grid, spec, targets, order, **kw).schedule
    chunks = [targets[k:k + batch_size] for k in range(0, len(targets), batch_size)]
    run = lambda chunk: search_shape_parameters(model, grid, spec, chunk, order, **kw).schedule
    if jobs > 1 and model.thread_safe:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    return batch_average_schedules(results)


def batch_average_schedules(schedules) -> ShapeSchedule:
    """Element-wise mean of log gammas; a slot marked Adams in any input stays Adams."""
    schedules = list(schedules)
    if not schedules:
        raise ValueError("nothing to average")
    first = schedules[0]
    if any(s.nfe != first.nfe for s in schedules):
        raise ValueError("schedules have different lengths")

    def avg(arrays):
        A = np.stack(arrays)
        unset = np.isnan(A)
        marked = np.isinf(A)
        numeric = ~(unset | marked)
        total = np.where(numeric, A, 0.0).sum(axis=0)
        count = numeric.sum(axis=0)
        out = np.divide(total, count, out=np.full(total.shape, np.nan), where=count > 0)
        return np.where(marked.any(axis=0), ADAMS, out)

    pred = avg([s.log_gamma_pred for s in schedules])
    corr = avg([s.log_gamma_corr for s in schedules])
    return ShapeSchedule(pred, corr, first.threshold, first.order, first.mode)


def schedule_mse(model: ModelEvaluator, grid: TimeGrid, shape: ShapeSchedule, targets, order: int = 3,
                 **cfg_kw) -> float:
    """Mean squared error of the final sample against ``x0_target`` over the batch."""
    x0, xT = _stack_targets(targets)
    cfg = SolverConfig(order=order, method=Method.RBF, shape=shape, threshold=shape.threshold, **cfg_kw)
    out = sample(model, grid, cfg, xT).x0
    return float(np.mean(np.sum((out - x0) ** 2, axis=-1)))
