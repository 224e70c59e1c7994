"""Noise schedules, the t <-> lambda bijection and timestep grids.

All schedules here are variance preserving (alpha^2 + sigma^2 = 1), so alpha
and sigma are functions of the half log-SNR ``lambda = log(alpha / sigma)``
alone.  Times run from ``T`` (pure noise) down to ``t_min`` (data).
"""
from __future__ import annotations

import abc
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

__all__ = [
    "ScheduleDomainError",
    "NoiseSchedule",
    "LinearLogSNR",
    "CosineVP",
    "TabulatedSchedule",
    "TimeGrid",
    "lambda_of_t",
    "t_of_lambda",
    "alpha_sigma",
    "vp_alpha_sigma",
    "build_time_grid",
]


class ScheduleDomainError(ValueError):
    """Raised when a time or lambda lies outside the schedule's domain."""


def _softplus(x):
    return np.logaddexp(0.0, x)


def vp_alpha_sigma(lam):
    """Return ``(alpha, sigma)`` of a variance-preserving process at half log-SNR ``lam``.

    Computed as ``alpha = sigmoid(2 lam) ** 0.5`` in log space, so neither
    factor underflows to zero for moderate ``|lam|``.
    """
    lam = np.asarray(lam, dtype=float)
    alpha = np.exp(-0.5 * _softplus(-2.0 * lam))
    sigma = np.exp(-0.5 * _softplus(2.0 * lam))
    if alpha.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


class NoiseSchedule(abc.ABC):
    """Variance-preserving noise schedule on the time interval ``[t_min, T]``."""

    kind: str = "abstract"
    t_min: float
    T: float

    @abc.abstractmethod
    def _lambda(self, t: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def _inverse(self, lam: np.ndarray) -> np.ndarray:
        ...

    # -- domain checks -------------------------------------------------
    def _check_t(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(t)) or np.any(t < self.t_min) or np.any(t > self.T):
            raise ScheduleDomainError(
                f"t outside schedule domain [{self.t_min!r}, {self.T!r}]: {t!r}"
            )
        return t

    def _check_lambda(self, lam):
        lam = np.asarray(lam, dtype=float)
        lo, hi = self.lambda_range
        if np.any(~np.isfinite(lam)) or np.any(lam < lo) or np.any(lam > hi):
            raise ScheduleDomainError(f"lambda outside [{lo!r}, {hi!r}]: {lam!r}")
        return lam

    @property
    def lambda_range(self) -> tuple[float, float]:
        """``(lambda(T), lambda(t_min))``: the smallest and largest half log-SNR."""
        return float(self._lambda(np.float64(self.T))), float(self._lambda(np.float64(self.t_min)))

    # -- public API ----------------------------------------------------
    def lambda_of_t(self, t):
        out = self._lambda(self._check_t(t))
        return float(out) if np.ndim(out) == 0 else out

    def t_of_lambda(self, lam):
        lam = self._check_lambda(lam)
        out = np.clip(self._inverse(lam), self.t_min, self.T)
        return float(out) if np.ndim(out) == 0 else out

    def alpha_sigma(self, t):
        return vp_alpha_sigma(self.lambda_of_t(t))

    def alpha_sigma_of_lambda(self, lam):
        return vp_alpha_sigma(lam)


@dataclass(frozen=True)
class LinearLogSNR(NoiseSchedule):
    """VP schedule whose half log-SNR falls linearly in t.

    ``lambda(t) = lambda_max - (lambda_max - lambda_min) * t / T``, inverted in
    closed form.
    """

    lambda_min: float = -5.0
    lambda_max: float = 5.0
    T: float = 1.0
    t_min: float | None = None
    kind: str = field(default="vp-linear-logsnr", init=False)

    def __post_init__(self):
        if self.t_min is None:
            object.__setattr__(self, "t_min", 1e-3 * self.T)
        if not (self.lambda_max > self.lambda_min):
            raise ValueError("lambda_max must exceed lambda_min")
        if not (0.0 < self.t_min < self.T):
            raise ValueError("need 0 < t_min < T")

    def _lambda(self, t):
        return self.lambda_max - (self.lambda_max - self.lambda_min) * t / self.T

    def _inverse(self, lam):
        return self.T * (self.lambda_max - lam) / (self.lambda_max - self.lambda_min)


@dataclass(frozen=True)
class CosineVP(NoiseSchedule):
    """Cosine schedule ``alpha_t = cos(theta(t)) / cos(theta(0))`` with
    ``theta(t) = (t + s) / (1 + s) * pi / 2``.

    ``T`` defaults to 0.9946 so that alpha stays bounded away from zero.
    """

    s: float = 0.008
    T: float = 0.9946
    t_min: float | None = None
    kind: str = field(default="vp-cosine", init=False)

    def __post_init__(self):
        if self.t_min is None:
            object.__setattr__(self, "t_min", 1e-3 * self.T)
        if not (0.0 < self.t_min < self.T < 1.0):
            raise ValueError("need 0 < t_min < T < 1")

    def _theta(self, t):
        return (t + self.s) / (1.0 + self.s) * (np.pi / 2.0)

    def _lambda(self, t):
        th = self._theta(t)
        th0 = self._theta(0.0)
        # 1 - alpha^2 = sin(th - th0) sin(th + th0) / cos(th0)^2, free of cancellation
        log_alpha = np.log(np.cos(th)) - np.log(np.cos(th0))
        log_sigma = 0.5 * (np.log(np.sin(th - th0)) + np.log(np.sin(th + th0))) - np.log(np.cos(th0))
        return log_alpha - log_sigma

    def _inverse(self, lam):
        alpha, _ = vp_alpha_sigma(lam)
        th = np.arccos(alpha * np.cos(self._theta(0.0)))
        return th * 2.0 * (1.0 + self.s) / np.pi - self.s


class TabulatedSchedule(NoiseSchedule):
    """Schedule from a table of ``(t, lambda)`` pairs.

    lambda(t) is interpolated with a monotone piecewise cubic (PCHIP); the
    inverse is found by bracketed root finding.
    """

    kind = "custom-tabulated"

    def __init__(self, times, lambdas):
        times = np.asarray(times, dtype=float)
        lambdas = np.asarray(lambdas, dtype=float)
        if times.ndim != 1 or times.shape != lambdas.shape or times.size < 2:
            raise ValueError("need two equal-length 1-D arrays with at least 2 entries")
        if np.any(np.diff(times) <= 0):
            raise ValueError("table times must be strictly increasing")
        if np.any(np.diff(lambdas) >= 0):
            raise ValueError("table lambdas must be strictly decreasing")
        if times[0] <= 0:
            raise ValueError("table must start at t > 0")
        self.times = times
        self.lambdas = lambdas
        self.t_min = float(times[0])
        self.T = float(times[-1])
        self._interp = PchipInterpolator(times, lambdas, extrapolate=False)

    @classmethod
    def from_csv(cls, path) -> "TabulatedSchedule":
        """Load a two-column ``t,lambda`` CSV with a header row, lambda decreasing down the file."""
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip().lower() for h in next(reader)]
            if header != ["t", "lambda"]:
                raise ValueError(f"expected header 't,lambda', got {header!r}")
            rows = [(float(a), float(b)) for a, b in (r for r in reader if r)]
        t, lam = zip(*rows)
        return cls(t, lam)

    def _lambda(self, t):
        out = np.asarray(self._interp(t), dtype=float)
        # table nodes return the stored value exactly
        idx = np.searchsorted(self.times, t)
        idx = np.clip(idx, 0, self.times.size - 1)
        hit = self.times[idx] == t
        return np.where(hit, self.lambdas[idx], out)

    def _inverse(self, lam):
        lam_arr = np.atleast_1d(lam)
        out = np.empty_like(lam_arr)
        for k, target in enumerate(lam_arr):
            j = np.flatnonzero(self.lambdas == target)
            if j.size:
                out[k] = self.times[j[0]]
                continue
            # bracket inside one table interval, then refine
            i = np.searchsorted(-self.lambdas, -target) - 1
            i = int(np.clip(i, 0, self.times.size - 2))
            a, b = self.times[i], self.times[i + 1]
            out[k] = brentq(lambda s: float(self._interp(s)) - target, a, b,
                            xtol=1e-15 * self.T, rtol=4 * np.finfo(float).eps, maxiter=200)
        return out.reshape(np.shape(lam))


def lambda_of_t(schedule: NoiseSchedule, t):
    return schedule.lambda_of_t(t)


def t_of_lambda(schedule: NoiseSchedule, lam):
    return schedule.t_of_lambda(lam)


def alpha_sigma(schedule: NoiseSchedule, t):
    return schedule.alpha_sigma(t)


@dataclass(frozen=True)
class TimeGrid:
    """Decreasing timesteps ``t_0 = T > ... > t_M = t_min`` and what they induce.

    ``widths[i] = lambdas[i + 1] - lambdas[i]`` is the step in half log-SNR.
    """

    times: np.ndarray
    lambdas: np.ndarray
    alphas: np.ndarray
    sigmas: np.ndarray
    widths: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("times", "lambdas", "alphas", "sigmas"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("a grid needs at least two timesteps")
        if np.any(np.diff(self.times) >= 0):
            raise ValueError("times must be strictly decreasing")
        widths = np.diff(self.lambdas)
        if np.any(widths <= 0):
            raise ValueError("lambdas must be strictly increasing")
        widths.setflags(write=False)
        object.__setattr__(self, "widths", widths)

    @property
    def M(self) -> int:
        return self.times.size - 1

    @property
    def h_max(self) -> float:
        return float(self.widths.max())

    @classmethod
    def from_times(cls, schedule: NoiseSchedule, times) -> "TimeGrid":
        times = np.asarray(times, dtype=float)
        lambdas = np.asarray(schedule.lambda_of_t(times), dtype=float)
        alphas, sigmas = vp_alpha_sigma(lambdas)
        return cls(times, lambdas, alphas, sigmas)


def build_time_grid(schedule: NoiseSchedule, M: int, spacing: str = "uniform-lambda") -> TimeGrid:
    """Build an ``M``-step grid from ``schedule.T`` down to ``schedule.t_min``.

    ``spacing`` is ``"uniform-lambda"`` (equal steps in half log-SNR, the
    default) or ``"uniform-t"``.
    """
    if int(M) != M or M < 1:
        raise ValueError(f"M must be a positive integer, got {M!r}")
    M = int(M)
    if spacing == "uniform-lambda":
        lam_lo, lam_hi = schedule.lambda_range
        lams = np.linspace(lam_lo, lam_hi, M + 1)
        times = np.array(schedule.t_of_lambda(lams), dtype=float)
    elif spacing == "uniform-t":
        times = np.linspace(schedule.T, schedule.t_min, M + 1)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    times[0], times[-1] = schedule.T, schedule.t_min
    return TimeGrid.from_times(schedule, times)
