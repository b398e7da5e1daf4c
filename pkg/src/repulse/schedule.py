"""Variance-preserving noise schedule and time-dependent weightings.

The forward process is the linear-beta VP-SDE

    dx = -0.5 beta(t) x dt + sqrt(beta(t)) dW,   beta(t) = b0 + (b1 - b0) t/T,

whose marginal coefficients are alpha(t) = exp(-0.5 * int_0^t beta) and
sigma(t) = sqrt(1 - alpha(t)^2), so alpha^2 + sigma^2 = 1 for every t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DiffusionSchedule", "WeightingSpec", "lambda_weight", "timestep_iter"]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta VP schedule on [0, t_final]."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_final: float = 1.0
    num_steps: int = 1000

    def __post_init__(self):
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ValueError("require 0 < beta_min <= beta_max")
        if self.t_final <= 0:
            raise ValueError("t_final must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")

    def beta(self, t):
        t = np.asarray(t, dtype=float)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.t_final

    def beta_integral(self, t):
        """int_0^t beta(s) ds, closed form for the linear schedule."""
        t = np.asarray(t, dtype=float)
        return self.beta_min * t + (self.beta_max - self.beta_min) * t**2 / (2.0 * self.t_final)

    def _check_domain(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.t_final):
            raise ValueError(f"time outside [0, {self.t_final}]")
        return t

    def alpha_sigma(self, t):
        """Return (alpha(t), sigma(t)); scalars in, scalars out."""
        t = self._check_domain(t)
        alpha = np.exp(-0.5 * self.beta_integral(t))
        sigma = np.sqrt(np.maximum(1.0 - alpha**2, 0.0))
        if np.ndim(t) == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def snr(self, t):
        alpha, sigma = self.alpha_sigma(t)
        return alpha / sigma


@dataclass(frozen=True)
class WeightingSpec:
    """Time weighting for the score-matching regularizer.

    ``inverse_snr`` scales the base weight by sigma(t)/alpha(t); ``unit``
    keeps it constant. ``sigma_v`` and ``rho`` are carried along so a task
    config is self-contained, but the explicit 1/(2 sigma_v^2), 1/(2 rho^2)
    factors live in the loss terms, not here.
    """

    lambda_base: float = 1.0
    mode: str = "inverse_snr"
    sigma_v: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if self.lambda_base < 0:
            raise ValueError("lambda_base must be >= 0")
        if self.mode not in ("inverse_snr", "unit"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")

    def weight(self, t, schedule: DiffusionSchedule):
        if self.mode == "unit":
            return self.lambda_base if np.ndim(t) == 0 else np.full(np.shape(t), self.lambda_base)
        alpha, sigma = schedule.alpha_sigma(t)
        return self.lambda_base * sigma / alpha


def lambda_weight(t, spec: WeightingSpec, schedule: DiffusionSchedule):
    """lambda_t = lambda * sigma/alpha (inverse_snr) or lambda (unit)."""
    return spec.weight(t, schedule)


def timestep_iter(schedule: DiffusionSchedule, order: str, count: int, seed: int = 0) -> np.ndarray:
    """Sequence of sampler times.

    ``descending`` spaces ``count`` times evenly from t_final down to
    t_final/count; ``uniform_random`` draws ``count`` i.i.d. times on
    (0, t_final], reproducibly from ``seed``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    T = schedule.t_final
    if order == "descending":
        return T * np.arange(count, 0, -1, dtype=float) / count
    if order == "uniform_random":
        rng = np.random.default_rng(seed)
        # 1 - U[0,1) lands in (0, 1]
        return T * (1.0 - rng.random(count))
    raise ValueError(f"unknown timestep order {order!r}")
