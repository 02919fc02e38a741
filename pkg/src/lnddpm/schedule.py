"""Cosine noise schedule and the per-timestep coefficients derived from it.

Timesteps are 1-based at every public entry point (``t`` in ``1..T``); the
stored vectors are 0-based, so ``beta[t - 1]`` is the variance of step ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_MODES = ("posterior", "beta")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = "posterior"

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")

    def at(self, name: str, t):
        """Coefficient vector ``name`` evaluated at 1-based timestep(s) ``t``."""
        self.check_t(t)
        return getattr(self, name)[np.asarray(t) - 1]


def make_cosine_schedule(T: int, s: float = 0.008, sigma_mode: str = "posterior",
                         max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule: alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi / 2)."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not math.isfinite(s) or not 0.0 < s < 0.1:
        raise ValueError(f"offset s must be finite and in (0, 0.1), got {s!r}")
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {sigma_mode!r}")

    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ab_closed = f / f[0]
    beta = np.minimum(1.0 - ab_closed[1:] / ab_closed[:-1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    posterior_var[0] = 0.0
    sigma = np.sqrt(posterior_var if sigma_mode == "posterior" else beta)

    for arr in (beta, alpha, alpha_bar, posterior_var, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         posterior_var=posterior_var, sigma=sigma, sigma_mode=sigma_mode)
