"""Linear variance schedule and closed-form forward noising."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed tables indexed by the 0-based timestep.

    ``alpha_hats[t]`` is the cumulative signal retention of latent ``t``;
    ``ddpm_sigmas[t]`` is the stochastic scale used when stepping from ``t``
    to ``t - 1`` (with the cumulative product before step 0 taken as 1).
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_hats: np.ndarray
    ddpm_sigmas: np.ndarray

    def alpha_hat_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_hats[t - 1])

    def check_t(self, t: int) -> int:
        if not 0 <= t < self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T})")
        return int(t)

    def latent_index(self, K: int) -> int:
        """Map a noising depth ``K`` in ``[0, T]`` to the latent index it reaches.

        Depth ``T`` saturates at the last table entry ``T - 1``.
        """
        if not 0 <= K <= self.T:
            raise ParameterError(f"noise amount K={K} outside [0, {self.T}]")
        return min(int(K), self.T - 1)


def linear_schedule(T: int = 1000, beta_first: float = 1e-4, beta_last: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ParameterError(f"T must be at least 2, got {T}")
    if not 0.0 < beta_first <= beta_last < 1.0:
        raise ParameterError(f"need 0 < beta_first <= beta_last < 1, got {beta_first}, {beta_last}")
    betas = np.linspace(beta_first, beta_last, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_hats = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_hats[:-1]])
    var = (1.0 - prev) / (1.0 - alpha_hats) * (1.0 - alpha_hats / prev)
    ddpm_sigmas = np.sqrt(np.maximum(var, 0.0))
    for a in (betas, alphas, alpha_hats, ddpm_sigmas):
        a.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_hats, ddpm_sigmas)


def q_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Draw latent ``t`` from the clean image: ``sqrt(a_hat) x0 + sqrt(1 - a_hat) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match image {x0.shape}")
    a = sched.alpha_hats[sched.check_t(t)]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
