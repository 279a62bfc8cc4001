"""Reverse and inverse recurrences, the masked dual sampler and ablation pipelines.

Latent index ``t`` runs from 0 (the input image) to ``T - 1``. Reverse steps
map ``t -> t - 1``; inversion maps ``t -> t + 1``. Every function accepts a
single image ``(H, W, C)`` or a batch ``(N, H, W, C)``. For batches the
``rng`` argument may be a list with one generator per image, so results do
not depend on how images are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .denoiser import Denoiser, eps_to_x0
from .errors import ConsistencyError, ParameterError
from .grid import as_mask, hadamard_mix, write_rfi
from .schedule import NoiseSchedule, q_sample
from .seeding import generator

VARIANTS = ("diffuse", "ddpm", "ddim", "ddim_ddpm", "ddpm_ddim")
ABLATIONS = ("ddpm", "ddim_ddpm", "ddpm_ddim", "ddim")


def image_streams(seed: int, indices: Sequence[int]) -> list[np.random.Generator]:
    """One counter-based generator per image, keyed by ``(seed, index)``."""
    return [generator(seed, "sampling", i) for i in indices]


def draw_noise(rng, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(rng) != shape[0]:
        raise ParameterError(f"{len(rng)} generators for a batch of {shape[0]}")
    return np.stack([g.standard_normal(shape[1:]) for g in rng])


def _reverse_update(x_t, eps_hat, t: int, sched: NoiseSchedule, sigma: float, noise=None):
    a_prev = sched.alpha_hat_prev(t)
    dir_var = 1.0 - a_prev - sigma**2
    if dir_var < -1e-12:
        raise ConsistencyError(f"sigma^2 exceeds 1 - alpha_hat_prev at t={t}")
    out = np.sqrt(a_prev) * eps_to_x0(x_t, eps_hat, t, sched) + np.sqrt(max(dir_var, 0.0)) * eps_hat
    if noise is not None and sigma > 0:
        out = out + sigma * noise
    return out


def _check_reverse_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t < sched.T:
        raise ParameterError(f"reverse step needs 1 <= t < {sched.T}, got {t}")


def ddpm_sigma(t: int, sched: NoiseSchedule, eta: float = 1.0) -> float:
    # the last step into the output image is noise-free
    return 0.0 if t <= 1 else eta * float(sched.ddpm_sigmas[t])


def ddpm_step(x_t, t: int, den: Denoiser, sched: NoiseSchedule, rng, eta: float = 1.0) -> np.ndarray:
    """Stochastic reverse step ``t -> t - 1``; ``eta=0`` reduces it to :func:`ddim_step`."""
    _check_reverse_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    sigma = ddpm_sigma(t, sched, eta)
    noise = draw_noise(rng, x_t.shape) if sigma > 0 else None
    return _reverse_update(x_t, den.predict_eps(x_t, t), t, sched, sigma, noise)


def ddim_step(x_t, t: int, den: Denoiser, sched: NoiseSchedule) -> np.ndarray:
    _check_reverse_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    return _reverse_update(x_t, den.predict_eps(x_t, t), t, sched, 0.0)


def ddim_invert(x0, K: int, den: Denoiser, sched: NoiseSchedule, trace: list | None = None) -> np.ndarray:
    """Deterministically push the image up to latent ``K`` (``K = 0`` is the identity)."""
    steps = sched.latent_index(K)
    x = np.array(x0, dtype=np.float64)
    ah = sched.alpha_hats
    for t in range(steps):
        eps = den.predict_eps(x, t)
        a, a_next = ah[t], ah[t + 1]
        x = x + np.sqrt(a_next) * (
            (np.sqrt(1.0 / a) - np.sqrt(1.0 / a_next)) * x
            + (np.sqrt(1.0 / a_next - 1.0) - np.sqrt(1.0 / a - 1.0)) * eps
        )
        if trace is not None:
            trace.append({"phase": "invert", "t": t + 1, "x": x})
    return x


def ddim_chain(x, start: int, den: Denoiser, sched: NoiseSchedule, trace: list | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    for t in range(start, 0, -1):
        x = ddim_step(x, t, den, sched)
        if trace is not None:
            trace.append({"phase": "reverse", "t": t - 1, "x": x})
    return x


def ddpm_chain(x, start: int, den: Denoiser, sched: NoiseSchedule, rng, trace: list | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    for t in range(start, 0, -1):
        x = ddpm_step(x, t, den, sched, rng)
        if trace is not None:
            trace.append({"phase": "reverse", "t": t - 1, "x": x})
    return x


def diffuse_counterfactual(x0, m, K: int, den: Denoiser, sched: NoiseSchedule, rng,
                           trace: list | None = None) -> np.ndarray:
    """Invert with DDIM, then walk back fusing DDPM (mask = 1) and DDIM (mask = 0).

    Both branches at each step start from the same fused latent and share one
    noise prediction.
    """
    m = as_mask(m)
    x = ddim_invert(x0, K, den, sched)
    for t in range(sched.latent_index(K), 0, -1):
        eps = den.predict_eps(x, t)
        sigma = ddpm_sigma(t, sched)
        noise = draw_noise(rng, x.shape) if sigma > 0 else None
        x_ddpm = _reverse_update(x, eps, t, sched, sigma, noise)
        x_ddim = _reverse_update(x, eps, t, sched, 0.0)
        x = hadamard_mix(x_ddpm, x_ddim, m)
        if trace is not None:
            trace.append({"phase": "reverse", "t": t - 1, "ddpm": x_ddpm, "ddim": x_ddim, "x": x})
    return x


def ablation_pipeline(variant: str, x0, K: int, den: Denoiser, sched: NoiseSchedule, rng,
                      trace: list | None = None) -> np.ndarray:
    """Unmasked noising/denoising combinations, named ``<noising>_<denoising>``.

    ``ddpm`` and ``ddim`` are shorthand for ``ddpm_ddpm`` and ``ddim_ddim``.
    """
    if variant not in ABLATIONS:
        raise ParameterError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")
    x0 = np.asarray(x0, dtype=np.float64)
    k = sched.latent_index(K)
    if k == 0:
        return x0.copy()
    if variant in ("ddpm", "ddpm_ddim"):
        x = q_sample(x0, k, draw_noise(rng, x0.shape), sched)
    else:
        x = ddim_invert(x0, K, den, sched)
    if variant in ("ddpm", "ddim_ddpm"):
        return ddpm_chain(x, k, den, sched, rng, trace)
    return ddim_chain(x, k, den, sched, trace)


@dataclass
class SamplerRun:
    """One sampler invocation; ``trace`` collects per-step latents when enabled."""

    K: int
    seed: int = 0
    variant: str = "diffuse"
    trace: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.K < 0:
            raise ParameterError(f"K must be non-negative, got {self.K}")

    def run(self, x0, den: Denoiser, sched: NoiseSchedule, mask=None, indices: Sequence[int] | None = None):
        x0 = np.asarray(x0, dtype=np.float64)
        if indices is None:
            rng = generator(self.seed, "sampling", 0)
            if x0.ndim == 4:
                rng = image_streams(self.seed, range(len(x0)))
        else:
            rng = image_streams(self.seed, indices)
        if self.variant == "diffuse":
            if mask is None:
                raise ParameterError("the diffuse variant needs a mask")
            return diffuse_counterfactual(x0, mask, self.K, den, sched, rng, self.trace)
        return ablation_pipeline(self.variant, x0, self.K, den, sched, rng, self.trace)


def dump_trace(trace: list, run_dir, key: str = "x") -> None:
    """Write each recorded latent as ``<phase>/step_%04d.rfi``, named by latent
    index; ``phase`` is ``invert`` or ``reverse``."""
    run_dir = Path(run_dir)
    for entry in trace:
        x = entry[key]
        folder = run_dir / entry.get("phase", "reverse")
        folder.mkdir(parents=True, exist_ok=True)
        write_rfi(folder / f"step_{entry['t']:04d}.rfi", x if x.ndim == 3 else x[0])
