"""Noise predictors: analytic Gaussian / mixture oracles and a trainable MLP.

Every denoiser exposes ``predict_eps(x_t, t)`` for images of shape
``(..., H, W, C)`` and a single integer timestep.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, DimensionError, FormatError, ParameterError, TrainingError
from .schedule import NoiseSchedule
from .seeding import generator

log = logging.getLogger(__name__)

DNZ_MAGIC = b"DNZ1"


class Denoiser(Protocol):
    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


def eps_to_x0(x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Clean-image estimate implied by a noise prediction."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"eps shape {eps_hat.shape} does not match latent {x_t.shape}")
    a = sched.alpha_hats[sched.check_t(t)]
    return (x_t - np.sqrt(1.0 - a) * eps_hat) / np.sqrt(a)


def _x0_to_eps(x_t, x0, a):
    return (x_t - np.sqrt(a) * x0) / np.sqrt(1.0 - a)


# -- analytic priors ------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior:
    """``x0 ~ N(mean, variance I)``; ``variance`` may also be a per-pixel array."""

    mean: np.ndarray
    variance: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.variance) <= 0):
            raise ParameterError("prior variance must be positive")


def _posterior_gain(var, a):
    return np.sqrt(a) * var / (a * var + 1.0 - a)


def _gaussian_posterior_mean(mean, var, x_t, a):
    return mean + _posterior_gain(var, a) * (x_t - np.sqrt(a) * mean)


def predict_eps_gaussian(prior: GaussianPrior, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = np.asarray(prior.mean, dtype=np.float64)
    if x_t.shape[-mean.ndim:] != mean.shape:
        raise DimensionError(f"latent {x_t.shape} does not match prior mean {mean.shape}")
    a = sched.alpha_hats[sched.check_t(t)]
    return _x0_to_eps(x_t, _gaussian_posterior_mean(mean, prior.variance, x_t, a), a)


@dataclass(frozen=True)
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray  # (K, H, W, C)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError("mixture weights must be positive and sum to 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise ParameterError("component variances must be positive")
        if len(self.means) != len(w) or len(self.variances) != len(w):
            raise ParameterError("weights, means and variances disagree in length")


def gmm_responsibilities(prior: GmmPrior, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Posterior component probabilities given the latent, shape ``(..., K)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    means = np.asarray(prior.means, dtype=np.float64)
    a = sched.alpha_hats[sched.check_t(t)]
    img_axes = tuple(range(-means.ndim + 1, 0))
    d = means[0].size
    logs = []
    for w, mu, var in zip(prior.weights, means, prior.variances):
        s2 = a * var + 1.0 - a
        sq = np.sum((x_t - np.sqrt(a) * mu) ** 2, axis=img_axes)
        logs.append(np.log(w) - 0.5 * sq / s2 - 0.5 * d * np.log(2 * np.pi * s2))
    logs = np.stack(logs, axis=-1)
    return np.exp(logs - logsumexp(logs, axis=-1, keepdims=True))


def predict_eps_gmm(prior: GmmPrior, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    means = np.asarray(prior.means, dtype=np.float64)
    if x_t.shape[-(means.ndim - 1):] != means.shape[1:]:
        raise DimensionError(f"latent {x_t.shape} does not match component shape {means.shape[1:]}")
    a = sched.alpha_hats[sched.check_t(t)]
    resp = gmm_responsibilities(prior, x_t, t, sched)
    x0 = np.zeros_like(x_t)
    expand = (Ellipsis,) + (None,) * (means.ndim - 1)
    for k, (mu, var) in enumerate(zip(means, prior.variances)):
        x0 = x0 + resp[..., k][expand] * _gaussian_posterior_mean(mu, var, x_t, a)
    return _x0_to_eps(x_t, x0, a)


@dataclass(frozen=True)
class GaussianDenoiser:
    prior: GaussianPrior
    sched: NoiseSchedule

    def predict_eps(self, x_t, t):
        return predict_eps_gaussian(self.prior, x_t, t, self.sched)


@dataclass(frozen=True)
class GmmDenoiser:
    prior: GmmPrior
    sched: NoiseSchedule

    def predict_eps(self, x_t, t):
        return predict_eps_gmm(self.prior, x_t, t, self.sched)


class ZeroDenoiser:
    """Predicts zero noise everywhere."""

    def predict_eps(self, x_t, t):
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))


def fit_gaussian_prior(images) -> GaussianPrior:
    """Per-pixel mean with a pooled isotropic variance."""
    x = np.asarray(images, dtype=np.float64)
    if x.shape[0] < 2:
        raise DataError("need at least two images to fit a prior")
    mean = x.mean(axis=0)
    return GaussianPrior(mean, max(float(x.var(axis=0).mean()), 1e-6))


# -- trainable network ----------------------------------------------------


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


Layers = list  # list[tuple[np.ndarray, np.ndarray]]


def init_layers(in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator) -> Layers:
    sizes = [in_dim, *hidden, out_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / fan_in) if i < len(sizes) - 2 else np.sqrt(1.0 / fan_in)
        layers.append((rng.standard_normal((fan_in, fan_out)) * scale, np.zeros(fan_out)))
    return layers


def mlp_forward(layers: Layers, inp: np.ndarray, keep: bool = False):
    acts = [inp]
    h = inp
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return (h, acts) if keep else h


def simple_loss_and_grads(layers: Layers, inp: np.ndarray, eps: np.ndarray):
    """Mean squared noise-prediction error and its parameter gradients.

    ``inp`` is the network input (flattened latents with time embedding),
    ``eps`` the flattened true noise, both batched along axis 0.
    """
    out, acts = mlp_forward(layers, inp, keep=True)
    diff = out - eps
    loss = float(np.mean(diff**2))
    g = 2.0 * diff / diff.size
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ w.T) * (acts[i] > 0)
    return loss, grads


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-4
    ema_decay: float = 0.99
    seed: int = 0
    hidden: tuple = (512, 512)
    embed_dim: int = 32
    log_every: int = 500

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ParameterError("iterations, batch size and learning rate must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ParameterError(f"EMA decay must lie in (0, 1), got {self.ema_decay}")
        if len(self.hidden) < 2:
            raise ParameterError("the network needs at least two hidden layers")


@dataclass
class MlpDenoiser:
    """Residual MLP on top of a full-covariance Gaussian denoiser.

    ``predict_eps = gaussian_eps(x_t, t) + mlp([x_t, embed(t)])``. The
    closed-form base carries the full-rank identity part of the noise
    prediction, which a narrow MLP cannot represent, together with the
    pixel correlations of the training set; the network learns the
    non-Gaussian correction. The base covariance is
    ``U diag(eigvals) U^T + floor (I - U U^T)``. ``layers`` are the raw optimizer iterates,
    ``ema_layers`` the averaged weights used for prediction.
    """

    image_shape: tuple
    embed_dim: int
    layers: Layers
    ema_layers: Layers
    base_mean: np.ndarray
    base_basis: np.ndarray  # (D, R) orthonormal columns
    base_eigvals: np.ndarray  # (R,)
    base_floor: float
    alpha_hats: np.ndarray
    step: int = 0
    losses: list = field(default_factory=list)

    def network_input(self, x_t: np.ndarray, t) -> np.ndarray:
        flat = x_t.reshape(x_t.shape[0], -1)
        emb = time_embedding(t, self.embed_dim)
        if emb.shape[0] == 1:
            emb = np.broadcast_to(emb, (flat.shape[0], self.embed_dim))
        return np.concatenate([flat, emb], axis=1)

    def base_eps(self, x_t: np.ndarray, t) -> np.ndarray:
        """Gaussian-prior noise prediction; ``t`` is a scalar or one step per batch item."""
        a = self.alpha_hats[np.asarray(t)]
        if np.ndim(a):
            a = a.reshape((-1,) + (1,) * (x_t.ndim - 1))
        n = x_t.shape[0]
        a_col = np.broadcast_to(np.reshape(a, (-1, 1)), (n, 1))
        r = (x_t - np.sqrt(a) * self.base_mean).reshape(n, -1)
        g_floor = _posterior_gain(self.base_floor, a_col)
        g_eig = _posterior_gain(self.base_eigvals[None, :], a_col) - g_floor
        x0 = self.base_mean.reshape(1, -1) + g_floor * r + ((r @ self.base_basis) * g_eig) @ self.base_basis.T
        return _x0_to_eps(x_t, x0.reshape(x_t.shape), a)

    def predict_eps(self, x_t, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[-3:] != tuple(self.image_shape):
            raise DimensionError(f"latent {x_t.shape} does not match model shape {self.image_shape}")
        if not 0 <= t < len(self.alpha_hats):
            raise ParameterError(f"timestep {t} outside [0, {len(self.alpha_hats)})")
        batch = x_t.reshape((-1, *self.image_shape))
        out = mlp_forward(self.ema_layers, self.network_input(batch, int(t))).reshape(batch.shape)
        return (self.base_eps(batch, int(t)) + out).reshape(x_t.shape)


def new_mlp(images, sched: NoiseSchedule, cfg: TrainConfig, rng: np.random.Generator) -> MlpDenoiser:
    d = int(np.prod(images.shape[1:]))
    layers = init_layers(d + cfg.embed_dim, cfg.hidden, d, rng)
    mean, basis, eigvals, floor = fit_covariance_base(images)
    return MlpDenoiser(tuple(images.shape[1:]), cfg.embed_dim, layers, [(w.copy(), b.copy()) for w, b in layers],
                       mean, basis, eigvals, floor, sched.alpha_hats)


def _principal_axes(x):
    mean = x.mean(axis=0)
    flat = (x - mean).reshape(len(x), -1)
    # thin SVD: covariance eigenvectors without forming the D x D matrix
    _, sv, vt = np.linalg.svd(flat, full_matrices=False)
    return mean, vt.T, sv**2 / max(len(x) - 1, 1)


def fit_covariance_base(images, holdout: float = 0.2, min_floor: float = 1e-4):
    """Mean, principal axes and isotropic floor of a Gaussian fit to ``images``.

    The floor is the per-dimension energy that a fit on the first
    ``1 - holdout`` of the images leaves unexplained on the rest, so
    unseen images do not carry large components along directions the
    model believes are nearly deterministic. Axes whose variance does not
    exceed the floor are dropped.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or len(x) < 2:
        raise DataError("need at least two (H, W, C) images to fit a covariance")
    floor = min_floor
    n_fit = int(round(len(x) * (1.0 - holdout)))
    if 2 <= n_fit < len(x):
        mean, axes, _ = _principal_axes(x[:n_fit])
    if 2 <= n_fit < len(x) and axes.shape[1] < axes.shape[0]:
        rest = (x[n_fit:] - mean).reshape(len(x) - n_fit, -1)
        resid = rest - (rest @ axes) @ axes.T
        floor = max(float((resid**2).sum(axis=1).mean()) / (rest.shape[1] - axes.shape[1]), min_floor)
    mean, axes, eigvals = _principal_axes(x)
    keep = eigvals > floor
    return mean, axes[:, keep].copy(), eigvals[keep], floor


class _Adam:
    def __init__(self, layers: Layers, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
        self.n = 0

    def step(self, layers: Layers, grads) -> None:
        self.n += 1
        c1 = 1.0 - self.b1**self.n
        c2 = 1.0 - self.b2**self.n
        for i, (params, g) in enumerate(zip(layers, grads)):
            for j in range(2):
                m, v = self.m[i][j], self.v[i][j]
                m *= self.b1
                m += (1.0 - self.b1) * g[j]
                v *= self.b2
                v += (1.0 - self.b2) * g[j] ** 2
                p = params[j]
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(ema: Layers, layers: Layers, decay: float) -> None:
    for (ew, eb), (w, b) in zip(ema, layers):
        ew *= decay
        ew += (1.0 - decay) * w
        eb *= decay
        eb += (1.0 - decay) * b


def train_denoiser(images, sched: NoiseSchedule, cfg: TrainConfig, model: MlpDenoiser | None = None) -> MlpDenoiser:
    """Fit the network to the simple noise-prediction objective.

    Timesteps are drawn uniformly from ``[0, T)``. Passing ``model`` resumes
    from it: iteration numbering continues and the optimizer moments restart.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or len(x) == 0:
        raise DataError("training needs a non-empty stack of (H, W, C) images")
    rng = generator(cfg.seed, "training", 0 if model is None else model.step)
    if model is None:
        model = new_mlp(x, sched, cfg, rng)
    elif tuple(model.image_shape) != x.shape[1:]:
        raise DataError(f"dataset shape {x.shape[1:]} does not match checkpoint {model.image_shape}")
    opt = _Adam(model.layers, cfg.learning_rate)
    n = cfg.batch_size
    for _ in range(cfg.iterations):
        idx = rng.integers(0, len(x), n)
        t = rng.integers(0, sched.T, n)
        eps = rng.standard_normal((n, *x.shape[1:]))
        a = sched.alpha_hats[t][:, None, None, None]
        x_t = np.sqrt(a) * x[idx] + np.sqrt(1.0 - a) * eps
        target = (eps - model.base_eps(x_t, t)).reshape(n, -1)
        loss, grads = simple_loss_and_grads(model.layers, model.network_input(x_t, t), target)
        model.step += 1
        if not np.isfinite(loss):
            raise TrainingError("training loss is not finite", model.step)
        opt.step(model.layers, grads)
        ema_update(model.ema_layers, model.layers, cfg.ema_decay)
        model.losses.append(loss)
        if cfg.log_every and model.step % cfg.log_every == 0:
            log.info("step %d loss %.5f", model.step, loss)
    return model


# -- checkpoint -----------------------------------------------------------


def save_checkpoint(model: MlpDenoiser, path) -> None:
    """Write the ``DNZ1`` checkpoint.

    Layout (little-endian): magic, int32 layer count, per layer int32
    (fan_in, fan_out), int32 H, W, C, embed_dim, step, then float32 blocks:
    weights and bias of every raw layer, the same for the EMA layers, and
    finally the Gaussian base: mean (H*W*C), int32 rank R, float32 floor,
    R eigenvalues and the (H*W*C, R) basis in row-major order.
    """
    with open(path, "wb") as f:
        f.write(DNZ_MAGIC)
        f.write(struct.pack("<i", len(model.layers)))
        for w, _ in model.layers:
            f.write(struct.pack("<2i", *w.shape))
        f.write(struct.pack("<5i", *model.image_shape, model.embed_dim, model.step))
        for group in (model.layers, model.ema_layers):
            for w, b in group:
                f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.base_mean, dtype="<f4").tobytes())
        f.write(struct.pack("<i", model.base_eigvals.size))
        f.write(struct.pack("<f", model.base_floor))
        f.write(np.ascontiguousarray(model.base_eigvals, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.base_basis, dtype="<f4").tobytes())


def load_checkpoint(path, sched: NoiseSchedule) -> MlpDenoiser:
    """Read a ``DNZ1`` checkpoint; the schedule is not stored and must match training."""
    raw = Path(path).read_bytes()
    if raw[:4] != DNZ_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")

    def block(count, off):
        return np.frombuffer(raw, "<f4", count, off).astype(np.float64), off + 4 * count

    try:
        (n,) = struct.unpack_from("<i", raw, 4)
        off = 8
        shapes = []
        for _ in range(n):
            shapes.append(struct.unpack_from("<2i", raw, off))
            off += 8
        h, w, c, embed_dim, step = struct.unpack_from("<5i", raw, off)
        off += 20
        groups = []
        for _ in range(2):
            layers = []
            for fi, fo in shapes:
                wt, off = block(fi * fo, off)
                b, off = block(fo, off)
                layers.append((wt.reshape(fi, fo), b))
            groups.append(layers)
        mean, off = block(h * w * c, off)
        (rank,) = struct.unpack_from("<i", raw, off)
        (floor,) = struct.unpack_from("<f", raw, off + 4)
        off += 8
        if rank < 0:
            raise ValueError("negative rank")
        eigvals, off = block(rank, off)
        basis, off = block(h * w * c * rank, off)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return MlpDenoiser((h, w, c), embed_dim, groups[0], groups[1], mean.reshape(h, w, c),
                       basis.reshape(h * w * c, rank), eigvals, float(floor), sched.alpha_hats, step)
