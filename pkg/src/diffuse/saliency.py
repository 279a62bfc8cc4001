"""Editing masks: occlusion saliency against a weak lesion scorer, smoothing and
percentile binarization, and ingestion of externally produced masks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DataError, FormatError, ParameterError
from .grid import convolve_same, gaussian_kernel, percentile_value, read_rfi, write_rfi
from .seeding import generator

POOL = 4


def pooled_features(images) -> np.ndarray:
    """4x4 average pooling, flattened; images ``(N, H, W, C)`` -> ``(N, F)``."""
    x = np.asarray(images, dtype=np.float64)
    n, h, w, c = x.shape
    ph, pw = -h % POOL, -w % POOL
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    hp, wp = x.shape[1] // POOL, x.shape[2] // POOL
    return x.reshape(n, hp, POOL, wp, POOL, c).mean(axis=(2, 4)).reshape(n, -1)


@dataclass
class LesionScorer:
    """Logistic regression on standardized pooled intensities."""

    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    accuracy: float = float("nan")

    def logit(self, images) -> np.ndarray:
        f = (pooled_features(images) - self.feat_mean) / self.feat_scale
        return f @ self.weights + self.bias

    def score(self, images) -> np.ndarray:
        """Lesion probability per image."""
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        p = expit(self.logit(x[None] if single else x))
        return p[0] if single else p

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "weights": self.weights.tolist(), "bias": self.bias,
            "feat_mean": self.feat_mean.tolist(), "feat_scale": self.feat_scale.tolist(),
            "accuracy": self.accuracy,
        }))

    @classmethod
    def load(cls, path) -> "LesionScorer":
        d = json.loads(Path(path).read_text())
        return cls(np.array(d["weights"]), float(d["bias"]), np.array(d["feat_mean"]),
                   np.array(d["feat_scale"]), float(d["accuracy"]))


def train_lesion_scorer(healthy, diseased, seed: int = 0, holdout: float = 0.2, l2: float = 1e-2,
                        iterations: int = 3000, lr: float = 0.5) -> LesionScorer:
    """Fit by full-batch gradient descent; ``accuracy`` is measured on a held-out share."""
    healthy = np.asarray(healthy, dtype=np.float64)
    diseased = np.asarray(diseased, dtype=np.float64)
    if len(healthy) == 0 or len(diseased) == 0:
        raise DataError("scorer training needs both healthy and diseased images")
    if healthy.shape[1:] != diseased.shape[1:]:
        raise DataError(f"image shapes differ: {healthy.shape[1:]} vs {diseased.shape[1:]}")
    x = pooled_features(np.concatenate([healthy, diseased]))
    y = np.concatenate([np.zeros(len(healthy)), np.ones(len(diseased))])
    order = generator(seed, "scorer").permutation(len(y))
    n_hold = int(round(holdout * len(y))) if len(y) >= 10 else 0
    hold, fit = order[:n_hold], order[n_hold:]

    mean = x[fit].mean(axis=0)
    scale = x[fit].std(axis=0)
    scale[scale < 1e-8] = 1.0
    z = (x - mean) / scale
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(iterations):
        p = expit(z[fit] @ w + b)
        g = p - y[fit]
        w -= lr * (z[fit].T @ g / len(fit) + l2 * w)
        b -= lr * g.mean()
    evaluate = hold if n_hold else fit
    acc = float(np.mean((z[evaluate] @ w + b > 0) == (y[evaluate] == 1)))
    return LesionScorer(w, float(b), mean, scale, acc)


@dataclass(frozen=True)
class SaliencyConfig:
    patch: int = 8
    stride: int = 4
    fill: float = 0.0
    sigma: float = 1.0
    percentile: float = 90.0
    kernel_side: int = 5

    def __post_init__(self):
        if self.patch < 1 or self.stride < 1:
            raise ParameterError("patch and stride must be >= 1")
        if not 0.0 <= self.percentile <= 100.0:
            raise ParameterError(f"percentile must lie in [0, 100], got {self.percentile}")


def _window_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def occlusion_saliency(x, scorer: LesionScorer, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    """Largest lesion-probability drop among occlusion windows covering each pixel."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if cfg.patch > min(h, w):
        raise ParameterError(f"patch {cfg.patch} exceeds image size {h}x{w}")
    boxes = [(r, c) for r in _window_starts(h, cfg.patch, cfg.stride) for c in _window_starts(w, cfg.patch, cfg.stride)]
    occluded = np.repeat(x[None], len(boxes), axis=0)
    for k, (r, c) in enumerate(boxes):
        occluded[k, r:r + cfg.patch, c:c + cfg.patch] = cfg.fill
    drops = np.maximum(scorer.score(x) - scorer.score(occluded), 0.0)
    sal = np.zeros((h, w))
    for (r, c), d in zip(boxes, drops):
        view = sal[r:r + cfg.patch, c:c + cfg.patch]
        np.maximum(view, d, out=view)
    return sal


def make_mask(saliency, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    """Smooth with a normalized Gaussian kernel, keep pixels strictly above the percentile."""
    smoothed = convolve_same(saliency, gaussian_kernel(cfg.kernel_side, cfg.sigma))
    return (smoothed > percentile_value(smoothed, cfg.percentile)).astype(np.uint8)


def write_mask(path, mask) -> None:
    write_rfi(path, np.asarray(mask, dtype=np.float32))


def load_mask(path, tol: float = 1e-3) -> np.ndarray:
    data = read_rfi(path)
    if data.shape[2] != 1:
        raise FormatError(f"{path}: masks need one channel, found {data.shape[2]}")
    rounded = np.round(data[..., 0])
    if np.any(np.abs(data[..., 0] - rounded) > tol) or np.any((rounded != 0) & (rounded != 1)):
        raise FormatError(f"{path}: mask values are not binary")
    return rounded.astype(np.uint8)
