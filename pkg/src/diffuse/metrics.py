"""Overlap scores and a kernel two-sample distance on hand-crafted features."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, ParameterError

CSV_COLUMNS = ("run_id", "variant", "K", "percentile", "dice_mean", "dice_se", "iou_mean", "iou_se", "kid")


def _pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    return 1.0 if union == 0 else int((a & b).sum()) / union


def _pool_bins(size: int, parts: int = 8) -> list:
    # equal-width index ranges; sides shorter than ``parts`` repeat rows instead of leaving bins empty
    edges = np.arange(parts + 1) * size // parts
    return [np.arange(lo, max(hi, lo + 1)) for lo, hi in zip(edges[:-1], edges[1:])]


def extract_features(images, hist_bins: int = 8) -> np.ndarray:
    """Per image: 8x8 average-pooled intensities per channel, then per-channel
    mean, variance and an ``hist_bins``-bin histogram of [0, 1] (fractions;
    values outside the range land in the end bins)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or len(x) == 0:
        raise DataError("feature extraction needs a non-empty (N, H, W, C) stack")
    n, h, w, c = x.shape
    rows, cols = _pool_bins(h), _pool_bins(w)
    pooled = np.stack([x[:, r][:, :, cc].mean(axis=(1, 2)) for r in rows for cc in cols], axis=1)
    feats = [pooled.reshape(n, -1), x.mean(axis=(1, 2)), x.var(axis=(1, 2))]
    idx = np.clip((x * hist_bins).astype(np.int64), 0, hist_bins - 1)
    hist = np.stack([(idx == k).mean(axis=(1, 2)) for k in range(hist_bins)], axis=-1)
    feats.append(hist.reshape(n, -1))
    return np.concatenate(feats, axis=1)


def polynomial_kernel(x, y) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(features_a, features_b) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ParameterError("each feature set needs at least two vectors")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    m, n = len(a), len(b)
    kaa = polynomial_kernel(a, a)
    kbb = polynomial_kernel(b, b)
    kab = polynomial_kernel(a, b)
    within_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    within_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(within_a + within_b - 2.0 * kab.mean())


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def write_csv(path, rows, columns=CSV_COLUMNS) -> None:
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
