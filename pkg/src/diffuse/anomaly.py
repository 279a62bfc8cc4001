"""Anomaly maps from (original, counterfactual) pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError
from .grid import percentile_value, write_rfi


def difference_map(x0, xhat0) -> np.ndarray:
    """Channel-mean absolute difference, ``(..., H, W, C) -> (..., H, W)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    xhat0 = np.asarray(xhat0, dtype=np.float64)
    if x0.shape != xhat0.shape:
        raise DimensionError(f"cannot diff shapes {x0.shape} and {xhat0.shape}")
    return np.abs(x0 - xhat0).mean(axis=-1)


def open_close(gray, kernel_side: int = 5) -> np.ndarray:
    """Grayscale opening then closing with a flat square element, edge-replicated."""
    if kernel_side < 1 or kernel_side % 2 == 0:
        raise ParameterError(f"kernel side must be odd, got {kernel_side}")
    g = np.asarray(gray, dtype=np.float64)
    size = (1,) * (g.ndim - 2) + (kernel_side, kernel_side)

    def erode(a):
        return ndimage.minimum_filter(a, size=size, mode="nearest")

    def dilate(a):
        return ndimage.maximum_filter(a, size=size, mode="nearest")

    return erode(dilate(dilate(erode(g))))


def otsu_threshold(gray, bins: int = 256) -> float:
    """Threshold maximizing between-class variance over ``bins`` equal-width levels.

    Returns the upper edge of the last bin assigned to the background class;
    a constant map returns its value.
    """
    g = np.asarray(gray, dtype=np.float64).ravel()
    lo, hi = g.min(), g.max()
    if hi <= lo:
        return float(hi)
    hist, edges = np.histogram(g, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = g.size - w0
    s0 = np.cumsum(hist * centers)[:-1]
    m0 = s0 / np.maximum(w0, 1)
    m1 = (np.sum(hist * centers) - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(edges[1:][np.argmax(between)])


def parse_strategy(strategy: str) -> tuple[str, float | None]:
    """``'percentile:97'``, ``'fixed:0.1'`` or ``'otsu'``."""
    kind, _, arg = str(strategy).partition(":")
    if kind == "otsu" and not arg:
        return kind, None
    if kind in ("percentile", "fixed") and arg:
        try:
            return kind, float(arg)
        except ValueError:
            pass
    raise ParameterError(f"unknown segmentation strategy {strategy!r}")


def segment(cleaned, strategy: str = "percentile:95") -> tuple[np.ndarray, float]:
    """Binarize one cleaned map with a strict ``>``; returns ``(mask, threshold)``."""
    kind, arg = parse_strategy(strategy)
    g = np.asarray(cleaned, dtype=np.float64)
    if g.size == 0:
        raise ParameterError("cannot segment an empty map")
    if kind == "percentile":
        thr = percentile_value(g, arg)
    elif kind == "fixed":
        thr = arg
    else:
        thr = otsu_threshold(g)
    mask = g > thr
    if g.max() <= 0:
        mask[:] = False
    return mask.astype(np.uint8), float(thr)


@dataclass
class AnomalyReport:
    counterfactual: np.ndarray
    raw_diff: np.ndarray
    cleaned: np.ndarray
    segmentation: np.ndarray
    threshold: float
    strategy: str
    dice: float | None = None
    iou: float | None = None

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_rfi(d / "counterfactual.rfi", self.counterfactual)
        write_rfi(d / "diff.rfi", self.raw_diff)
        write_rfi(d / "cleaned.rfi", self.cleaned)
        write_rfi(d / "seg.rfi", self.segmentation.astype(np.float32))
        (d / "metrics.json").write_text(json.dumps({
            "dice": self.dice, "iou": self.iou, "threshold": self.threshold, "strategy": self.strategy,
        }, indent=1))


def build_report(x0, xhat0, strategy: str = "percentile:95", kernel_side: int = 5, gt=None) -> AnomalyReport:
    from .metrics import dice, iou

    raw = difference_map(x0, xhat0)
    cleaned = open_close(raw, kernel_side)
    seg, thr = segment(cleaned, strategy)
    rep = AnomalyReport(np.asarray(xhat0, dtype=np.float64), raw, cleaned, seg, thr, strategy)
    if gt is not None:
        rep.dice, rep.iou = dice(seg, gt), iou(seg, gt)
    return rep
