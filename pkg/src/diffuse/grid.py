"""Image, mask and gray-map containers plus the elementwise/windowed primitives.

Conventions used throughout the package:

* an *image* is a float array of shape ``(H, W, C)``; batched code accepts
  ``(N, H, W, C)``
* a *mask* is a ``uint8`` array of shape ``(H, W)`` (or ``(N, H, W)``) holding
  only 0 and 1
* a *gray map* is a non-negative float array of shape ``(H, W)``

Arrays are never modified in place; every operation returns a fresh array.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, FormatError, ParameterError

RFI_MAGIC = b"RFI1"


def as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim < 3:
        raise DimensionError(f"image needs at least 2 dimensions, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("image contains non-finite values")
    return x


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.dtype != np.uint8:
        if not np.all((m == 0) | (m == 1)):
            raise ParameterError("mask entries must be exactly 0 or 1")
        m = m.astype(np.uint8)
    elif m.size and m.max() > 1:
        raise ParameterError("mask entries must be exactly 0 or 1")
    return m


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def hadamard_mix(a, b, m) -> np.ndarray:
    """Select ``a`` where the mask is 1 and ``b`` where it is 0.

    The mask is broadcast over the channel axis. Selection is exact, so the
    output is bitwise equal to one of the inputs at every pixel.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = as_mask(m)
    check_same_shape(a, b, "mixed images")
    if a.shape[-3:-1] != m.shape[-2:] or m.ndim > a.ndim - 1:
        raise DimensionError(f"mask {m.shape} does not match image {a.shape}")
    return np.where(m[..., None].astype(bool), a, b)


def gaussian_kernel(side: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized ``side x side`` Gaussian kernel."""
    if side < 1 or side % 2 == 0:
        raise ParameterError(f"kernel side must be odd and positive, got {side}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = np.arange(side) - side // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def convolve_same(gray, kernel) -> np.ndarray:
    """2-D convolution with same-size output and edge-replicated borders."""
    gray = np.asarray(gray, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ParameterError(f"kernel sides must be odd, got shape {kernel.shape}")
    if gray.ndim != 2:
        raise DimensionError(f"gray map must be 2-D, got shape {gray.shape}")
    return ndimage.convolve(gray, kernel, mode="nearest")


def percentile_value(gray, p: float) -> float:
    """Nearest-rank percentile.

    Binarizing with ``gray > percentile_value(gray, p)`` keeps the top
    ``(100 - p)%`` of pixels (fewer when values tie at the threshold).
    """
    if not 0.0 <= p <= 100.0:
        raise ParameterError(f"percentile must lie in [0, 100], got {p}")
    v = np.sort(np.asarray(gray, dtype=np.float64).ravel())
    if v.size == 0:
        raise ParameterError("percentile of an empty map")
    rank = int(np.ceil(p / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


# -- file formats ---------------------------------------------------------


def write_rfi(path, array) -> None:
    """Write a 2-D or 3-D array as RFI (little-endian float32, channel-fastest)."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise DimensionError(f"RFI holds (H, W[, C]) arrays, got shape {a.shape}")
    h, w, c = a.shape
    with open(path, "wb") as f:
        f.write(RFI_MAGIC)
        f.write(struct.pack("<3I", h, w, c))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_rfi(path) -> np.ndarray:
    """Read an RFI file as a float64 ``(H, W, C)`` array."""
    raw = Path(path).read_bytes()
    if raw[:4] != RFI_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<3I", raw[4:16])
    n = h * w * c
    if len(raw) != 16 + 4 * n:
        raise FormatError(f"{path}: expected {n} floats, found {(len(raw) - 16) / 4:g}")
    return np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(h, w, c)


def write_pgm(path, gray) -> None:
    """Export a gray map (or the channel mean of an image) as 8-bit binary PGM.

    Intensities are min-max scaled to 0..255; a constant map becomes all zeros.
    """
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=-1)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo) * 255.0
    pix = np.round(scaled).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        f.write(pix.tobytes())
