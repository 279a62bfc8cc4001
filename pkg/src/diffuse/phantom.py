"""Procedural brain-like phantoms with optional bright lesions.

Each sample is a deterministic function of ``(seed, index)``: an elliptical
head with a bright rim, a smooth low-frequency tissue field inside (a sum
of random plane waves), zero background, and
(with probability ``lesion_probability``) an irregular bright blob whose
footprint is the ground-truth mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .grid import read_rfi, write_rfi
from .seeding import generator

HEALTHY, DISEASED = "healthy", "diseased"


@dataclass(frozen=True)
class PhantomParams:
    side: int = 32
    channels: int = 1
    skull_axes: tuple = (11.0, 14.0)
    tissue_level: float = 0.45
    rim_level: float = 0.75
    rim_width: float = 1.5
    texture_amplitude: float = 0.12
    texture_waves: int = 4
    texture_cycles: tuple = (0.5, 2.0)  # plane-wave periods across the image
    # optional dark blobs (healthy anatomy not predictable from context); off by default
    structure_count: tuple = (0, 0)
    structure_radius: tuple = (2.0, 3.5)
    structure_contrast: tuple = (0.2, 0.3)
    lesion_probability: float = 0.5
    lesion_radius: tuple = (3.0, 5.0)
    lesion_contrast: tuple = (0.35, 0.5)
    irregularity: float = 0.15
    seed: int = 0
    # per-channel gains for the multi-channel mode (tissue, lesion)
    tissue_gains: tuple = (1.0, 0.8, 1.1, 0.9)
    lesion_gains: tuple = (1.0, 0.7, 1.05, 0.85)

    def __post_init__(self):
        if self.side < 16:
            raise ParameterError(f"side must be >= 16, got {self.side}")
        if not 1 <= self.channels <= len(self.tissue_gains):
            raise ParameterError(f"channels must lie in [1, {len(self.tissue_gains)}]")
        if self.lesion_radius[0] < 2 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ParameterError("lesion radius range must satisfy 2 <= lo <= hi")
        lo_contrast = self.lesion_contrast[0] * min(self.lesion_gains[: self.channels])
        if lo_contrast <= self.texture_amplitude:
            raise ParameterError("lesion contrast must exceed the texture amplitude in every channel")
        if self.structure_count[0] < 0 or self.structure_count[1] < self.structure_count[0]:
            raise ParameterError("structure count range must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ParameterError("lesion probability must lie in [0, 1]")
        if 2 * self.skull_axes[1] + 2 > self.side:
            raise ParameterError("skull ellipse does not fit in the image")


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W, C) in [0, 1]
    label: str
    gt_mask: np.ndarray  # (H, W) uint8
    index: int = -1
    brain: np.ndarray | None = field(default=None, repr=False)

    @property
    def diseased(self) -> bool:
        return self.label == DISEASED


def generate_sample(params: PhantomParams, index: int) -> LabeledSample:
    rng = generator(params.seed, "phantom", index)
    n = params.side
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = (n - 1) / 2 + rng.uniform(-1.5, 1.5, 2)
    ax = rng.uniform(*params.skull_axes, 2)
    theta = rng.uniform(-0.3, 0.3)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    rho = np.sqrt((u / ax[0]) ** 2 + (v / ax[1]) ** 2)
    head = rho < 1.0
    rim = head & (rho >= 1.0 - params.rim_width / ax.min())
    brain = head & ~rim

    texture = np.zeros((n, n))
    for _ in range(params.texture_waves):
        k = 2 * np.pi / n * rng.uniform(*params.texture_cycles)
        phi = rng.uniform(0, 2 * np.pi)
        direction = rng.uniform(0, 2 * np.pi)
        texture += np.cos(k * (np.cos(direction) * xx + np.sin(direction) * yy) + phi)
    # unit standard deviation over random phases
    texture /= np.sqrt(params.texture_waves / 2.0)

    # dark local structures: healthy anatomy that cannot be inferred from context
    dark = np.zeros((n, n))
    for _ in range(rng.integers(params.structure_count[0], params.structure_count[1] + 1)):
        r = rng.uniform(*params.structure_radius)
        rad = max(1.0 - (r + params.rim_width + 1.0) / ax.min(), 0.0) * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        su, sv = rad * ax[0] * np.cos(ang), rad * ax[1] * np.sin(ang)
        sy = cy + su * np.sin(theta) + sv * np.cos(theta)
        sx = cx + su * np.cos(theta) - sv * np.sin(theta)
        blob = np.hypot(yy - sy, xx - sx) < r
        dark = np.maximum(dark, rng.uniform(*params.structure_contrast) * blob)

    gt = np.zeros((n, n), dtype=bool)
    contrast = 0.0
    if rng.uniform() < params.lesion_probability:
        r0 = rng.uniform(*params.lesion_radius)
        # lesion centre well inside the brain, in normalized ellipse coordinates
        reach = max(1.0 - (r0 * (1 + params.irregularity) + params.rim_width + 1.0) / ax.min(), 0.0)
        rad = reach * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        lu, lv = rad * ax[0] * np.cos(ang), rad * ax[1] * np.sin(ang)
        ly = cy + lu * np.sin(theta) + lv * np.cos(theta)
        lx = cx + lu * np.cos(theta) - lv * np.sin(theta)
        c = rng.uniform(-1, 1, 2)
        p = rng.uniform(0, 2 * np.pi, 2)
        phi = np.arctan2(yy - ly, xx - lx)
        wobble = 0.5 * (c[0] * np.cos(2 * phi + p[0]) + c[1] * np.cos(3 * phi + p[1]))
        gt = (np.hypot(yy - ly, xx - lx) < r0 * (1 + params.irregularity * wobble)) & brain
        contrast = rng.uniform(*params.lesion_contrast)

    image = np.zeros((n, n, params.channels))
    for ch in range(params.channels):
        tissue = params.tissue_gains[ch] * (params.tissue_level + params.texture_amplitude * texture - dark)
        layer = np.where(brain, tissue, 0.0) + np.where(rim, params.rim_level * params.tissue_gains[ch], 0.0)
        layer = layer + contrast * params.lesion_gains[ch] * gt
        image[..., ch] = np.clip(layer, 0.0, 1.0)
    label = DISEASED if gt.any() else HEALTHY
    return LabeledSample(image, label, gt.astype(np.uint8), int(index), brain)


@dataclass
class Split:
    train: list
    val: list
    test: list


def generate_split(params: PhantomParams, n_train: int, n_val: int, n_test: int) -> Split:
    """Three datasets over disjoint consecutive index ranges."""
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"split sizes must be positive, got {n_train}/{n_val}/{n_test}")
    bounds = np.cumsum([0, n_train, n_val, n_test])
    parts = [[generate_sample(params, i) for i in range(lo, hi)] for lo, hi in zip(bounds[:-1], bounds[1:])]
    return Split(*parts)


def split_counts(total: int, proportions=(70, 15, 15)) -> tuple[int, int, int]:
    """Largest-remainder rounding of ``total`` into the given proportions."""
    p = np.asarray(proportions, dtype=np.float64)
    if p.size != 3 or np.any(p < 0) or p.sum() <= 0:
        raise ParameterError(f"bad split proportions {proportions}")
    exact = total * p / p.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return tuple(int(c) for c in counts)


def healthy_only(samples) -> list:
    return [s for s in samples if not s.diseased]


def diseased_only(samples) -> list:
    return [s for s in samples if s.diseased]


def stack_images(samples) -> np.ndarray:
    if not samples:
        raise DataError("empty dataset")
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"mixed image shapes in dataset: {sorted(shapes)}")
    return np.stack([s.image for s in samples])


def stack_masks(samples) -> np.ndarray:
    return np.stack([s.gt_mask for s in samples])


# -- on-disk datasets -----------------------------------------------------


def write_dataset(samples, directory) -> Path:
    """Write images and masks as RFI plus ``manifest.json`` (paths relative to it)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img, msk = f"img_{s.index:06d}.rfi", f"mask_{s.index:06d}.rfi"
        write_rfi(directory / img, s.image)
        write_rfi(directory / msk, s.gt_mask.astype(np.float32))
        entries.append({"path": img, "label": s.label, "mask_path": msk})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def read_dataset(manifest) -> list:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    if not manifest.exists():
        raise DataError(f"no dataset manifest at {manifest}")
    root = manifest.parent
    samples = []
    for i, e in enumerate(json.loads(manifest.read_text())):
        image = read_rfi(root / e["path"])
        if e.get("mask_path"):
            gt = (read_rfi(root / e["mask_path"])[..., 0] > 0.5).astype(np.uint8)
        else:
            gt = np.zeros(image.shape[:2], dtype=np.uint8)
        stem = Path(e["path"]).stem
        index = int(stem.split("_")[-1]) if stem.split("_")[-1].isdigit() else i
        samples.append(LabeledSample(image, e["label"], gt, index))
    if not samples:
        raise DataError(f"{manifest} lists no images")
    return samples
