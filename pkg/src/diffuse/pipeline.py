"""Batch orchestration shared by the CLI, the experiment scripts and the tests.

Images are processed in fixed-size chunks, each with its own per-image rng
streams, so results do not depend on the worker count.

Images live in [0, 1]; denoisers used here are trained and sampled in the
model space ``2 x - 1`` so the data is centred like the unit-variance noise.
Counterfactuals are mapped back before any difference map is taken.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .anomaly import difference_map, open_close, segment
from .errors import ParameterError
from .metrics import dice, extract_features, iou, kid, mean_se
from .saliency import LesionScorer, SaliencyConfig, make_mask, occlusion_saliency
from .sampler import SamplerRun
from .schedule import NoiseSchedule

CHUNK = 25
MASK_ONLY = "saliency_mask"
# candidate anomaly-map thresholds, tuned per run on the validation split
DEFAULT_STRATEGIES = tuple(f"fixed:{v:g}" for v in (
    0.01, 0.02, 0.03, 0.04, 0.05, 0.0625, 0.075, 0.0875, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5,
    0.6))


def to_model_space(images) -> np.ndarray:
    return 2.0 * np.asarray(images, dtype=np.float64) - 1.0


def from_model_space(latents) -> np.ndarray:
    return (np.asarray(latents, dtype=np.float64) + 1.0) / 2.0


def _chunks(n: int, size: int = CHUNK):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, n: int, threads: int = 1):
    parts = _chunks(n)
    if threads <= 1 or len(parts) == 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, parts))


def saliency_maps(images, scorer: LesionScorer, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    return np.stack([occlusion_saliency(x, scorer, cfg) for x in np.asarray(images)])


def masks_from_saliency(sal, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    return np.stack([make_mask(s, cfg) for s in sal])


def run_variant(variant: str, images, K: int, den, sched: NoiseSchedule, seed: int, indices,
                masks=None, threads: int = 1) -> np.ndarray:
    """Counterfactuals in [0, 1] for a batch; ``indices`` key each image's rng stream."""
    images = np.asarray(images, dtype=np.float64)
    indices = np.asarray(indices)
    if len(indices) != len(images):
        raise ParameterError("one index per image is required")
    if variant == MASK_ONLY:
        return images.copy()

    latents = to_model_space(images)

    def work(sl):
        run = SamplerRun(K=K, seed=seed, variant=variant)
        return run.run(latents[sl], den, sched, None if masks is None else masks[sl], indices[sl])

    return from_model_space(np.concatenate(_map_chunks(work, len(images), threads)))


def cleaned_maps(images, counterfactuals, kernel_side: int = 5) -> np.ndarray:
    return open_close(difference_map(images, counterfactuals), kernel_side)


def segment_all(cleaned, strategy: str) -> np.ndarray:
    return np.stack([segment(c, strategy)[0] for c in cleaned])


def overlap_scores(segs, gts) -> tuple[np.ndarray, np.ndarray]:
    d = np.array([dice(s, g) for s, g in zip(segs, gts)])
    j = np.array([iou(s, g) for s, g in zip(segs, gts)])
    return d, j


def tune_strategy(cleaned, gts, candidates=DEFAULT_STRATEGIES) -> tuple[str, float]:
    """Strategy with the best mean Dice on a validation batch (first wins ties)."""
    best, best_score = None, -1.0
    for s in candidates:
        score = float(overlap_scores(segment_all(cleaned, s), gts)[0].mean())
        if score > best_score:
            best, best_score = s, score
    return best, best_score


@dataclass
class VariantResult:
    variant: str
    K: int
    percentile: float
    strategy: str
    dice: np.ndarray
    iou: np.ndarray
    kid: float
    counterfactuals: np.ndarray
    segmentations: np.ndarray

    def row(self, run_id: str = "") -> dict:
        dm, ds = mean_se(self.dice)
        im, is_ = mean_se(self.iou)
        return {"run_id": run_id, "variant": self.variant, "K": self.K, "percentile": self.percentile,
                "dice_mean": dm, "dice_se": ds, "iou_mean": im, "iou_se": is_, "kid": self.kid,
                "strategy": self.strategy}


def evaluate_variant(variant: str, K: int, den, sched: NoiseSchedule, seed: int,
                     val, test, healthy_reference, sal_cfg: SaliencyConfig = SaliencyConfig(),
                     strategies=DEFAULT_STRATEGIES, threads: int = 1) -> VariantResult:
    """Tune the segmentation rule on ``val`` then score ``test``.

    ``val`` and ``test`` are dicts with keys ``images``, ``gts``, ``masks`` and
    ``indices``. KID compares test counterfactuals with ``healthy_reference``.
    """
    def counterfactuals(split):
        return run_variant(variant, split["images"], K, den, sched, seed, split["indices"], split["masks"], threads)

    test_cf = counterfactuals(test)
    if variant == MASK_ONLY:
        strategy = "saliency-mask"
        segs = np.asarray(test["masks"])
    else:
        val_clean = cleaned_maps(val["images"], counterfactuals(val))
        strategy, _ = tune_strategy(val_clean, val["gts"], strategies)
        segs = segment_all(cleaned_maps(test["images"], test_cf), strategy)
    d, j = overlap_scores(segs, test["gts"])
    k = kid(extract_features(test_cf), extract_features(healthy_reference))
    return VariantResult(variant, K, sal_cfg.percentile, strategy, d, j, k, test_cf, segs)
