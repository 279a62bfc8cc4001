"""End-to-end phantom protocol shared by the experiment scripts and the
acceptance tests.

One fixed phantom dataset and one lesion scorer; for every seed a denoiser
is trained on the healthy training phantoms and all sampling for that seed
uses the same seed. The segmentation threshold is tuned per (variant, K,
seed) on diseased validation phantoms and applied to diseased test phantoms.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import pipeline
from .denoiser import TrainConfig, train_denoiser
from .errors import DataError
from .phantom import PhantomParams, diseased_only, generate_split, healthy_only, stack_images, stack_masks
from .saliency import SaliencyConfig, train_lesion_scorer
from .schedule import linear_schedule

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    phantom: PhantomParams = field(default_factory=PhantomParams)
    n_train: int = 1100
    n_val: int = 120
    n_test: int = 240
    min_healthy_train: int = 500
    n_val_diseased: int = 50
    n_test_diseased: int = 100
    n_test_healthy: int = 100
    iterations: int = 5000
    seeds: tuple = (0, 1, 2)
    K: int = 500
    sweep_K: tuple = (125, 750)
    ablations: tuple = (pipeline.MASK_ONLY, "ddpm", "ddim_ddpm", "ddpm_ddim", "ddim")
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    threads: int = 1


@dataclass
class ExperimentData:
    train_healthy: np.ndarray
    val: dict
    test: dict
    healthy_test: dict
    scorer_accuracy: float


def _pack(samples, scorer, sal_cfg) -> dict:
    images = stack_images(samples)
    sal = pipeline.saliency_maps(images, scorer, sal_cfg)
    return {"images": images, "gts": stack_masks(samples), "indices": np.array([s.index for s in samples]),
            "masks": pipeline.masks_from_saliency(sal, sal_cfg)}


def _take(samples, n: int, what: str) -> list:
    if len(samples) < n:
        raise DataError(f"only {len(samples)} {what} phantoms, need {n}")
    return samples[:n]


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    split = generate_split(cfg.phantom, cfg.n_train, cfg.n_val, cfg.n_test)
    healthy = healthy_only(split.train)
    if len(healthy) < cfg.min_healthy_train:
        raise DataError(f"{len(healthy)} healthy training phantoms, need {cfg.min_healthy_train}")
    h = stack_images(healthy)
    scorer = train_lesion_scorer(h, stack_images(diseased_only(split.train)), seed=0)
    val = _pack(_take(diseased_only(split.val), cfg.n_val_diseased, "diseased validation"), scorer, cfg.saliency)
    test = _pack(_take(diseased_only(split.test), cfg.n_test_diseased, "diseased test"), scorer, cfg.saliency)
    htest = _pack(_take(healthy_only(split.test), cfg.n_test_healthy, "healthy test"), scorer, cfg.saliency)
    return ExperimentData(h, val, test, htest, scorer.accuracy)


@dataclass
class SeedResult:
    seed: int
    train_seconds: float
    dice: dict = field(default_factory=dict)  # (variant, K) -> per-image dice on the test set
    strategy: dict = field(default_factory=dict)
    kid: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    modification: dict = field(default_factory=dict)  # "healthy" / "diseased" -> mean |x - x_hat|
    final_loss: float = float("nan")


def run_seed(cfg: ExperimentConfig, data: ExperimentData, seed: int, cells=None) -> SeedResult:
    """Train one denoiser and evaluate the requested (variant, K) cells."""
    sched = linear_schedule()
    t0 = time.perf_counter()
    den = train_denoiser(pipeline.to_model_space(data.train_healthy), sched,
                         TrainConfig(iterations=cfg.iterations, seed=seed, log_every=0))
    res = SeedResult(seed, time.perf_counter() - t0, final_loss=float(np.mean(den.losses[-200:])))
    log.info("seed %d: trained in %.0f s, loss %.4f", seed, res.train_seconds, res.final_loss)
    if cells is None:
        cells = [("diffuse", cfg.K)] + [(v, cfg.K) for v in cfg.ablations] + [("diffuse", k) for k in cfg.sweep_K]
    for variant, K in cells:
        t0 = time.perf_counter()
        out = pipeline.evaluate_variant(variant, K, den, sched, seed, data.val, data.test, data.train_healthy,
                                        cfg.saliency, pipeline.DEFAULT_STRATEGIES, cfg.threads)
        res.dice[(variant, K)] = out.dice
        res.strategy[(variant, K)] = out.strategy
        res.kid[(variant, K)] = out.kid
        res.seconds[(variant, K)] = time.perf_counter() - t0
        if (variant, K) == ("diffuse", cfg.K):
            res.modification["diseased"] = float(np.abs(out.counterfactuals - data.test["images"]).mean())
            h = data.healthy_test
            cf = pipeline.run_variant("diffuse", h["images"], K, den, sched, seed, h["indices"], h["masks"],
                                      cfg.threads)
            res.modification["healthy"] = float(np.abs(cf - h["images"]).mean())
        log.info("seed %d %s K=%d: dice %.3f (%s) %.0f s", seed, variant, K, out.dice.mean(), out.strategy,
                 res.seconds[(variant, K)])
    return res


def seed_average(results, variant: str, K: int) -> float:
    """Mean over seeds of the per-seed mean test Dice."""
    return float(np.mean([r.dice[(variant, K)].mean() for r in results]))
