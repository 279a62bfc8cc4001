"""Command-line driver: ``diffuse <command> [--config=FILE] [--key=value ...]``.

Commands: phantom, train, saliency, counterfactual, sweep, ablate, evaluate.

A config file holds flat ``key = value`` lines (``#`` starts a comment).
Every key can be overridden on the command line as ``--key=value``; dashes
and underscores are interchangeable. The fully resolved configuration is
written to ``<out>/config.txt`` before work starts, so
``diffuse <command> --config=<out>/config.txt`` repeats a run exactly.

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.

Overlap conventions: two empty masks score Dice = IoU = 1, so a healthy
image whose segmentation is empty counts as a perfect result.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import pipeline
from .anomaly import build_report, parse_strategy
from .denoiser import (GaussianDenoiser, TrainConfig, fit_gaussian_prior, load_checkpoint, save_checkpoint,
                       train_denoiser)
from .errors import DataError, DiffuseError, DimensionError
from .grid import read_rfi, write_pgm, write_rfi
from .metrics import extract_features, kid, mean_se, write_csv
from .phantom import PhantomParams, generate_split, read_dataset, split_counts, write_dataset
from .saliency import LesionScorer, SaliencyConfig, load_mask, make_mask, occlusion_saliency, train_lesion_scorer
from .sampler import SamplerRun, dump_trace
from .schedule import linear_schedule

log = logging.getLogger("diffuse")

COMMANDS = ("phantom", "train", "saliency", "counterfactual", "sweep", "ablate", "evaluate")
ABLATE_VARIANTS = ("diffuse", pipeline.MASK_ONLY, "ddpm", "ddim_ddpm", "ddpm_ddim", "ddim")


class UsageError(DiffuseError):
    pass


@dataclass
class RunConfig:
    # schedule
    T: int = 1000
    beta_first: float = 1e-4
    beta_last: float = 0.02
    # sampling
    K: int = 500
    variant: str = "diffuse"
    seed: int = 0
    seeds: str = "0"
    threads: int = 1
    trace: bool = False
    # saliency
    percentile: float = 90.0
    patch: int = 8
    stride: int = 4
    sigma: float = 1.0
    fill: float = 0.0
    mask_in: str = ""
    scorer: str = ""
    # anomaly maps
    strategy: str = "tune"
    kernel_side: int = 5
    # paths
    data: str = "runs/phantom/train"
    val_data: str = "runs/phantom/val"
    eval_data: str = "runs/phantom/test"
    out: str = ""
    run: str = ""
    checkpoint: str = "runs/train/checkpoint.dnz"
    denoiser: str = "mlp"
    resume: str = ""
    # training
    iterations: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-4
    ema_decay: float = 0.99
    # phantoms
    total: int = 0
    split: str = "70,15,15"
    n_train: int = 1400
    n_val: int = 300
    n_test: int = 300
    side: int = 32
    channels: int = 1
    lesion_probability: float = 0.5
    texture_amplitude: float = 0.12
    # sweep / ablation grids (comma separated; empty means the default grid)
    K_grid: str = ""
    p_grid: str = "70,80,90,95"
    variants: str = ",".join(ABLATE_VARIANTS)
    run_id: str = ""

    # -- parsing ----------------------------------------------------------

    @classmethod
    def keys(cls) -> dict:
        return {f.name: f for f in fields(cls)}

    def set(self, key: str, raw: str) -> None:
        known = self.keys()
        name = key.replace("-", "_")
        if name not in known:
            raise UsageError(f"unknown config key {key!r}")
        kind = type(getattr(RunConfig(), name))
        try:
            if kind is bool:
                low = raw.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                value = low in ("1", "true", "yes")
            else:
                value = kind(raw.strip())
        except ValueError:
            raise UsageError(f"bad value for {name}: {raw!r}") from None
        setattr(self, name, value)

    def to_text(self, command: str) -> str:
        lines = [f"# diffuse {command}"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    # -- derived values ---------------------------------------------------

    def seed_list(self) -> list[int]:
        return _int_list(self.seeds, "seeds")

    def k_list(self) -> list[int]:
        if not self.K_grid.strip():
            return [self.T // 8, self.T // 4, self.T // 2, 3 * self.T // 4]
        return _int_list(self.K_grid, "K_grid")

    def p_list(self) -> list[float]:
        return [float(v) for v in _split(self.p_grid, "p_grid")]

    def saliency_config(self, percentile: float | None = None) -> SaliencyConfig:
        return SaliencyConfig(patch=self.patch, stride=self.stride, fill=self.fill, sigma=self.sigma,
                              percentile=self.percentile if percentile is None else percentile)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           ema_decay=self.ema_decay, seed=self.seed)


def _split(text: str, name: str) -> list[str]:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise UsageError(f"{name} is empty")
    return items


def _int_list(text: str, name: str) -> list[int]:
    try:
        return [int(v) for v in _split(text, name)]
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of integers, got {text!r}") from None


def read_config_file(path, cfg: RunConfig) -> None:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    for number, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{p}:{number}: expected key = value")
        cfg.set(key.strip(), value)


def parse_args(argv) -> tuple[str, RunConfig]:
    parser = argparse.ArgumentParser(prog="diffuse", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="keys: " + ", ".join(RunConfig.keys()))
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default="")
    known, rest = parser.parse_known_args(argv)
    cfg = RunConfig()
    if known.config:
        read_config_file(known.config, cfg)
    i = 0
    while i < len(rest):
        arg = rest[i]
        if not arg.startswith("--"):
            raise UsageError(f"unexpected argument {arg!r}")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            # "--key value" or a bare boolean flag
            if i + 1 < len(rest) and not rest[i + 1].startswith("--"):
                value = rest[i + 1]
                i += 1
            elif isinstance(getattr(cfg, key.replace("-", "_"), None), bool):
                value = "true"
            else:
                raise UsageError(f"missing value for --{key}")
        cfg.set(key, value)
        i += 1
    if not cfg.out:
        cfg.out = f"runs/{known.command}"
    return known.command, cfg


# -- shared plumbing ------------------------------------------------------


def prepare_run_dir(command: str, cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(command))
    return out


def load_split(path) -> dict:
    samples = read_dataset(path)
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"{path}: mixed image shapes {sorted(shapes)}")
    return {
        "images": np.stack([s.image for s in samples]),
        "gts": np.stack([s.gt_mask for s in samples]),
        "indices": np.array([s.index for s in samples]),
        "labels": [s.label for s in samples],
    }


def subset(split: dict, keep) -> dict:
    keep = np.asarray(keep, dtype=bool)
    out = {k: (v[keep] if isinstance(v, np.ndarray) else [x for x, f in zip(v, keep) if f]) for k, v in split.items()}
    if not keep.any():
        raise DataError("selection is empty")
    return out


def diseased(split: dict) -> dict:
    return subset(split, [label == "diseased" for label in split["labels"]])


def healthy(split: dict) -> dict:
    return subset(split, [label == "healthy" for label in split["labels"]])


def load_denoiser(cfg: RunConfig, sched):
    if cfg.denoiser == "mlp":
        if not Path(cfg.checkpoint).exists():
            raise DataError(f"checkpoint {cfg.checkpoint} not found; run 'diffuse train' first")
        return load_checkpoint(cfg.checkpoint, sched)
    if cfg.denoiser == "gaussian":
        reference = healthy(load_split(cfg.data))
        return GaussianDenoiser(fit_gaussian_prior(pipeline.to_model_space(reference["images"])), sched)
    raise UsageError(f"denoiser must be 'mlp' or 'gaussian', got {cfg.denoiser!r}")


def load_scorer(cfg: RunConfig) -> LesionScorer:
    if cfg.scorer:
        if not Path(cfg.scorer).exists():
            raise DataError(f"scorer {cfg.scorer} not found")
        return LesionScorer.load(cfg.scorer)
    train = load_split(cfg.data)
    scorer = train_lesion_scorer(healthy(train)["images"], diseased(train)["images"], seed=cfg.seed)
    log.info("lesion scorer held-out accuracy %.3f", scorer.accuracy)
    return scorer


def external_masks(cfg: RunConfig, split: dict) -> list:
    """Masks from ``mask_in``: one RFI file for every image, or a directory of
    ``mask_%06d.rfi`` files keyed by image index. Entries may be exceptions."""
    src = Path(cfg.mask_in)
    if src.is_dir():
        out = []
        for i in split["indices"]:
            try:
                out.append(load_mask(src / f"mask_{int(i):06d}.rfi"))
            except DiffuseError as exc:
                out.append(exc)
            except OSError as exc:
                out.append(DataError(f"cannot read mask for image {int(i)}: {exc.strerror or exc}"))
        return out
    mask = load_mask(src)
    return [mask] * len(split["indices"])


def masks_for(cfg: RunConfig, split: dict, scorer=None, percentile=None, saliency=None) -> list:
    if cfg.mask_in:
        masks = external_masks(cfg, split)
    else:
        sal_cfg = cfg.saliency_config(percentile)
        if saliency is None:
            saliency = pipeline.saliency_maps(split["images"], scorer, sal_cfg)
        masks = list(pipeline.masks_from_saliency(saliency, sal_cfg))
    h, w = split["images"].shape[1:3]
    return [m if isinstance(m, Exception) or m.shape == (h, w)
            else DimensionError(f"mask {m.shape} does not match image {(h, w)}") for m in masks]


def stacked_masks(masks) -> np.ndarray:
    bad = [m for m in masks if isinstance(m, Exception)]
    if bad:
        raise bad[0]
    return np.stack(masks)


def seed_row(variant, K, percentile, per_seed: list, kids: list, run_id: str) -> dict:
    """Aggregate over seeds: mean of per-seed means, standard error across
    seeds (across images when there is a single seed)."""
    if len(per_seed) == 1:
        dm, ds = mean_se(per_seed[0][0])
        im, is_ = mean_se(per_seed[0][1])
    else:
        dm, ds = mean_se([np.mean(d) for d, _ in per_seed])
        im, is_ = mean_se([np.mean(j) for _, j in per_seed])
    return {"run_id": run_id, "variant": variant, "K": K, "percentile": percentile, "dice_mean": dm,
            "dice_se": ds, "iou_mean": im, "iou_se": is_, "kid": float(np.mean(kids))}


def healthy_reference(cfg: RunConfig) -> np.ndarray:
    return healthy(load_split(cfg.data))["images"]


def strategy_threshold(strategy: str):
    """The numeric threshold of a fixed strategy; None when it varies per image."""
    kind, arg = parse_strategy(strategy)
    return arg if kind == "fixed" else None


def resolve_strategies(cfg: RunConfig) -> tuple:
    if cfg.strategy == "tune":
        return pipeline.DEFAULT_STRATEGIES
    parse_strategy(cfg.strategy)
    return (cfg.strategy,)


# -- commands ---------------------------------------------------------------


def cmd_phantom(cfg: RunConfig, out: Path) -> None:
    params = PhantomParams(side=cfg.side, channels=cfg.channels, lesion_probability=cfg.lesion_probability,
                           texture_amplitude=cfg.texture_amplitude, seed=cfg.seed)
    if cfg.total:
        props = [float(v) for v in _split(cfg.split, "split")]
        if len(props) != 3:
            raise UsageError("split needs three proportions")
        counts = split_counts(cfg.total, props)
    else:
        counts = (cfg.n_train, cfg.n_val, cfg.n_test)
    parts = generate_split(params, *counts)
    for name, samples in zip(("train", "val", "test"), (parts.train, parts.val, parts.test)):
        write_dataset(samples, out / name)
    log.info("wrote %d/%d/%d phantoms to %s", *counts, out)


def cmd_train(cfg: RunConfig, out: Path) -> None:
    sched = linear_schedule(cfg.T, cfg.beta_first, cfg.beta_last)
    images = healthy(load_split(cfg.data))["images"]
    model = load_checkpoint(cfg.resume, sched) if cfg.resume else None
    first = 0 if model is None else model.step
    t0 = time.perf_counter()
    model = train_denoiser(pipeline.to_model_space(images), sched, cfg.train_config(), model)
    log.info("trained %d iterations in %.1f s", cfg.iterations, time.perf_counter() - t0)
    save_checkpoint(model, out / "checkpoint.dnz")
    with open(out / "loss.csv", "w") as f:
        f.write("step,loss\n")
        for k, loss in enumerate(model.losses[-cfg.iterations:] if cfg.iterations else [], first + 1):
            f.write(f"{k},{loss:.8g}\n")


def cmd_saliency(cfg: RunConfig, out: Path) -> None:
    scorer = load_scorer(cfg)
    scorer.save(out / "scorer.json")
    split = load_split(cfg.eval_data)
    sal_cfg = cfg.saliency_config()
    for x, i in zip(split["images"], split["indices"]):
        sal = occlusion_saliency(x, scorer, sal_cfg)
        mask = make_mask(sal, sal_cfg)
        write_rfi(out / f"saliency_{int(i):06d}.rfi", sal)
        write_rfi(out / f"mask_{int(i):06d}.rfi", mask.astype(np.float32))
        write_pgm(out / f"saliency_{int(i):06d}.pgm", sal)


def cmd_counterfactual(cfg: RunConfig, out: Path) -> None:
    sched = linear_schedule(cfg.T, cfg.beta_first, cfg.beta_last)
    den = load_denoiser(cfg, sched)
    split = load_split(cfg.eval_data)
    scorer = None if cfg.mask_in else load_scorer(cfg)
    masks = masks_for(cfg, split, scorer)
    strategies = resolve_strategies(cfg)
    if len(strategies) > 1:
        strategy = tune_on_validation(cfg, den, sched, scorer, strategies)
    else:
        strategy = strategies[0]
    reference = healthy_reference(cfg)
    failures = []
    per_seed, kids = [], []
    for seed in cfg.seed_list():
        seed_dir = out / f"seed_{seed}"
        dices, ious, cfs = [], [], []
        for x, gt, i, m in zip(split["images"], split["gts"], split["indices"], masks):
            try:
                if isinstance(m, Exception) and cfg.variant == "diffuse":
                    raise m
                run = SamplerRun(K=cfg.K, seed=seed, variant=cfg.variant, trace=[] if cfg.trace else None)
                # batch of one so the image draws from its own (seed, index) stream
                latent = run.run(pipeline.to_model_space(x[None]), den, sched,
                                 m[None] if cfg.variant == "diffuse" else None, [i])
                cf = pipeline.from_model_space(latent[0])
            except DiffuseError as exc:
                failures.append(f"seed {seed} image {int(i)}: {exc}")
                log.warning("image %d failed: %s", int(i), exc)
                continue
            report = build_report(x, cf, strategy, cfg.kernel_side, gt)
            report.save(seed_dir / f"img_{int(i):06d}")
            if not isinstance(m, Exception):
                write_rfi(seed_dir / f"img_{int(i):06d}" / "mask.rfi", m.astype(np.float32))
            if cfg.trace:
                dump_trace(run.trace, seed_dir / f"img_{int(i):06d}" / "trace")
            dices.append(report.dice)
            ious.append(report.iou)
            cfs.append(cf)
        if not dices:
            raise DataError("every image failed; see failures.txt")
        per_seed.append((np.array(dices), np.array(ious)))
        kids.append(_kid_or_nan(np.stack(cfs), reference))
    (out / "failures.txt").write_text("".join(f + "\n" for f in failures))
    rows = [seed_row(cfg.variant, cfg.K, cfg.percentile, [ps], [k], cfg.run_id or f"seed{s}")
            for s, ps, k in zip(cfg.seed_list(), per_seed, kids)]
    rows.append(seed_row(cfg.variant, cfg.K, cfg.percentile, per_seed, kids, cfg.run_id or "all"))
    write_csv(out / "results.csv", rows)
    (out / "metrics.json").write_text(json.dumps({"dice": rows[-1]["dice_mean"], "iou": rows[-1]["iou_mean"],
                                                  "threshold": strategy_threshold(strategy), "strategy": strategy}, indent=1))


def _kid_or_nan(cfs, reference) -> float:
    if len(cfs) < 2 or len(reference) < 2:
        return float("nan")
    return kid(extract_features(cfs), extract_features(reference))


def tune_on_validation(cfg: RunConfig, den, sched, scorer, strategies) -> str:
    val = diseased(load_split(cfg.val_data))
    masks = stacked_masks(masks_for(cfg, val, scorer))
    cf = pipeline.run_variant(cfg.variant, val["images"], cfg.K, den, sched, cfg.seed_list()[0], val["indices"],
                              masks, cfg.threads)
    strategy, score = pipeline.tune_strategy(pipeline.cleaned_maps(val["images"], cf, cfg.kernel_side), val["gts"],
                                             strategies)
    log.info("validation-tuned strategy %s (dice %.3f)", strategy, score)
    return strategy


def _evaluation_sets(cfg: RunConfig, val_split: dict, test_split: dict, scorer, percentile):
    def pack(split, sal):
        return {"images": split["images"], "gts": split["gts"], "indices": split["indices"],
                "masks": stacked_masks(masks_for(cfg, split, scorer, percentile, sal))}

    return pack(val_split, None), pack(test_split, None)


def _run_grid(cfg: RunConfig, out: Path, cells, val_split, test_split) -> list:
    """Evaluate (variant, K, percentile) cells over every seed; one CSV row per cell."""
    sched = linear_schedule(cfg.T, cfg.beta_first, cfg.beta_last)
    den = load_denoiser(cfg, sched)
    scorer = None if cfg.mask_in else load_scorer(cfg)
    reference = healthy_reference(cfg)
    strategies = resolve_strategies(cfg)
    sal_cache = {}
    rows = []
    for variant, K, p in cells:
        if p not in sal_cache:
            sal_cache[p] = _evaluation_sets(cfg, val_split, test_split, scorer, p)
        val, test = sal_cache[p]
        per_seed, kids, chosen = [], [], []
        for seed in cfg.seed_list():
            res = pipeline.evaluate_variant(variant, K, den, sched, seed, val, test, reference,
                                            cfg.saliency_config(p), strategies, cfg.threads)
            per_seed.append((res.dice, res.iou))
            kids.append(res.kid)
            chosen.append(res.strategy)
        row = seed_row(variant, K, p, per_seed, kids, cfg.run_id or f"{variant}-K{K}-p{p:g}")
        rows.append(row)
        log.info("%s K=%d p=%g dice %.3f +- %.3f (%s)", variant, K, p, row["dice_mean"], row["dice_se"],
                 ",".join(chosen))
    return rows


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    val = diseased(load_split(cfg.val_data))
    cells = [(cfg.variant, K, p) for K in cfg.k_list() for p in cfg.p_list()]
    for K, _ in {(c[1], 0) for c in cells}:
        if not 0 <= K <= cfg.T:
            raise UsageError(f"K={K} outside [0, {cfg.T}]")
    write_csv(out / "sweep.csv", _run_grid(cfg, out, cells, val, val))


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    variants = _split(cfg.variants, "variants")
    for v in variants:
        if v not in ABLATE_VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {ABLATE_VARIANTS}")
    val = diseased(load_split(cfg.val_data))
    test = diseased(load_split(cfg.eval_data))
    cells = [(v, cfg.K, cfg.percentile) for v in variants]
    write_csv(out / "ablation.csv", _run_grid(cfg, out, cells, val, test))


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    """Re-score a counterfactual run directory against a dataset's ground truth."""
    if not cfg.run:
        raise UsageError("evaluate needs --run=<counterfactual output directory>")
    run = Path(cfg.run)
    split = load_split(cfg.eval_data)
    strategy = cfg.strategy
    if strategy == "tune":
        metrics = run / "metrics.json"
        if not metrics.exists():
            raise DataError(f"{metrics} not found; pass an explicit --strategy")
        strategy = json.loads(metrics.read_text())["strategy"]
    source = RunConfig()
    if (run / "config.txt").exists():
        read_config_file(run / "config.txt", source)
    variant, K, percentile = source.variant, source.K, source.percentile
    seed_dirs = sorted(run.glob("seed_*"))
    if not seed_dirs:
        raise DataError(f"no seed_* directories under {run}")
    reference = healthy_reference(cfg)
    per_seed, kids, rows = [], [], []
    for sd in seed_dirs:
        dices, ious, cfs = [], [], []
        for x, gt, i in zip(split["images"], split["gts"], split["indices"]):
            path = sd / f"img_{int(i):06d}" / "counterfactual.rfi"
            if not path.exists():
                continue
            cf = read_rfi(path).astype(np.float64)
            rep = build_report(x, cf, strategy, cfg.kernel_side, gt)
            dices.append(rep.dice)
            ious.append(rep.iou)
            cfs.append(cf)
        if not dices:
            raise DataError(f"{sd} holds no counterfactuals for {cfg.eval_data}")
        per_seed.append((np.array(dices), np.array(ious)))
        kids.append(_kid_or_nan(np.stack(cfs), reference))
        rows.append(seed_row(variant, K, percentile, [per_seed[-1]], [kids[-1]], sd.name))
    rows.append(seed_row(variant, K, percentile, per_seed, kids, cfg.run_id or "all"))
    write_csv(out / "evaluation.csv", rows)
    (out / "metrics.json").write_text(json.dumps({"dice": rows[-1]["dice_mean"], "iou": rows[-1]["iou_mean"],
                                                  "threshold": strategy_threshold(strategy), "strategy": strategy}, indent=1))


HANDLERS = {
    "phantom": cmd_phantom, "train": cmd_train, "saliency": cmd_saliency, "counterfactual": cmd_counterfactual,
    "sweep": cmd_sweep, "ablate": cmd_ablate, "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return 0 if exc.code == 0 else 2
    except DiffuseError as exc:
        print(f"diffuse: {exc}", file=sys.stderr)
        return exc.exit_code
    try:
        out = prepare_run_dir(command, cfg)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            HANDLERS[command](cfg, out)
    except DiffuseError as exc:
        print(f"diffuse {command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"diffuse {command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"diffuse {command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
