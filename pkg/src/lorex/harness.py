"""Evaluation machinery shared by the CLI and the acceptance suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import seeding
from .degradations import DatasetManifest, read_ppm
from .errors import ConfigError
from .metrics import MetricReport, psnr, ssim
from .numerics import DTYPE, Tensor
from .restorer import RestorerModel, TaskData, restore
from .router import RouterState, encode_degradation, predict_with_crop_correction, \
    resize_bilinear, similarity


def load_task_data(manifest: DatasetManifest, label: str) -> TaskData:
    task = manifest.task(label)
    pairs = [(read_ppm(d), read_ppm(c)) for c, d in task.pairs]
    return TaskData.from_pairs(label, pairs)


def clean_training_images(manifest: DatasetManifest) -> list[Tensor]:
    """All clean images in manifest order (task order, then index order)."""
    return [read_ppm(c) for task in manifest.tasks for c, _ in task.pairs]


def router_training_set(manifest: DatasetManifest) -> list[tuple[str, list[Tensor]]]:
    """Per-label degraded images, the router's training input."""
    return [(task.label, [read_ppm(d) for _, d in task.pairs]) for task in manifest.tasks]


WeightFn = Callable[[Tensor, str, int], np.ndarray]


def strategy_weight_fn(strategy: str, model: RestorerModel,
                       router: RouterState | None = None, k: int | None = None,
                       seed: int = 0, manual_s: Sequence[float] | None = None) -> WeightFn:
    """Per-image composition weights for one evaluation strategy.

    random: one expert one-hot, drawn per image. average: uniform over all
    experts. top1/top2/topk/all: router similarity with the given K.
    oracle: one-hot at the image's true task. manual: a fixed user vector.
    """
    t = model.t

    if strategy == "average":
        uniform = np.full(t, 1.0 / t, DTYPE)
        return lambda img, label, idx: uniform
    if strategy == "random":
        def fn(img, label, idx):
            s = np.zeros(t, DTYPE)
            s[seeding.stream(seed, "random-expert", label, idx).integers(0, t)] = 1.0
            return s
        return fn
    if strategy == "oracle":
        def fn(img, label, idx):
            if label not in model.labels:
                raise ConfigError(f"oracle strategy: {label!r} is not a trained task")
            s = np.zeros(t, DTYPE)
            s[model.labels.index(label)] = 1.0
            return s
        return fn
    if strategy == "manual":
        if manual_s is None:
            raise ConfigError("manual strategy requires an explicit weight vector")
        fixed = np.asarray(manual_s, DTYPE)
        return lambda img, label, idx: fixed
    if strategy in ("top1", "top2", "topk", "all"):
        if router is None:
            raise ConfigError(f"strategy {strategy!r} requires a router")
        kk = {"top1": 1, "top2": 2, "all": t}.get(strategy, k)
        if kk is None:
            raise ConfigError("strategy 'topk' requires an explicit K")
        return lambda img, label, idx: predict_with_crop_correction(router, img, kk).s
    raise ConfigError(f"unknown strategy {strategy!r}")


def evaluate_restoration(model: RestorerModel, manifest: DatasetManifest,
                         weight_fn: WeightFn,
                         with_baseline: bool = True) -> dict[str, dict[str, MetricReport]]:
    """Restore every test pair and score it; returns task -> metric -> report.

    Metrics: restored psnr/ssim plus (optionally) the degraded input's
    psnr_degraded baseline.
    """
    results: dict[str, dict[str, MetricReport]] = {}
    for task in manifest.tasks:
        psnrs, ssims, base = [], [], []
        for idx, (clean_path, degraded_path) in enumerate(task.pairs):
            clean = read_ppm(clean_path)
            degraded = read_ppm(degraded_path)
            out = restore(model, degraded, weight_fn(degraded, task.label, idx))
            psnrs.append(psnr(out, clean))
            ssims.append(ssim(out, clean))
            if with_baseline:
                base.append(psnr(degraded, clean))
        reports = {"psnr": MetricReport(psnrs), "ssim": MetricReport(ssims)}
        if with_baseline:
            reports["psnr_degraded"] = MetricReport(base)
        results[task.label] = reports
    return results


def routing_accuracy(router: RouterState, manifest: DatasetManifest,
                     corrected: bool = True) -> tuple[float, dict[str, float]]:
    """Fraction of degraded test images routed to their true task.

    ``corrected=False`` scores the resized view only; ``corrected=True``
    averages the resized and native-crop similarities first. Tasks whose
    label is not in the router vocabulary (mixed composites) are skipped.
    """
    per_task: dict[str, float] = {}
    total = hits = 0
    for task in manifest.tasks:
        if task.label not in router.labels:
            continue
        truth = router.labels.index(task.label)
        task_hits = 0
        for _, degraded_path in task.pairs:
            img = read_ppm(degraded_path)
            if corrected:
                routed = predict_with_crop_correction(router, img, 1)
                pred = int(np.argmax(routed.s_o))
            else:
                resized = resize_bilinear(img, router.patch)
                pred = int(np.argmax(similarity(
                    encode_degradation(router, resized), router.bank)))
            task_hits += int(pred == truth)
        per_task[task.label] = task_hits / len(task.pairs)
        hits += task_hits
        total += len(task.pairs)
    if total == 0:
        raise ConfigError("manifest shares no labels with the router")
    return hits / total, per_task
