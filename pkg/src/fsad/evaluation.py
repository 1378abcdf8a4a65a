"""ROC metrics and multi-run experiment reports."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .estimators import MemoryBank, complexity_report
from .featfile import Manifest
from .features import FeatureMap, resize_bilinear
from .pipeline import (FittedModel, PipelineConfig, check_manifest_files,
                       fit_model, model_dims, score_entry)


@dataclass(frozen=True)
class LabeledScores:
    """Scores with binary labels at a stated granularity."""

    scores: np.ndarray
    labels: np.ndarray
    granularity: str = "image"

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        l = np.asarray(self.labels).reshape(-1)
        if s.shape != l.shape:
            raise ValueError(f"{s.size} scores but {l.size} labels")
        if not np.all(np.isin(l, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        if self.granularity not in ("image", "pixel"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", l.astype(np.int64))


def roc_auc(s: LabeledScores) -> float:
    """Probability a random anomalous score exceeds a random normal one.

    Computed as the Mann-Whitney statistic from average ranks, so ties get
    half credit.
    """
    n_pos = int(s.labels.sum())
    n_neg = s.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUC")
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    _, inverse, counts = np.unique(sorted_scores, return_inverse=True,
                                   return_counts=True)
    ends = np.cumsum(counts)
    group_avg = ends - (counts - 1) / 2.0
    ranks = np.empty(s.scores.size)
    ranks[order] = group_avg[inverse]
    pos_rank_sum = ranks[s.labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def fpr_at(s: LabeledScores, threshold: float) -> float:
    """Fraction of normal items scoring strictly above the threshold."""
    neg = s.scores[s.labels == 0]
    if neg.size == 0:
        raise ValueError("no negative samples")
    return float((neg > threshold).mean())


def load_mask(path) -> np.ndarray:
    """Pixel labels from a mask image: nonzero means anomalous."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr > 0).astype(np.int64)


def _pixel_pool(final_maps, masks):
    scores, labels = [], []
    for fmap, mask in zip(final_maps, masks):
        if mask is None:
            mask = np.zeros(fmap.shape, dtype=np.int64)
        if mask.shape != fmap.shape:
            resized = resize_bilinear(FeatureMap.from_array(fmap[None]),
                                      mask.shape[0], mask.shape[1])
            fmap = resized.data[0]
        scores.append(fmap.reshape(-1))
        labels.append(mask.reshape(-1))
    return LabeledScores(np.concatenate(scores), np.concatenate(labels),
                         granularity="pixel")


def _complexity(cfg: PipelineConfig, fitted: FittedModel) -> dict:
    dims = model_dims(fitted)
    if isinstance(fitted.model, MemoryBank):
        kind, dp = "patchcore", min(cfg.d_prime, fitted.fit_dim)
    elif dims["low_rank"]:
        kind, dp = "ortho", dims["dim"]
    else:
        kind, dp = "padim", min(cfg.d_prime, fitted.fit_dim)
    return complexity_report(kind, d=fitted.fit_dim, dp=dp,
                             k=fitted.fit_samples, h=fitted.fit_grid_h,
                             w=fitted.fit_grid_w, gamma=cfg.gamma)


def evaluate_run(cfg: PipelineConfig, manifest: Manifest,
                 fitted: FittedModel) -> dict:
    """Score the manifest's test entries against one fitted model."""
    tests = manifest.test()
    image_scores, image_labels = [], []
    final_maps, masks = [], []
    for entry in tests:
        scored = score_entry(fitted, manifest, entry)
        image_scores.append(scored.score)
        image_labels.append(entry.label)
        final_maps.append(scored.amap.final)
        masks.append(load_mask(manifest.resolve(entry.pixel_mask_file))
                     if entry.pixel_mask_file else None)

    threshold = (cfg.fpr_threshold if cfg.fpr_threshold is not None
                 else fitted.support_score_max)
    out = {"n_test": len(tests), "threshold": threshold}
    if tests:
        img = LabeledScores(image_scores, image_labels, granularity="image")
        out["fpr"] = fpr_at(img, threshold)
        out["image_auc"] = (roc_auc(img)
                            if 0 < img.labels.sum() < img.labels.size else None)
        pix = _pixel_pool(final_maps, masks)
        out["pixel_auc"] = (roc_auc(pix)
                            if 0 < pix.labels.sum() < pix.labels.size else None)
    else:
        out.update(fpr=None, image_auc=None, pixel_auc=None)
    return out


def _mean_sd(values: list[float | None]) -> dict:
    present = [v for v in values if v is not None]
    if not present:
        return {"mean": None, "sd": None}
    return {"mean": float(np.mean(present)), "sd": float(np.std(present))}


def run_report(manifest: Manifest, cfg: PipelineConfig) -> tuple[dict, dict]:
    """Fit and evaluate over several support-set draws.

    Returns the deterministic report plus a separate timing dict, so the
    report itself is byte-stable across reruns of the same config.
    """
    missing = check_manifest_files(manifest)
    if missing:
        listing = "\n".join(f"  missing: {p}" for p in missing)
        raise ValueError(f"manifest references absent files:\n{listing}")

    runs, timings = [], []
    complexity = None
    t_total = time.perf_counter()
    for r in range(cfg.runs):
        seed = cfg.seed + r
        t0 = time.perf_counter()
        fitted = fit_model(cfg, manifest, support_seed=seed)
        fit_seconds = time.perf_counter() - t0
        row = {"run": r, "support_seed": seed,
               "support_ids": fitted.support_ids,
               "kept_augmentations": fitted.kept_augmentations}
        row.update(evaluate_run(cfg, manifest, fitted))
        runs.append(row)
        timings.append({"run": r, "fit_seconds": fit_seconds})
        if complexity is None:
            complexity = _complexity(cfg, fitted)

    report = {
        "schema_version": 1,
        "config": cfg.to_json(),
        "runs": runs,
        "summary": {
            "image_auc": _mean_sd([r["image_auc"] for r in runs]),
            "pixel_auc": _mean_sd([r["pixel_auc"] for r in runs]),
            "fpr": _mean_sd([r["fpr"] for r in runs]),
        },
        "complexity": complexity,
    }
    timing = {"runs": timings,
              "total_seconds": time.perf_counter() - t_total}
    return report, timing


def report_csv(report: dict) -> str:
    """Per-run table with the summary row appended."""
    lines = ["run,support_seed,image_auc,pixel_auc,fpr"]

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    for r in report["runs"]:
        lines.append(f"{r['run']},{r['support_seed']},{fmt(r['image_auc'])},"
                     f"{fmt(r['pixel_auc'])},{fmt(r['fpr'])}")
    s = report["summary"]
    lines.append(f"mean,,{fmt(s['image_auc']['mean'])},"
                 f"{fmt(s['pixel_auc']['mean'])},{fmt(s['fpr']['mean'])}")
    lines.append(f"sd,,{fmt(s['image_auc']['sd'])},"
                 f"{fmt(s['pixel_auc']['sd'])},{fmt(s['fpr']['sd'])}")
    return "\n".join(lines) + "\n"
