"""Fit and score orchestration shared by the CLI and the report generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import augselect
from .estimators import (GaussianField, MemoryBank, build_memory_bank,
                         fit_gaussian_field, fit_lowrank_field, semi_orthogonal)
from .featfile import Manifest, ManifestEntry
from .features import FeatureMap, PatchFeatureSet, aggregate_multiscale
from .registration import (AffineTransform, RegistrationConfig,
                           RegistrationHead, affine_warp, register_affine)
from .scoring import AnomalyMap, assemble, knn_score, mahalanobis_score

_ESTIMATORS = ("padim", "ortho", "patchcore")
_AUG_MODES = ("all", "selected", "none")
_AUG_METRICS = ("w2", "kl", "js")


@dataclass
class PipelineConfig:
    """Every knob of the pipeline; serializes to one JSON object."""

    estimator: str = "padim"
    epsilon: float = 0.01
    d_prime: int = 100
    gamma: float = 0.1
    proj_dim: int = 128
    b_neighbors: int = 3
    smooth_sigma: float = 0.0
    seed: int = 0
    aug_mode: str = "selected"
    aug_metric: str = "w2"
    registration: bool = False
    out_size: int = 224
    fpr_threshold: float | None = None
    runs: int = 1
    support_k: int | None = None

    def __post_init__(self):
        if self.estimator not in _ESTIMATORS:
            raise ValueError(f"estimator must be one of {_ESTIMATORS}, "
                             f"got {self.estimator!r}")
        if self.aug_mode not in _AUG_MODES:
            raise ValueError(f"aug_mode must be one of {_AUG_MODES}, "
                             f"got {self.aug_mode!r}")
        if self.aug_metric not in _AUG_METRICS:
            raise ValueError(f"aug_metric must be one of {_AUG_METRICS}, "
                             f"got {self.aug_metric!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.d_prime < 1 or self.proj_dim < 1 or self.out_size < 1:
            raise ValueError("dimensions must be positive")
        if self.b_neighbors < 1:
            raise ValueError("b_neighbors must be >= 1")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be non-negative")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.support_k is not None and self.support_k < 1:
            raise ValueError("support_k must be >= 1 when given")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class FittedModel:
    """A fitted estimator plus everything needed to score and calibrate."""

    model: GaussianField | MemoryBank
    config: PipelineConfig
    support_score_max: float = 0.0
    aug_report: augselect.AugmentationReport | None = None
    reference_maps: list[np.ndarray] | None = None
    support_ids: list[str] = dc_field(default_factory=list)
    kept_augmentations: list[str] = dc_field(default_factory=list)
    fit_grid_h: int = 0
    fit_grid_w: int = 0
    fit_samples: int = 0
    fit_dim: int = 0


def entry_features(manifest: Manifest, entry: ManifestEntry) -> np.ndarray:
    """Aggregated (H, W, D) features of one manifest entry."""
    return aggregate_multiscale(manifest.load_entry_features(entry))


def _register_to_reference(agg: np.ndarray, reference_maps: list[np.ndarray],
                           ) -> tuple[np.ndarray, AffineTransform]:
    moving = FeatureMap.from_array(np.moveaxis(agg, 2, 0))
    refs = [FeatureMap.from_array(r) for r in reference_maps]
    theta, _ = register_affine(moving, refs, RegistrationHead(),
                               RegistrationConfig())
    warped = affine_warp(moving, theta)
    return np.moveaxis(warped.data, 0, 2), theta


def _fit_estimator(cfg: PipelineConfig, feats: PatchFeatureSet):
    if cfg.estimator == "padim":
        return fit_gaussian_field(feats, cfg.epsilon)
    if cfg.estimator == "ortho":
        dp = min(cfg.d_prime, feats.dim)
        proj = semi_orthogonal(feats.dim, dp, cfg.seed)
        return fit_lowrank_field(feats, proj, cfg.epsilon)
    return build_memory_bank(feats, cfg.gamma, cfg.proj_dim, cfg.seed)


def _selection_field(cfg: PipelineConfig, feats: PatchFeatureSet,
                     proj) -> GaussianField:
    # Distances run in the estimator's own space: low-rank for ortho,
    # full-dimensional otherwise.
    if proj is not None:
        return fit_lowrank_field(feats, proj, cfg.epsilon)
    return fit_gaussian_field(feats, cfg.epsilon)


def select_augmentations(cfg: PipelineConfig, manifest: Manifest,
                         identity_entries: list[ManifestEntry],
                         ) -> augselect.AugmentationReport | None:
    """Fit per-augmentation fields and keep those near the base distribution."""
    ids = {e.image_id for e in identity_entries}
    candidates = [c for c in manifest.augmentation_ids()
                  if any(e.image_id in ids for e in manifest.support({c}))]
    if not candidates:
        return None
    proj = None
    if cfg.estimator == "ortho":
        base_dim = entry_features(manifest, identity_entries[0]).shape[2]
        proj = semi_orthogonal(base_dim, min(cfg.d_prime, base_dim), cfg.seed)
    base_set = _entries_to_set(manifest, identity_entries, None)
    base = _selection_field(cfg, base_set, proj)
    w_sums: dict[str, float] = {}
    for aug in candidates:
        members = [e for e in manifest.support({aug}) if e.image_id in ids]
        fld = _selection_field(cfg, _entries_to_set(manifest, members, None), proj)
        w_sums[aug] = augselect.weighted_w_sum(base, fld, cfg.aug_metric)
    return augselect.select(w_sums)


def _entries_to_set(manifest: Manifest, entries: list[ManifestEntry],
                    reference_maps: list[np.ndarray] | None,
                    ) -> PatchFeatureSet:
    stacks = []
    for e in entries:
        agg = entry_features(manifest, e)
        if reference_maps is not None:
            agg, _ = _register_to_reference(agg, reference_maps)
        stacks.append(agg)
    return PatchFeatureSet.from_array(np.stack(stacks, axis=0))


def _subsample(entries: list[ManifestEntry], k: int | None,
               seed: int) -> list[ManifestEntry]:
    if k is None or k >= len(entries):
        return entries
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(entries), size=k, replace=False))
    return [entries[i] for i in idx]


def fit_model(cfg: PipelineConfig, manifest: Manifest,
              support_seed: int | None = None) -> FittedModel:
    """Select augmentations, optionally register, and fit the estimator."""
    seed = cfg.seed if support_seed is None else support_seed
    identity = _subsample(manifest.support({"identity"}), cfg.support_k, seed)
    min_support = 1 if cfg.estimator == "patchcore" else 2
    if len(identity) < min_support:
        raise ValueError("need at least two samples" if min_support == 2
                         else "need at least one support sample")

    aug_report = None
    kept: list[str] = []
    if cfg.aug_mode == "selected":
        aug_report = select_augmentations(cfg, manifest, identity)
        if aug_report is not None:
            kept = aug_report.kept()
    elif cfg.aug_mode == "all":
        kept = manifest.augmentation_ids()

    ids = {e.image_id for e in identity}
    entries = identity + [e for e in manifest.support(set(kept))
                          if e.augmentation_id != "identity" and e.image_id in ids]

    reference_maps = None
    if cfg.registration:
        reference_maps = [np.moveaxis(entry_features(manifest, e), 2, 0)
                          for e in identity]

    feats = _entries_to_set(manifest, entries, reference_maps)
    model = _fit_estimator(cfg, feats)

    fitted = FittedModel(model=model, config=cfg,
                         aug_report=aug_report,
                         reference_maps=reference_maps,
                         support_ids=[e.image_id for e in identity],
                         kept_augmentations=kept,
                         fit_grid_h=feats.grid_h, fit_grid_w=feats.grid_w,
                         fit_samples=feats.samples, fit_dim=feats.dim)
    self_scores = [score_features(fitted, entry_features(manifest, e)).score
                   for e in identity]
    fitted.support_score_max = float(max(self_scores))
    return fitted


@dataclass
class ScoredImage:
    """One test image's anomaly map and its image-level score."""

    amap: AnomalyMap
    score: float
    theta: AffineTransform | None = None


def score_features(fitted: FittedModel, agg: np.ndarray) -> ScoredImage:
    """Score one aggregated (H, W, D) feature grid against the fitted model."""
    cfg = fitted.config
    theta = None
    if fitted.reference_maps is not None:
        agg, theta = _register_to_reference(agg, fitted.reference_maps)
    feats = PatchFeatureSet.from_array(agg[None])
    if isinstance(fitted.model, MemoryBank):
        grid, image_score = knn_score(feats, fitted.model, cfg.b_neighbors)
    else:
        grid = mahalanobis_score(feats, fitted.model)
        image_score = None
    transforms = [theta] if theta is not None else []
    amap = assemble(grid, transforms, cfg.out_size, cfg.out_size,
                    cfg.smooth_sigma)
    if image_score is None:
        image_score = amap.image_score
    return ScoredImage(amap=amap, score=float(image_score), theta=theta)


def score_entry(fitted: FittedModel, manifest: Manifest,
                entry: ManifestEntry) -> ScoredImage:
    return score_features(fitted, entry_features(manifest, entry))


def check_manifest_files(manifest: Manifest) -> list[str]:
    """Paths referenced by the manifest that do not exist on disk."""
    missing = []
    for e in manifest.entries:
        for rel in e.scale_files:
            if not manifest.resolve(rel).exists():
                missing.append(str(manifest.resolve(rel)))
        if e.pixel_mask_file and not manifest.resolve(e.pixel_mask_file).exists():
            missing.append(str(manifest.resolve(e.pixel_mask_file)))
    return missing


def model_dims(fitted: FittedModel) -> dict:
    """Grid and dimension facts for reports."""
    m = fitted.model
    if isinstance(m, MemoryBank):
        return {"bank_items": int(len(m)), "dim": int(m.items.shape[1])}
    return {"grid_h": m.grid_h, "grid_w": m.grid_w, "dim": m.dim,
            "low_rank": m.projection is not None}
