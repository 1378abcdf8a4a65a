"""Distance of test features to a fitted normal model and anomaly-map assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import cdist

from .estimators import GaussianField, MemoryBank
from .featfile import write_feature_file
from .features import FeatureMap, PatchFeatureSet
from .registration import AffineTransform, inverse_remap


@dataclass(frozen=True)
class AnomalyMap:
    """Patch-grid scores, the full-resolution map, and the image-level score."""

    grid: np.ndarray = dc_field(repr=False)
    final: np.ndarray = dc_field(repr=False)
    image_score: float

    def __post_init__(self):
        for name in ("grid", "final"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name),
                                                  dtype=np.float64))
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite scores")
            if arr.min() < 0:
                raise ValueError(f"{name} contains negative scores")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not np.isclose(self.image_score, self.final.max()):
            raise ValueError("image_score must equal the max of the final map")


def _single_test_vectors(feats: PatchFeatureSet) -> np.ndarray:
    if feats.samples != 1:
        raise ValueError(f"scoring expects a single test image, got K={feats.samples}")
    return feats.vectors[0]


def mahalanobis_score(feats: PatchFeatureSet, fld: GaussianField) -> np.ndarray:
    """Covariance-normalized distance to the field mean at every position.

    Uses the cached Cholesky factor per position and a triangular solve
    rather than an explicit inverse. Test vectors are projected first when
    the field is low-rank.
    """
    vecs = _single_test_vectors(feats)
    if fld.projection is not None:
        if fld.projection.full_dim != vecs.shape[-1]:
            raise ValueError(f"projection expects dim {fld.projection.full_dim}, "
                             f"features have {vecs.shape[-1]}")
        vecs = fld.projection.apply(vecs)
    if vecs.shape != fld.mean.shape:
        raise ValueError(f"feature grid {vecs.shape} does not match "
                         f"field {fld.mean.shape}")
    chol = fld.cholesky()
    diff = vecs - fld.mean
    y = np.linalg.solve(chol, diff[..., None])[..., 0]
    return np.sqrt(np.einsum("hwa,hwa->hw", y, y))


def _reweight(star: np.ndarray, d_star: float, bank: MemoryBank, b: int) -> float:
    # Softmax-style down-weighting by the b nearest bank distances; exponents
    # are taken relative to d_star, which is the minimum, so they never
    # overflow toward zero denominator.
    dists = np.linalg.norm(bank.items - star, axis=1)
    nearest = np.sort(dists, kind="stable")[:min(b, len(dists))]
    expo = np.minimum(nearest - d_star, 700.0)
    return 1.0 - 1.0 / float(np.exp(expo).sum())


def knn_score(feats: PatchFeatureSet, bank: MemoryBank,
              b_neighbors: int = 3) -> tuple[np.ndarray, float]:
    """Exact nearest-bank-item distance per position, plus the image score.

    The image score is the maximum grid distance scaled by the re-weight
    factor of the maximizing patch; the pixel grid itself stays raw.
    """
    if b_neighbors < 1:
        raise ValueError("b_neighbors must be >= 1")
    vecs = _single_test_vectors(feats)
    h, w, d = vecs.shape
    if bank.items.shape[1] != d:
        raise ValueError(f"bank dim {bank.items.shape[1]} does not match "
                         f"feature dim {d}")
    flat = vecs.reshape(-1, d)
    dists = cdist(flat, bank.items)
    grid = dists.min(axis=1).reshape(h, w)
    star_idx = int(np.argmax(grid.reshape(-1)))
    d_star = float(grid.reshape(-1)[star_idx])
    weight = _reweight(flat[star_idx], d_star, bank, b_neighbors)
    return grid, weight * d_star


def assemble(grid: np.ndarray, transforms: list[AffineTransform],
             out_h: int, out_w: int, smooth_sigma: float = 0.0) -> AnomalyMap:
    """Map patch scores back through the warps and up to full resolution."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("score grid contains non-finite values")
    final = inverse_remap(grid, transforms, out_h, out_w)
    if smooth_sigma > 0:
        final = gaussian_filter(final, sigma=smooth_sigma)
    final = np.maximum(final, 0.0)
    return AnomalyMap(grid=grid, final=final, image_score=float(final.max()))


def save_anomaly_map(base: str | Path, amap: AnomalyMap) -> None:
    """Write ``<base>.png`` (16-bit grayscale), ``<base>.json``, ``<base>.carg``.

    The PNG is min-max normalized; the sidecar keeps the raw range so the
    normalization is invertible.
    """
    base = Path(base)
    lo = float(amap.final.min())
    hi = float(amap.final.max())
    span = hi - lo
    norm = (amap.final - lo) / span if span > 0 else np.zeros_like(amap.final)
    img = Image.fromarray(np.round(norm * 65535).astype("<u2"))
    img.save(base.with_suffix(".png"))
    base.with_suffix(".json").write_text(json.dumps(
        {"image_score": amap.image_score, "raw_min": lo, "raw_max": hi},
        indent=2, sort_keys=True) + "\n")
    write_feature_file(base.with_suffix(".carg"),
                       FeatureMap.from_array(amap.final[None]))
