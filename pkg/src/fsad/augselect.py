"""Automatic augmentation selection by distribution distance to the base fit.

Each candidate augmentation gets a Gaussian field fitted from its augmented
support features; a per-position distance to the unaugmented field is
re-weighted by the mean shift, summed, and compared against the average over
all candidates. Augmentations above the average are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .estimators import GaussianField


def spd_sqrt(s: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition, clamping tiny negatives."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {s.shape}")
    if np.max(np.abs(s - s.T)) > 1e-9:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(s)
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2.0


def gaussian_w2(mu1: np.ndarray, s1: np.ndarray,
                mu2: np.ndarray, s2: np.ndarray) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape:
        raise ValueError("dimension mismatch between the two Gaussians")
    root1 = spd_sqrt(s1)
    if np.array_equal(mu1, mu2) and np.array_equal(s1, s2):
        return 0.0
    cross = spd_sqrt(root1 @ s2 @ root1)
    val = float(np.sum((mu1 - mu2) ** 2)
                + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def _check_grids(base: GaussianField, aug: GaussianField):
    if base.mean.shape != aug.mean.shape:
        raise ValueError(f"grid mismatch: {base.mean.shape} vs {aug.mean.shape}")


def _gaussian_kl(mu1, s1, mu2, s2) -> float:
    d = mu1.shape[0]
    diff = mu2 - mu1
    solved = np.linalg.solve(s2, s1)
    maha = diff @ np.linalg.solve(s2, diff)
    _, logdet1 = np.linalg.slogdet(s1)
    _, logdet2 = np.linalg.slogdet(s2)
    return max(0.5 * (np.trace(solved) + maha - d + logdet2 - logdet1), 0.0)


def _gaussian_js(mu1, s1, mu2, s2) -> float:
    # Mixture midpoint approximated by its moment-matched Gaussian.
    mu_m = (mu1 + mu2) / 2.0
    diff = mu1 - mu2
    s_m = (s1 + s2) / 2.0 + np.outer(diff, diff) / 4.0
    return 0.5 * (_gaussian_kl(mu1, s1, mu_m, s_m)
                  + _gaussian_kl(mu2, s2, mu_m, s_m))


_METRICS = {"w2": gaussian_w2, "kl": _gaussian_kl, "js": _gaussian_js}


def per_position_distance(base: GaussianField, aug: GaussianField,
                          metric: str = "w2") -> np.ndarray:
    """Distribution distance at every grid position."""
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    _check_grids(base, aug)
    fn = _METRICS[metric]
    out = np.empty((base.grid_h, base.grid_w))
    for j in range(base.grid_h):
        for i in range(base.grid_w):
            out[j, i] = fn(base.mean[j, i], base.cov[j, i],
                           aug.mean[j, i], aug.cov[j, i])
    return out


def weighted_w_sum(base: GaussianField, aug: GaussianField,
                   metric: str = "w2") -> float:
    """Sum over positions of the mean-shift norm times the distance there.

    The unsquared L2 mean difference is the weight, so positions whose mean
    barely moves are suppressed even when the distance is nonzero.
    """
    _check_grids(base, aug)
    dist = per_position_distance(base, aug, metric)
    shift = np.linalg.norm(aug.mean - base.mean, axis=2)
    return float((shift * dist).sum())


@dataclass(frozen=True)
class AugmentationReport:
    """Weighted distances per augmentation and the mean-threshold verdicts."""

    w_sums: dict[str, float]
    delta: float
    selected: dict[str, bool]
    per_position: dict[str, np.ndarray] = dc_field(default_factory=dict, repr=False)

    def kept(self) -> list[str]:
        return [c for c, keep in self.selected.items() if keep]

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "augmentations": {
                c: {"w_sum": self.w_sums[c], "kept": self.selected[c]}
                for c in sorted(self.w_sums)
            },
        }


def select(w_sums: dict[str, float],
           per_position: dict[str, np.ndarray] | None = None) -> AugmentationReport:
    """Keep every augmentation whose weighted sum is at or below the mean.

    The comparison is inclusive, so the minimum is always kept and a set of
    identical sums keeps everything.
    """
    if not w_sums:
        raise ValueError("need at least one augmentation to select from")
    for c, v in w_sums.items():
        if v < 0:
            raise ValueError(f"negative distance for augmentation {c!r}")
    delta = float(np.mean(list(w_sums.values())))
    selected = {c: v <= delta for c, v in w_sums.items()}
    return AugmentationReport(w_sums=dict(w_sums), delta=delta,
                              selected=selected,
                              per_position=dict(per_position or {}))
