"""Normal-distribution estimators over registered patch features.

Three interchangeable models of the normal class: a per-position Gaussian
field, its low-rank projection, and a coreset-sampled memory bank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .features import PatchFeatureSet


@dataclass(frozen=True)
class LowRankProjection:
    """Semi-orthogonal D x D' matrix with orthonormal columns."""

    matrix: np.ndarray = dc_field(repr=False)
    seed: int = 0

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError(f"projection must be 2-D, got shape {arr.shape}")
        gram = arr.T @ arr
        if np.max(np.abs(gram - np.eye(arr.shape[1]))) > 1e-6:
            raise ValueError("projection columns are not orthonormal")
        arr.flags.writeable = False
        object.__setattr__(self, "matrix", arr)

    @property
    def full_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def reduced_dim(self) -> int:
        return self.matrix.shape[1]

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Project vectors living along the last axis."""
        return vectors @ self.matrix


@dataclass
class GaussianField:
    """Per-position Gaussian parameters on an H x W grid.

    ``mean`` is (H, W, dim) and ``cov`` is (H, W, dim, dim); dim is the full
    feature dimension or, when ``projection`` is set, the reduced one. Treat
    instances as immutable; the Cholesky cache is the only mutable slot.
    """

    mean: np.ndarray
    cov: np.ndarray
    epsilon: float
    projection: LowRankProjection | None = None
    _chol: np.ndarray | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        mean = np.ascontiguousarray(np.asarray(self.mean, dtype=np.float64))
        cov = np.ascontiguousarray(np.asarray(self.cov, dtype=np.float64))
        if mean.ndim != 3 or cov.ndim != 4:
            raise ValueError(f"mean must be (H, W, D) and cov (H, W, D, D), "
                             f"got {mean.shape} and {cov.shape}")
        if cov.shape != mean.shape + (mean.shape[2],):
            raise ValueError(f"cov shape {cov.shape} does not match "
                             f"mean shape {mean.shape}")
        if np.max(np.abs(cov - np.swapaxes(cov, 2, 3))) > 1e-9:
            raise ValueError("covariances are not symmetric")
        mean.flags.writeable = False
        cov.flags.writeable = False
        self.mean = mean
        self.cov = cov

    @property
    def grid_h(self) -> int:
        return self.mean.shape[0]

    @property
    def grid_w(self) -> int:
        return self.mean.shape[1]

    @property
    def dim(self) -> int:
        return self.mean.shape[2]

    def cholesky(self) -> np.ndarray:
        """Lower-triangular factors of every covariance, computed once."""
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self.cov)
            except np.linalg.LinAlgError:
                for j in range(self.grid_h):
                    for i in range(self.grid_w):
                        try:
                            np.linalg.cholesky(self.cov[j, i])
                        except np.linalg.LinAlgError:
                            raise RuntimeError(
                                f"singular covariance at ({i}, {j})") from None
                raise
        return self._chol


def _moments(feats: PatchFeatureSet, epsilon: float):
    if feats.samples < 2:
        raise ValueError("need at least two samples")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    vecs = feats.vectors
    mean = vecs.mean(axis=0)
    centered = vecs - mean
    cov = np.einsum("khwa,khwb->hwab", centered, centered) / (feats.samples - 1)
    cov += epsilon * np.eye(vecs.shape[-1])
    return mean, cov


def fit_gaussian_field(feats: PatchFeatureSet, epsilon: float = 0.01) -> GaussianField:
    """Sample mean and unbiased covariance per position, plus epsilon * I."""
    mean, cov = _moments(feats, epsilon)
    return GaussianField(mean=mean, cov=cov, epsilon=epsilon)


def semi_orthogonal(d: int, dp: int, seed: int = 0) -> LowRankProjection:
    """Seeded Haar-style semi-orthogonal matrix with orthonormal columns.

    QR of a standard-Gaussian draw, with the sign of each R diagonal folded
    into Q so the distribution is uniform over the orthogonal group.
    """
    if not 1 <= dp <= d:
        raise ValueError(f"reduced dim {dp} must be in [1, {d}]")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, dp)))
    q = q * np.sign(np.diag(r))
    return LowRankProjection(matrix=q, seed=seed)


def fit_lowrank_field(feats: PatchFeatureSet, proj: LowRankProjection,
                      epsilon: float = 0.01) -> GaussianField:
    """Gaussian field in the projected space: W'mu and W'SigmaW plus epsilon."""
    if proj.full_dim != feats.dim:
        raise ValueError(
            f"projection expects dim {proj.full_dim}, features have {feats.dim}")
    if feats.samples < 2:
        raise ValueError("need at least two samples")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    reduced = PatchFeatureSet.from_array(proj.apply(feats.vectors))
    mean, cov = _moments(reduced, epsilon)
    return GaussianField(mean=mean, cov=cov, epsilon=epsilon, projection=proj)


@dataclass(frozen=True)
class MemoryBank:
    """Patch feature vectors retained as the normal model."""

    items: np.ndarray = dc_field(repr=False)
    gamma: float = 1.0
    projection_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.items, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError(f"bank items must be a non-empty (N, D) array, "
                             f"got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "items", arr)

    def __len__(self) -> int:
        return self.items.shape[0]


def _psi_matrix(d: int, proj_dim: int, seed: int) -> np.ndarray | None:
    # Johnson-Lindenstrauss style random projection; identity when it would
    # not reduce the dimension.
    if proj_dim >= d:
        return None
    rng = np.random.default_rng(seed)
    return rng.standard_normal((d, proj_dim)) / math.sqrt(proj_dim)


def coreset_sample(bank: MemoryBank, l: int, proj_dim: int | None = None,
                   seed: int | None = None) -> MemoryBank:
    """Greedy k-center selection of l items in a random-projected space.

    Starts from the item with the largest projected norm, then repeatedly
    adds the item farthest from the selected set; ties break to the lowest
    index. Items are returned in selection order, untouched by the
    projection (no synthesis).
    """
    n = len(bank)
    if not 1 <= l <= n:
        raise ValueError(f"coreset size {l} must be in [1, {n}]")
    if proj_dim is None:
        proj_dim = bank.projection_dim
    if seed is None:
        seed = bank.seed

    psi = _psi_matrix(bank.items.shape[1], proj_dim, seed)
    pts = bank.items if psi is None else bank.items @ psi

    chosen = [int(np.argmax(np.linalg.norm(pts, axis=1)))]
    min_dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for _ in range(l - 1):
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist,
                              np.linalg.norm(pts - pts[nxt], axis=1))
    return MemoryBank(items=bank.items[chosen], gamma=bank.gamma,
                      projection_dim=proj_dim, seed=seed)


def build_memory_bank(feats: PatchFeatureSet, gamma: float = 0.1,
                      proj_dim: int = 128, seed: int = 0) -> MemoryBank:
    """Flatten all K*H*W patch vectors and keep a ceil(gamma * N) coreset."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    flat = feats.vectors.reshape(-1, feats.dim)
    full = MemoryBank(items=flat, gamma=gamma, projection_dim=proj_dim, seed=seed)
    l = math.ceil(gamma * len(full))
    return coreset_sample(full, l, proj_dim=proj_dim, seed=seed)


_ORDER_STRINGS = {
    "padim": "O(HWD³)",
    "ortho": "O(HWD′³)",
    "patchcore": "O(γKH²W²D²)",
}


def complexity_report(kind: str, d: int, dp: int, k: int, h: int, w: int,
                      gamma: float) -> dict:
    """Memory footprint in floats and the asymptotic inference order."""
    if kind not in _ORDER_STRINGS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    if min(d, dp, k, h, w) < 1 or gamma <= 0:
        raise ValueError("dimensions must be positive")
    if kind == "padim":
        memory = h * w * (d + d * d)
    elif kind == "ortho":
        memory = h * w * (dp + dp * dp)
    else:
        memory = math.ceil(gamma * k * h * w) * d
    return {"memory_floats": memory,
            "inference_flops_order": _ORDER_STRINGS[kind]}
