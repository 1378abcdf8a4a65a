"""Affine warping of feature maps, the symmetrized registration loss, and a
direct gradient-descent optimizer for the warp parameters.

Coordinates follow the normalized align-corners convention: x runs over
columns and y over rows, with -1 at the center of the first sample and +1 at
the center of the last. A transform maps target coordinates to source
coordinates, so warping looks up ``source = theta @ (x_t, y_t, 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, resize_bilinear

_MIN_DET = 1e-8


@dataclass(frozen=True)
class AffineTransform:
    """A 2x3 affine matrix acting on normalized (x, y) coordinates."""

    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.theta, dtype=np.float64).reshape(2, 3).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError("affine parameters must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "theta", arr)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def rotation(cls, degrees: float) -> "AffineTransform":
        """Rotation about the grid center by the given angle."""
        a = math.radians(degrees)
        return cls(np.array([[math.cos(a), -math.sin(a), 0.0],
                             [math.sin(a), math.cos(a), 0.0]]))

    @property
    def augmented(self) -> np.ndarray:
        """The transform as an invertible-style 3x3 matrix."""
        return np.vstack([self.theta, [0.0, 0.0, 1.0]])

    def angle_degrees(self) -> float:
        """Rotation angle implied by the linear part."""
        return math.degrees(math.atan2(self.theta[1, 0], self.theta[0, 0]))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Source-lookup composition: warping by the result equals warping by
        ``self`` first and ``other`` second."""
        return AffineTransform((self.augmented @ other.augmented)[:2])

    def invert(self) -> "AffineTransform":
        det = self.theta[0, 0] * self.theta[1, 1] - self.theta[0, 1] * self.theta[1, 0]
        if abs(det) <= _MIN_DET:
            raise RuntimeError("non-invertible transform")
        return AffineTransform(np.linalg.inv(self.augmented)[:2])

    def as_row(self) -> list[float]:
        """Row-major 6-element list, the manifest serialization."""
        return [float(v) for v in self.theta.reshape(-1)]

    @classmethod
    def from_row(cls, row) -> "AffineTransform":
        vals = [float(v) for v in row]
        if len(vals) != 6:
            raise ValueError(f"affine row must have 6 entries, got {len(vals)}")
        return cls(np.array(vals).reshape(2, 3))


def _norm_axis_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def _target_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    x = _norm_axis_coords(w)
    y = _norm_axis_coords(h)
    return np.meshgrid(x, y)


def _snap(v: np.ndarray) -> np.ndarray:
    # Round-trip through normalized coordinates perturbs integer pixel
    # positions by an ulp; snap them back so pure index permutations (and
    # the identity) sample exactly.
    nearest = np.round(v)
    return np.where(np.abs(v - nearest) < 1e-9, nearest, v)


def _source_pixels(t: AffineTransform, h: int, w: int):
    xt, yt = _target_grid(h, w)
    th = t.theta
    xs = th[0, 0] * xt + th[0, 1] * yt + th[0, 2]
    ys = th[1, 0] * xt + th[1, 1] * yt + th[1, 2]
    cols = _snap((xs + 1.0) * (w - 1) / 2.0)
    rows = _snap((ys + 1.0) * (h - 1) / 2.0)
    return rows, cols, xt, yt


def _gather(data: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    # Out-of-bounds corners contribute zero (zero padding).
    h, w = data.shape[1], data.shape[2]
    valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    rc = np.clip(r, 0, h - 1)
    cc = np.clip(c, 0, w - 1)
    return data[:, rc, cc] * valid


def _warp_array(data: np.ndarray, t: AffineTransform) -> np.ndarray:
    h, w = data.shape[1], data.shape[2]
    rows, cols, _, _ = _source_pixels(t, h, w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    tr = rows - r0
    tc = cols - c0
    top = _gather(data, r0, c0) * (1 - tc) + _gather(data, r0, c0 + 1) * tc
    bot = _gather(data, r0 + 1, c0) * (1 - tc) + _gather(data, r0 + 1, c0 + 1) * tc
    return top * (1 - tr) + bot * tr


def affine_warp(fmap: FeatureMap, t: AffineTransform) -> FeatureMap:
    """Warp a feature map by sampling source positions ``theta @ (x, y, 1)``.

    Bilinear sampling with zero padding: source positions outside the grid
    contribute zero. The identity transform reproduces the input exactly.
    """
    return FeatureMap.from_array(_warp_array(fmap.data, t))


def warp_gradient_theta(fmap: FeatureMap, t: AffineTransform) -> np.ndarray:
    """Partial derivatives of every warped value w.r.t. the six parameters.

    Returns a (C, H, W, 6) array ordered row-major over theta. The bilinear
    kernel is piecewise linear; exactly on integer grid lines the right-sided
    subgradient is returned (the floor cell is used).
    """
    data = fmap.data
    h, w = data.shape[1], data.shape[2]
    rows, cols, xt, yt = _source_pixels(t, h, w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    tr = rows - r0
    tc = cols - c0

    g00 = _gather(data, r0, c0)
    g01 = _gather(data, r0, c0 + 1)
    g10 = _gather(data, r0 + 1, c0)
    g11 = _gather(data, r0 + 1, c0 + 1)

    dval_dc = (g01 - g00) * (1 - tr) + (g11 - g10) * tr
    dval_dr = (g10 - g00) * (1 - tc) + (g11 - g01) * tc

    # Pixel coordinates scale linearly with the normalized source coords.
    dval_dxs = dval_dc * ((w - 1) / 2.0)
    dval_dys = dval_dr * ((h - 1) / 2.0)

    zeros = np.zeros_like(xt)
    ones = np.ones_like(xt)
    dxs = np.stack([xt, yt, ones, zeros, zeros, zeros], axis=-1)
    dys = np.stack([zeros, zeros, zeros, xt, yt, ones], axis=-1)
    return dval_dxs[..., None] * dxs[None] + dval_dys[..., None] * dys[None]


def _as_field(v) -> np.ndarray:
    if isinstance(v, FeatureMap):
        return v.data
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"vector field must be (C, H, W), got shape {arr.shape}")
    return arr


def _mean_negative_cosine(p: np.ndarray, z: np.ndarray, strict: bool) -> float:
    # Non-strict mode skips zero-norm positions (warped-in padding) and
    # averages over the rest, so alignment quality is not diluted by borders.
    if p.shape != z.shape:
        raise ValueError(f"field shapes differ: {p.shape} vs {z.shape}")
    pn = np.linalg.norm(p, axis=0)
    zn = np.linalg.norm(z, axis=0)
    valid = (pn > 0) & (zn > 0)
    if strict and not valid.all():
        raise ValueError("degenerate feature")
    if not valid.any():
        return 0.0
    cos = np.zeros_like(pn)
    np.divide((p * z).sum(axis=0), pn * zn, out=cos, where=valid)
    return float(-cos.sum() / valid.sum())


def cosine_similarity_loss(p, z) -> float:
    """Mean over spatial positions of the negative cosine similarity.

    Each position's vectors are normalized independently, then the scores are
    averaged; the result lies in [-1, 1]. Raises on an all-zero vector at any
    position.
    """
    return _mean_negative_cosine(_as_field(p), _as_field(z), strict=True)


def accumulate_reference(refs: list[FeatureMap]) -> FeatureMap:
    """Elementwise arithmetic mean of identically shaped feature maps."""
    if not refs:
        raise ValueError("need at least one reference map")
    shape = refs[0].shape
    for r in refs[1:]:
        if r.shape != shape:
            raise ValueError(f"reference shape mismatch: {r.shape} vs {shape}")
    return FeatureMap.from_array(np.mean([r.data for r in refs], axis=0))


@dataclass(frozen=True)
class RegistrationHead:
    """Per-position linear encoder and predictor applied channelwise.

    ``identity`` mode passes features through unchanged. ``fixed-random``
    builds seeded Gaussian matrices for a fixed channel count; it exists to
    exercise the asymmetric loss, not to be trained.
    """

    mode: str = "identity"
    channels: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("identity", "fixed-random"):
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.mode == "fixed-random" and self.channels is None:
            raise ValueError("fixed-random head needs a channel count")

    def _matrices(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.channels
        rng = np.random.default_rng(self.seed)
        enc = rng.standard_normal((c, c)) / math.sqrt(c)
        pred = rng.standard_normal((c, c)) / math.sqrt(c)
        return enc, pred

    def _check(self, arr: np.ndarray):
        if self.mode == "fixed-random" and arr.shape[0] != self.channels:
            raise ValueError(
                f"head built for {self.channels} channels, got {arr.shape[0]}")

    def encode(self, arr: np.ndarray) -> np.ndarray:
        self._check(arr)
        if self.mode == "identity":
            return arr
        enc, _ = self._matrices()
        return np.einsum("ab,bhw->ahw", enc, arr)

    def predict(self, arr: np.ndarray) -> np.ndarray:
        self._check(arr)
        if self.mode == "identity":
            return arr
        _, pred = self._matrices()
        return np.einsum("ab,bhw->ahw", pred, arr)

    def combined_matrix(self, channels: int) -> np.ndarray:
        """Predictor-after-encoder as one matrix, for gradient chaining."""
        if self.mode == "identity":
            return np.eye(channels)
        enc, pred = self._matrices()
        return pred @ enc


def _symmetrized_terms(fa: np.ndarray, refs: list[np.ndarray],
                       head: RegistrationHead):
    enc_refs = [head.encode(r) for r in refs]
    z_mean = np.mean(enc_refs, axis=0)
    p_mean = np.mean([head.predict(e) for e in enc_refs], axis=0)
    p_a = head.predict(head.encode(fa))
    z_a = head.encode(fa)
    return p_a, z_mean, p_mean, z_a


def symmetrized_registration_loss(fa: FeatureMap, fB: list[FeatureMap],
                                  head: RegistrationHead) -> float:
    """Average of the two cross-prediction cosine losses.

    One branch predicts the accumulated reference encoding; the other
    predicts the moving image's encoding from the references. The branch
    being predicted is treated as a constant by gradient consumers.
    """
    if not fB:
        raise ValueError("need at least one reference map")
    refs = [_as_field(r) for r in fB]
    fa_arr = _as_field(fa)
    for r in refs:
        if r.shape != fa_arr.shape:
            raise ValueError(f"reference shape mismatch: {r.shape} vs {fa_arr.shape}")
    p_a, z_mean, p_mean, z_a = _symmetrized_terms(fa_arr, refs, head)
    return 0.5 * (_mean_negative_cosine(p_a, z_mean, strict=True)
                  + _mean_negative_cosine(p_mean, z_a, strict=True))


@dataclass(frozen=True)
class RegistrationConfig:
    learning_rate: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    grad_mode: str = "analytic"  # or "finite-difference"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.grad_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


def _grad_mean_negative_cosine(p: np.ndarray, z: np.ndarray) -> np.ndarray:
    # d/dp of the masked mean negative cosine; zero rows at invalid positions.
    pn = np.linalg.norm(p, axis=0)
    zn = np.linalg.norm(z, axis=0)
    valid = (pn > 0) & (zn > 0)
    n = int(valid.sum())
    if n == 0:
        return np.zeros_like(p)
    safe_pn = np.where(valid, pn, 1.0)
    safe_zn = np.where(valid, zn, 1.0)
    p_hat = p / safe_pn
    z_hat = z / safe_zn
    cos = (p_hat * z_hat).sum(axis=0)
    grad = -(z_hat - cos * p_hat) / safe_pn / n
    return grad * valid


def register_affine(moving: FeatureMap, refs: list[FeatureMap],
                    head: RegistrationHead, cfg: RegistrationConfig,
                    ) -> tuple[AffineTransform, float]:
    """Gradient descent on the warp parameters, starting from identity.

    Minimizes the symmetrized loss of the warped moving map against the
    references; gradients flow only through the predicted branch. Border
    positions zeroed out by the warp are skipped in the cosine averages
    instead of raising, since any non-trivial warp creates them. A step that
    would increase the loss is retried with a halved step size, up to 20
    halvings, so the loss is non-increasing across accepted steps.
    """
    if not refs:
        raise ValueError("need at least one reference map")
    for r in refs:
        if r.shape != moving.shape:
            raise ValueError(f"reference shape mismatch: {r.shape} vs {moving.shape}")

    ref_arrays = [r.data for r in refs]
    enc_refs = [head.encode(r) for r in ref_arrays]
    z_mean = np.mean(enc_refs, axis=0)
    p_mean = np.mean([head.predict(e) for e in enc_refs], axis=0)
    mat = head.combined_matrix(moving.channels)

    def loss_at(theta: np.ndarray) -> float:
        warped = _warp_array(moving.data, AffineTransform(theta))
        p_a = np.einsum("ab,bhw->ahw", mat, warped)
        z_a = head.encode(warped)
        return 0.5 * (_mean_negative_cosine(p_a, z_mean, strict=False)
                      + _mean_negative_cosine(p_mean, z_a, strict=False))

    def gradient_at(theta: np.ndarray) -> np.ndarray:
        t = AffineTransform(theta)
        if cfg.grad_mode == "finite-difference":
            # Differentiates only the predicted branch, holding the
            # constant-marked reference terms fixed.
            h = 1e-5
            g = np.zeros(6)
            for k in range(6):
                for sign in (1.0, -1.0):
                    pert = theta.copy().reshape(-1)
                    pert[k] += sign * h
                    warped = _warp_array(moving.data,
                                         AffineTransform(pert.reshape(2, 3)))
                    p_a = np.einsum("ab,bhw->ahw", mat, warped)
                    g[k] += sign * _mean_negative_cosine(p_a, z_mean, strict=False)
            return 0.5 * g / (2 * h)
        warped = _warp_array(moving.data, t)
        p_a = np.einsum("ab,bhw->ahw", mat, warped)
        dldp = _grad_mean_negative_cosine(p_a, z_mean)
        grad_w = np.einsum("ab,ahw->bhw", mat, dldp)
        wgrad = warp_gradient_theta(moving, t)
        return 0.5 * np.einsum("chw,chwk->k", grad_w, wgrad)

    theta = AffineTransform.identity().theta.copy()
    loss = loss_at(theta)
    if math.isnan(loss):
        raise RuntimeError("registration diverged")
    lr = cfg.learning_rate

    for _ in range(cfg.max_iters):
        grad = gradient_at(theta).reshape(2, 3)
        accepted = False
        for _ in range(21):
            cand = theta - lr * grad
            cand_loss = loss_at(cand)
            if math.isnan(cand_loss):
                raise RuntimeError("registration diverged")
            if cand_loss <= loss:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        improvement = loss - cand_loss
        theta, loss = cand, cand_loss
        lr = min(lr * 2.0, cfg.learning_rate)
        if improvement < cfg.tol:
            break

    return AffineTransform(theta), loss


def inverse_remap(grid: np.ndarray, transforms: list[AffineTransform],
                  out_h: int, out_w: int) -> np.ndarray:
    """Undo a chain of warps on a score grid and resize to the output shape.

    The inverses are composed in reverse application order and applied as a
    single warp. Positions with no valid source are filled with the grid's
    minimum score.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"score grid must be 2-D, got shape {grid.shape}")
    combined = AffineTransform.identity()
    for t in transforms:
        combined = combined.compose(t)
    if transforms:
        inv = combined.invert()
        floor = float(grid.min())
        shifted = FeatureMap.from_array((grid - floor)[None])
        remapped = affine_warp(shifted, inv).data[0] + floor
    else:
        remapped = grid
    out = resize_bilinear(FeatureMap.from_array(remapped[None]), out_h, out_w)
    return out.data[0]
