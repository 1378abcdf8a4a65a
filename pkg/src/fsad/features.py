"""Dense feature tensors, bilinear resizing, and multi-scale aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FeatureMap:
    """A C x H x W tensor of real-valued features for one image at one scale.

    Data is stored channel-major, then row-major within each channel. Values
    are immutable after construction; every operation returns a new map.
    """

    channels: int
    height: int
    width: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ValueError("empty feature map")
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.size != self.channels * self.height * self.width:
            raise ValueError(
                f"data length {arr.size} != C*H*W = "
                f"{self.channels * self.height * self.width}"
            )
        arr = arr.reshape(self.channels, self.height, self.width)
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FeatureMap":
        """Build from a (C, H, W) array."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"expected a (C, H, W) array, got shape {arr.shape}")
        c, h, w = arr.shape
        return cls(channels=c, height=h, width=w, data=arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


def _axis_source_positions(target_n: int, source_n: int) -> np.ndarray:
    # Align-corners mapping: output index 0 falls on source sample 0 and
    # output index target_n-1 on source sample source_n-1.
    if target_n == 1:
        return np.zeros(1)
    return np.arange(target_n) * ((source_n - 1) / (target_n - 1))


def resize_bilinear(fmap: FeatureMap, target_h: int, target_w: int) -> FeatureMap:
    """Resize each channel independently with align-corners bilinear sampling.

    Normalized coordinate -1 maps to the center of the first sample and +1
    to the center of the last, so resizing to the source size is the exact
    identity and constants are preserved.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    if target_h == fmap.height and target_w == fmap.width:
        return fmap

    rows = _axis_source_positions(target_h, fmap.height)
    cols = _axis_source_positions(target_w, fmap.width)

    r0 = np.clip(np.floor(rows).astype(int), 0, fmap.height - 1)
    r1 = np.minimum(r0 + 1, fmap.height - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, fmap.width - 1)
    c1 = np.minimum(c0 + 1, fmap.width - 1)
    tr = (rows - r0)[:, None]
    tc = (cols - c0)[None, :]

    d = fmap.data
    top = d[:, r0, :][:, :, c0] * (1 - tc) + d[:, r0, :][:, :, c1] * tc
    bot = d[:, r1, :][:, :, c0] * (1 - tc) + d[:, r1, :][:, :, c1] * tc
    out = top * (1 - tr) + bot * tr
    return FeatureMap.from_array(out)


def aggregate_multiscale(maps: list[FeatureMap]) -> np.ndarray:
    """Concatenate per-position feature vectors across scales.

    Every map is resized to the spatial size of the first (finest) map, then
    channels are concatenated in input order. Returns an (H, W, D) array with
    D equal to the sum of the input channel counts.
    """
    if not maps:
        raise ValueError("aggregate_multiscale needs at least one feature map")
    h, w = maps[0].height, maps[0].width
    resized = [resize_bilinear(m, h, w) for m in maps]
    for m in resized:
        if m.height != h or m.width != w:
            raise AssertionError("scale resize produced a mismatched grid")
    stacked = np.concatenate([m.data for m in resized], axis=0)
    return np.ascontiguousarray(np.moveaxis(stacked, 0, 2))


@dataclass(frozen=True)
class PatchFeatureSet:
    """Registered patch feature vectors for K samples on a W x H grid.

    Vectors are stored as a (K, H, W, D) array; ``vector(k, i, j)`` indexes
    sample k at column i, row j.
    """

    dim: int
    grid_w: int
    grid_h: int
    samples: int
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        expected = (self.samples, self.grid_h, self.grid_w, self.dim)
        if arr.shape != expected:
            raise ValueError(f"vectors shape {arr.shape} != {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("patch features contain non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "vectors", arr)

    @classmethod
    def from_multiscale(cls, per_sample_maps: list[list[FeatureMap]]) -> "PatchFeatureSet":
        """Aggregate one list of multi-scale maps per sample slot."""
        if not per_sample_maps:
            raise ValueError("need at least one sample")
        aggregated = [aggregate_multiscale(maps) for maps in per_sample_maps]
        ref = aggregated[0].shape
        for a in aggregated[1:]:
            if a.shape != ref:
                raise ValueError("samples disagree on grid size or feature dim")
        arr = np.stack(aggregated, axis=0)
        k, h, w, d = arr.shape
        return cls(dim=d, grid_w=w, grid_h=h, samples=k, vectors=arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PatchFeatureSet":
        """Build from a (K, H, W, D) array."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"expected a (K, H, W, D) array, got shape {arr.shape}")
        k, h, w, d = arr.shape
        return cls(dim=d, grid_w=w, grid_h=h, samples=k, vectors=arr)

    def vector(self, k: int, i: int, j: int) -> np.ndarray:
        """Feature vector of sample k at grid column i, row j."""
        return self.vectors[k, j, i]
