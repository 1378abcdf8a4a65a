"""Seeded synthetic fixtures: feature datasets on disk and warp test pairs.

Normal features are drawn from a fixed per-position Gaussian process; an
anomaly adds a constant mean shift inside a square block, with a matching
full-resolution mask. Everything is reproducible from the seed alone.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .featfile import Manifest, ManifestEntry, save_manifest, write_feature_file
from .features import FeatureMap
from .registration import AffineTransform, affine_warp


def smooth_map(rng: np.random.Generator, channels: int, size: int,
               sigma: float = 3.0) -> FeatureMap:
    """Spatially smooth unit-variance noise, one independent field per channel."""
    noise = rng.standard_normal((channels, size, size))
    smoothed = gaussian_filter(noise, sigma=(0, sigma, sigma))
    smoothed /= smoothed.std(axis=(1, 2), keepdims=True)
    return FeatureMap.from_array(smoothed)


def make_rotation_fixture(seed: int, angle_degrees: float, channels: int = 4,
                          size: int = 32) -> tuple[FeatureMap, FeatureMap]:
    """A smooth moving map and the reference obtained by rotating it."""
    rng = np.random.default_rng(seed)
    moving = smooth_map(rng, channels, size)
    reference = affine_warp(moving, AffineTransform.rotation(angle_degrees))
    return moving, reference


def _write_entry(root: Path, image_id: str, role: str, label: int,
                 features: np.ndarray, augmentation_id: str = "identity",
                 mask: np.ndarray | None = None) -> ManifestEntry:
    suffix = "" if augmentation_id == "identity" else f"_{augmentation_id}"
    feat_file = f"{image_id}{suffix}.carg"
    write_feature_file(root / feat_file,
                       FeatureMap.from_array(np.moveaxis(features, 2, 0)))
    mask_file = None
    if mask is not None:
        mask_file = f"mask_{image_id}.png"
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
            root / mask_file)
    return ManifestEntry(image_id=image_id, role=role, label=label,
                         augmentation_id=augmentation_id,
                         scale_files=[feat_file], pixel_mask_file=mask_file)


def generate_dataset(out_dir: str | Path, seed: int = 0, k_support: int = 8,
                     n_normal: int = 20, n_anomalous: int = 20,
                     grid: int = 16, dim: int = 6, block: int = 8,
                     shift: float = 3.0, noise_sigma: float = 1.0,
                     out_size: int = 64, include_augs: bool = False) -> Path:
    """Write a complete synthetic dataset and return the manifest path.

    Support and normal test images are mean field plus unit noise; anomalous
    test images add ``shift * noise_sigma`` to every channel inside a random
    block. Masks are emitted at ``out_size`` resolution. With
    ``include_augs``, each support image also gets a benign jittered variant
    and a harmful globally shifted one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    mean_field = gaussian_filter(rng.standard_normal((grid, grid, dim)),
                                 sigma=(2.0, 2.0, 0.0))
    mean_field *= 4.0 / mean_field.std()

    def draw():
        return mean_field + noise_sigma * rng.standard_normal(mean_field.shape)

    entries = []
    for k in range(k_support):
        feats = draw()
        entries.append(_write_entry(out_dir, f"support_{k:02d}", "support", 0,
                                    feats))
        if include_augs:
            jitter = feats + 0.1 * noise_sigma * rng.standard_normal(feats.shape)
            entries.append(_write_entry(out_dir, f"support_{k:02d}", "support",
                                        0, jitter, augmentation_id="jitter"))
            entries.append(_write_entry(out_dir, f"support_{k:02d}", "support",
                                        0, feats + 5.0 * noise_sigma,
                                        augmentation_id="shifted"))

    for i in range(n_normal):
        entries.append(_write_entry(out_dir, f"test_normal_{i:02d}", "test", 0,
                                    draw()))

    scale = out_size / grid
    for i in range(n_anomalous):
        feats = draw()
        r0, c0 = rng.integers(0, grid - block + 1, size=2)
        feats[r0:r0 + block, c0:c0 + block, :] += shift * noise_sigma
        mask = np.zeros((out_size, out_size), dtype=np.uint8)
        mask[round(r0 * scale):round((r0 + block) * scale),
             round(c0 * scale):round((c0 + block) * scale)] = 1
        entries.append(_write_entry(out_dir, f"test_anom_{i:02d}", "test", 1,
                                    feats, mask=mask))

    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, Manifest(entries=entries, root=out_dir))
    return manifest_path


def generate_registration_dataset(out_dir: str | Path, seed: int = 0,
                                  angle_degrees: float = 10.0,
                                  supports: int = 2, channels: int = 4,
                                  size: int = 32) -> Path:
    """Dataset whose single test entry is a rotated copy of the support scene."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    base = smooth_map(rng, channels, size)

    entries = []
    for k in range(supports):
        noisy = base.data + 0.02 * rng.standard_normal(base.data.shape)
        entries.append(_write_entry(out_dir, f"support_{k:02d}", "support", 0,
                                    np.moveaxis(noisy, 0, 2)))
    rotated = affine_warp(base, AffineTransform.rotation(angle_degrees))
    entries.append(_write_entry(out_dir, "test_rotated", "test", 0,
                                np.moveaxis(rotated.data, 0, 2)))

    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, Manifest(entries=entries, root=out_dir))
    return manifest_path
