"""Seeded image augmentation operators for expanding a support set.

Ten operators are available. Their random parameters are drawn from a
generator derived deterministically from the job seed, the image id, and the
operator id, so re-running an export reproduces every augmented image
bit for bit while different images still receive different draws.

Parameter ranges are implementation choices, documented here and in the
package README: rotations draw from +/-45 degrees (large) and +/-10 degrees
(small); translations from +/-20% (large) and +/-5% (small) of the image
side; brightness factors from [0.7, 1.3]; blur radii from [0.5, 2.0] pixels;
center-crop keeps a central square of 80% to 95% of the side and resizes
back; mixup blends with another image of the job at a weight from
[0.3, 0.7]. Mixup can synthesize anomaly-like content, so callers exclude it
unless explicitly enabled.
"""

from __future__ import annotations

import zlib

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter

AUGMENTATION_IDS = (
    "graying",
    "flip",
    "rotation-large",
    "rotation-small",
    "translation-large",
    "translation-small",
    "brightness",
    "gaussian-blur",
    "center-crop",
    "mixup",
)

# Mixup stays opt-in; everything else is a default candidate.
DEFAULT_AUGMENTATIONS = tuple(a for a in AUGMENTATION_IDS if a != "mixup")

ROTATION_DEGREES = {"rotation-large": 45.0, "rotation-small": 10.0}
TRANSLATION_FRACTION = {"translation-large": 0.20, "translation-small": 0.05}
BRIGHTNESS_RANGE = (0.7, 1.3)
BLUR_RADIUS_RANGE = (0.5, 2.0)
CROP_FRACTION_RANGE = (0.80, 0.95)
MIXUP_WEIGHT_RANGE = (0.3, 0.7)


def rng_for(seed: int, image_id: str, augmentation_id: str) -> np.random.Generator:
    """Generator keyed to (seed, image, operator), stable across runs."""
    entropy = [int(seed), zlib.crc32(image_id.encode()),
               zlib.crc32(augmentation_id.encode())]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _translate(image: Image.Image, dx: float, dy: float) -> Image.Image:
    # The affine 6-tuple maps output to input coordinates, hence the sign.
    return image.transform(image.size, Image.Transform.AFFINE,
                           (1.0, 0.0, -dx, 0.0, 1.0, -dy),
                           resample=Image.Resampling.BILINEAR)


def _center_crop(image: Image.Image, fraction: float) -> Image.Image:
    w, h = image.size
    cw, ch = max(1, round(w * fraction)), max(1, round(h * fraction))
    left = (w - cw) // 2
    top = (h - ch) // 2
    box = (left, top, left + cw, top + ch)
    return image.crop(box).resize((w, h), Image.Resampling.BILINEAR)


def _mixup(image: Image.Image, rng: np.random.Generator,
           partners: list[Image.Image]) -> Image.Image:
    if not partners:
        raise ValueError("mixup needs at least two images in the job")
    partner = partners[int(rng.integers(len(partners)))]
    lam = rng.uniform(*MIXUP_WEIGHT_RANGE)
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(partner, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("mixup partners must share the image shape")
    mixed = np.clip(np.rint(lam * a + (1.0 - lam) * b), 0, 255)
    return Image.fromarray(mixed.astype(np.uint8))


def apply_augmentation(image: Image.Image, augmentation_id: str,
                       rng: np.random.Generator,
                       partners: list[Image.Image] | None = None) -> Image.Image:
    """Apply one operator to an RGB image, drawing parameters from ``rng``.

    ``"identity"`` returns the input unchanged. ``partners`` is only
    consulted by mixup and must hold the other images of the job, already
    at the same size.
    """
    if augmentation_id == "identity":
        return image
    if augmentation_id == "graying":
        return image.convert("L").convert("RGB")
    if augmentation_id == "flip":
        # One operator covering both axes; the axis is part of the draw.
        if rng.random() < 0.5:
            return image.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
        return image.transpose(Image.Transpose.FLIP_TOP_BOTTOM)
    if augmentation_id in ROTATION_DEGREES:
        bound = ROTATION_DEGREES[augmentation_id]
        angle = rng.uniform(-bound, bound)
        return image.rotate(angle, resample=Image.Resampling.BILINEAR)
    if augmentation_id in TRANSLATION_FRACTION:
        bound = TRANSLATION_FRACTION[augmentation_id]
        w, h = image.size
        return _translate(image, rng.uniform(-bound, bound) * w,
                          rng.uniform(-bound, bound) * h)
    if augmentation_id == "brightness":
        factor = rng.uniform(*BRIGHTNESS_RANGE)
        return ImageEnhance.Brightness(image).enhance(factor)
    if augmentation_id == "gaussian-blur":
        radius = rng.uniform(*BLUR_RADIUS_RANGE)
        return image.filter(ImageFilter.GaussianBlur(radius))
    if augmentation_id == "center-crop":
        return _center_crop(image, rng.uniform(*CROP_FRACTION_RANGE))
    if augmentation_id == "mixup":
        return _mixup(image, rng, partners or [])
    raise ValueError(f"unknown augmentation '{augmentation_id}'")
