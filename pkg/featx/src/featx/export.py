"""Export jobs: discover images, extract features, write files and manifest.

A job walks an image directory, resizes every image to the backbone input
size, applies the selected augmentations to support images, and writes three
feature files per image and augmentation plus one ``manifest.json``
describing them all. The file set is a pure function of the job and its
seed. Unreadable images and failing augmentations are reported per file and
skipped; they never abort the rest of the job.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .augment import apply_augmentation, rng_for
from .backbone import INPUT_SIZE, build_backbone
from .cargio import write_feature_file

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# Test-image subdirectories whose contents count as normal.
NORMAL_DIR_NAMES = ("good", "normal", "ok")


@dataclass(frozen=True)
class ImageItem:
    """One input image with its manifest identity."""

    image_id: str
    path: Path
    role: str  # "support" | "test"
    label: int  # 0 normal, 1 anomalous


@dataclass
class ExportJob:
    """Everything that determines an export's output file set."""

    items: list[ImageItem]
    out_dir: Path
    backbone: str = "resnet18"
    augmentations: tuple[str, ...] = ()
    seed: int = 0
    weights_path: Path | None = None


@dataclass
class ExportResult:
    rows: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)


def discover_images(directory: str | Path, role: str) -> list[ImageItem]:
    """List images directly in ``directory`` or one subdirectory below it.

    Flat files are labeled normal. For the test role, a subdirectory names
    the condition: ``good``/``normal``/``ok`` mean label 0, anything else
    label 1. Support images are normal by definition, whatever the layout.
    """
    directory = Path(directory)
    if role not in ("support", "test"):
        raise ValueError("role must be 'support' or 'test'")
    if not directory.is_dir():
        raise ValueError(f"{directory}: not a directory")
    items = []
    for path in sorted(directory.rglob("*")):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = path.relative_to(directory)
        if len(rel.parts) > 2:
            continue  # one subdirectory level at most
        image_id = "_".join(rel.parts)[: -len(path.suffix)]
        label = 0
        if role == "test" and len(rel.parts) == 2:
            label = 0 if rel.parts[0].lower() in NORMAL_DIR_NAMES else 1
        items.append(ImageItem(image_id=image_id, path=path, role=role,
                               label=label))
    if not items:
        raise ValueError(f"{directory}: no images found")
    return items


def _load_resized(path: Path) -> Image.Image:
    with Image.open(path) as img:
        return img.convert("RGB").resize((INPUT_SIZE, INPUT_SIZE),
                                         Image.Resampling.BILINEAR)


def run_export(job: ExportJob) -> ExportResult:
    """Execute one job, writing feature files and the manifest.

    Returns:
        The manifest rows written plus one message per skipped file. The
        manifest is written even when some images fail, covering the rest.

    Raises:
        ValueError: for job-level failures (unknown or weightless backbone).
    """
    extractor = build_backbone(job.backbone, job.seed, job.weights_path)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = ExportResult()
    loaded: dict[str, Image.Image] = {}
    for item in sorted(job.items, key=lambda it: it.image_id):
        try:
            loaded[item.image_id] = _load_resized(item.path)
        except Exception as exc:
            result.errors.append(f"{item.path}: {exc}")

    for item in sorted(job.items, key=lambda it: it.image_id):
        if item.image_id not in loaded:
            continue
        image = loaded[item.image_id]
        partners = [img for key, img in sorted(loaded.items())
                    if key != item.image_id]
        augmentations = ("identity",)
        if item.role == "support":
            augmentations += tuple(job.augmentations)
        for aug in augmentations:
            rng = rng_for(job.seed, item.image_id, aug)
            try:
                augmented = apply_augmentation(image, aug, rng, partners)
                maps = extractor.extract(augmented)
            except Exception as exc:
                result.errors.append(f"{item.path} [{aug}]: {exc}")
                continue
            names = [f"{item.image_id}__{aug}__s{k + 1}.carg"
                     for k in range(len(maps))]
            for name, fmap in zip(names, maps):
                write_feature_file(out_dir / name, fmap)
            result.rows.append({
                "image_id": item.image_id,
                "role": item.role,
                "label": item.label,
                "augmentation_id": aug,
                "scale_files": names,
            })

    doc = {"images": result.rows}
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return result
