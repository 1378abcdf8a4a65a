"""Binary feature-file format and the JSON manifest shared with the exporter."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .features import FeatureMap

MAGIC = b"CARG"
VERSION = 1

_HEADER = struct.Struct("<4sB3sIII")


def write_feature_file(path: str | Path, fmap: FeatureMap) -> None:
    """Write a feature map as magic, version, dims, then f32-LE values."""
    payload = fmap.data.astype("<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, b"\x00\x00\x00",
                          fmap.channels, fmap.height, fmap.width)
    Path(path).write_bytes(header + payload)


def read_feature_file(path: str | Path) -> FeatureMap:
    """Read and validate a feature file, naming the file in any error."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, version, _, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return FeatureMap(channels=c, height=h, width=w, data=data)


@dataclass
class ManifestEntry:
    """One image at one augmentation, with its per-scale feature files."""

    image_id: str
    role: str  # "support" | "test"
    label: int  # 0 normal, 1 anomalous
    augmentation_id: str = "identity"
    scale_files: list[str] = dc_field(default_factory=list)
    pixel_mask_file: str | None = None
    thetas: list[list[float]] | None = None  # affine rows, 6 floats each

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "role": self.role,
            "label": self.label,
            "augmentation_id": self.augmentation_id,
            "scale_files": list(self.scale_files),
        }
        if self.pixel_mask_file is not None:
            out["pixel_mask_file"] = self.pixel_mask_file
        if self.thetas is not None:
            out["thetas"] = [list(map(float, t)) for t in self.thetas]
        return out


@dataclass
class Manifest:
    """Collection of manifest entries plus the directory they resolve against."""

    entries: list[ManifestEntry]
    root: Path

    def support(self, augmentation_ids: set[str] | None = None) -> list[ManifestEntry]:
        """Support entries, optionally restricted to a set of augmentation ids."""
        out = [e for e in self.entries if e.role == "support"]
        if augmentation_ids is not None:
            out = [e for e in out if e.augmentation_id in augmentation_ids]
        return out

    def test(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == "test"]

    def augmentation_ids(self) -> list[str]:
        """Distinct non-identity augmentation ids among support entries, in order."""
        seen: list[str] = []
        for e in self.entries:
            if e.role == "support" and e.augmentation_id != "identity":
                if e.augmentation_id not in seen:
                    seen.append(e.augmentation_id)
        return seen

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_entry_features(self, entry: ManifestEntry) -> list[FeatureMap]:
        return [read_feature_file(self.resolve(f)) for f in entry.scale_files]


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise ValueError(f"{path}: manifest must be an object with an 'images' list")
    entries = []
    for idx, row in enumerate(doc["images"]):
        ctx = f"{path}: images[{idx}]"
        for key in ("image_id", "role", "label", "scale_files"):
            if key not in row:
                raise ValueError(f"{ctx}: missing field '{key}'")
        if row["role"] not in ("support", "test"):
            raise ValueError(f"{ctx}: role must be 'support' or 'test'")
        if row["label"] not in (0, 1):
            raise ValueError(f"{ctx}: label must be 0 or 1")
        if not row["scale_files"]:
            raise ValueError(f"{ctx}: scale_files must be non-empty")
        entries.append(ManifestEntry(
            image_id=str(row["image_id"]),
            role=row["role"],
            label=int(row["label"]),
            augmentation_id=str(row.get("augmentation_id", "identity")),
            scale_files=[str(f) for f in row["scale_files"]],
            pixel_mask_file=row.get("pixel_mask_file"),
            thetas=row.get("thetas"),
        ))
    return Manifest(entries=entries, root=path.parent)


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    doc = {"images": [e.to_json() for e in manifest.entries]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
