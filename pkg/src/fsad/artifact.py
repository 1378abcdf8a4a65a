"""Serialization of fitted models to a single binary artifact plus sidecar.

Layout: magic "CADN", version u8, estimator tag u8 (1 Gaussian field,
2 low-rank field, 3 memory bank), u8 dimension count, that many u32-LE dims,
then the payload arrays as f32-LE in documented order. A JSON sidecar at
``<path>.json`` carries the scalar hyperparameters and seeds.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .estimators import GaussianField, LowRankProjection, MemoryBank

MAGIC = b"CADN"
VERSION = 1

_TAGS = {"padim": 1, "ortho": 2, "patchcore": 3}
_NAMES = {v: k for k, v in _TAGS.items()}

_PREFIX = struct.Struct("<4sBBB")


def estimator_name(model) -> str:
    if isinstance(model, MemoryBank):
        return "patchcore"
    if isinstance(model, GaussianField):
        return "ortho" if model.projection is not None else "padim"
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _pack(dims: tuple[int, ...], arrays: list[np.ndarray], tag: int) -> bytes:
    parts = [_PREFIX.pack(MAGIC, VERSION, tag, len(dims))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    return b"".join(parts)


def save_model(path: str | Path, model, extra: dict | None = None) -> None:
    """Write the binary artifact and its JSON sidecar."""
    path = Path(path)
    kind = estimator_name(model)
    sidecar: dict = {"estimator": kind, "format_version": VERSION}
    if isinstance(model, MemoryBank):
        n, d = model.items.shape
        blob = _pack((n, d), [model.items], _TAGS[kind])
        sidecar.update(gamma=model.gamma, projection_dim=model.projection_dim,
                       coreset_seed=model.seed)
    elif model.projection is not None:
        proj = model.projection
        blob = _pack((model.grid_h, model.grid_w, proj.full_dim, proj.reduced_dim),
                     [proj.matrix, model.mean, model.cov], _TAGS[kind])
        sidecar.update(epsilon=model.epsilon, d_prime=proj.reduced_dim,
                       projection_seed=proj.seed)
    else:
        blob = _pack((model.grid_h, model.grid_w, model.dim),
                     [model.mean, model.cov], _TAGS[kind])
        sidecar.update(epsilon=model.epsilon)
    if extra:
        sidecar.update(extra)
    path.write_bytes(blob)
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def _take(raw: bytes, offset: int, shape: tuple[int, ...], path: Path):
    count = int(np.prod(shape))
    end = offset + 4 * count
    if end > len(raw):
        raise ValueError(f"{path}: artifact truncated")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return arr.astype(np.float64).reshape(shape), end


def load_model(path: str | Path):
    """Read an artifact back; returns (model, sidecar dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: truncated artifact")
    magic, version, tag, ndims = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if tag not in _NAMES:
        raise ValueError(f"{path}: unknown estimator tag {tag}")
    offset = _PREFIX.size
    dims = struct.unpack_from(f"<{ndims}I", raw, offset)
    offset += 4 * ndims

    sidecar_path = Path(str(path) + ".json")
    sidecar = {}
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())

    kind = _NAMES[tag]
    if kind == "patchcore":
        n, d = dims
        items, offset = _take(raw, offset, (n, d), path)
        model = MemoryBank(items=items,
                           gamma=float(sidecar.get("gamma", 1.0)),
                           projection_dim=int(sidecar.get("projection_dim", 128)),
                           seed=int(sidecar.get("coreset_seed", 0)))
    elif kind == "ortho":
        h, w, d, dp = dims
        mat, offset = _take(raw, offset, (d, dp), path)
        mean, offset = _take(raw, offset, (h, w, dp), path)
        cov, offset = _take(raw, offset, (h, w, dp, dp), path)
        proj = LowRankProjection(matrix=mat,
                                 seed=int(sidecar.get("projection_seed", 0)))
        model = GaussianField(mean=mean, cov=cov,
                              epsilon=float(sidecar.get("epsilon", 0.0)),
                              projection=proj)
    else:
        h, w, d = dims
        mean, offset = _take(raw, offset, (h, w, d), path)
        cov, offset = _take(raw, offset, (h, w, d, d), path)
        model = GaussianField(mean=mean, cov=cov,
                              epsilon=float(sidecar.get("epsilon", 0.0)))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, sidecar
