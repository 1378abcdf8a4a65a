"""Command-line front end: export images to feature files and a manifest."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .augment import AUGMENTATION_IDS, DEFAULT_AUGMENTATIONS
from .export import ExportJob, discover_images, run_export

log = logging.getLogger("featx")


def _parse_augmentations(spec: str | None, role: str,
                         allow_mixup: bool) -> tuple[str, ...]:
    if spec is None:
        return DEFAULT_AUGMENTATIONS if role == "support" else ()
    if spec.strip().lower() in ("", "none"):
        return ()
    ids = tuple(a.strip() for a in spec.split(",") if a.strip())
    for aug in ids:
        if aug == "identity":
            raise ValueError("identity is always exported; do not list it")
        if aug not in AUGMENTATION_IDS:
            raise ValueError(f"unknown augmentation '{aug}'")
    if "mixup" in ids and not allow_mixup:
        raise ValueError(
            "mixup can simulate anomalies and is excluded by default; "
            "pass --allow-mixup to enable it")
    if role != "support" and ids:
        raise ValueError("augmentations apply to support images only")
    return ids


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featx",
        description="Export convolutional features to binary feature files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="extract features for one image set")
    p.add_argument("--images", type=Path, required=True,
                   help="directory of images, optionally in labeled subdirs")
    p.add_argument("--role", choices=("support", "test"), required=True)
    p.add_argument("--augs",
                   help="comma-separated augmentation ids, or 'none'; "
                        "defaults to all non-mixup augmentations for the "
                        "support role")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True,
                   help="output directory for feature files and manifest.json")
    p.add_argument("--backbone", choices=("resnet18", "random"),
                   default="resnet18")
    p.add_argument("--weights", type=Path,
                   help="local state-dict file for the resnet18 backbone")
    p.add_argument("--allow-mixup", action="store_true")
    p.set_defaults(fn=cmd_export)
    return parser


def cmd_export(args) -> int:
    augmentations = _parse_augmentations(args.augs, args.role,
                                         args.allow_mixup)
    items = discover_images(args.images, args.role)
    job = ExportJob(items=items, out_dir=args.out, backbone=args.backbone,
                    augmentations=augmentations, seed=args.seed,
                    weights_path=args.weights)
    result = run_export(job)
    for message in result.errors:
        print(f"error: {message}", file=sys.stderr)
    log.info("wrote %d manifest rows to %s", len(result.rows), args.out)
    return 1 if result.errors else 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FEATX_LOG_LEVEL", "WARNING"))
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface every failure as a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
