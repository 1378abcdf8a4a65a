"""Command-line pipeline: fit, score, eval, select-aug, register, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .artifact import load_model, save_model
from .estimators import complexity_report
from .evaluation import report_csv, run_report
from .featfile import load_manifest, save_manifest
from .features import FeatureMap
from .pipeline import (FittedModel, PipelineConfig, check_manifest_files,
                       entry_features, fit_model, score_entry,
                       select_augmentations)
from .registration import (RegistrationConfig, RegistrationHead,
                           register_affine)
from .scoring import save_anomaly_map

log = logging.getLogger("fsad")

_CONFIG_FIELDS = list(PipelineConfig.__dataclass_fields__)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--estimator", choices=("padim", "ortho", "patchcore"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--d-prime", type=int, dest="d_prime")
    p.add_argument("--gamma", type=float)
    p.add_argument("--proj-dim", type=int, dest="proj_dim")
    p.add_argument("--b-neighbors", type=int, dest="b_neighbors")
    p.add_argument("--smooth-sigma", type=float, dest="smooth_sigma")
    p.add_argument("--seed", type=int)
    p.add_argument("--aug-mode", choices=("all", "selected", "none"),
                   dest="aug_mode")
    p.add_argument("--aug-metric", choices=("w2", "kl", "js"),
                   dest="aug_metric")
    p.add_argument("--registration", action="store_const", const=True,
                   default=None)
    p.add_argument("--out-size", type=int, dest="out_size")
    p.add_argument("--fpr-threshold", type=float, dest="fpr_threshold")
    p.add_argument("--runs", type=int)
    p.add_argument("--support-k", type=int, dest="support_k")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    doc = {}
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text())
    for name in _CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    return PipelineConfig.from_json(doc)


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_files(manifest):
    missing = check_manifest_files(manifest)
    if missing:
        listing = "\n".join(f"  missing: {p}" for p in missing)
        raise ValueError(f"manifest references absent files:\n{listing}")


def cmd_fit(args) -> int:
    cfg = build_config(args)
    manifest = load_manifest(args.manifest)
    _require_files(manifest)
    t0 = time.perf_counter()
    fitted = fit_model(cfg, manifest)
    fit_seconds = time.perf_counter() - t0

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"support_score_max": fitted.support_score_max,
             "support_ids": fitted.support_ids,
             "kept_augmentations": fitted.kept_augmentations,
             "registration": cfg.registration}
    save_model(out, fitted.model, extra=extra)

    report = {"config": cfg.to_json(),
              "estimator": cfg.estimator,
              "support_ids": fitted.support_ids,
              "kept_augmentations": fitted.kept_augmentations,
              "support_score_max": fitted.support_score_max,
              "grid": [fitted.fit_grid_h, fitted.fit_grid_w],
              "samples": fitted.fit_samples,
              "dim": fitted.fit_dim}
    if fitted.aug_report is not None:
        report["augmentation_selection"] = fitted.aug_report.to_json()
    _write_json(Path(str(out) + ".fit.json"), report)
    _write_json(Path(str(out) + ".timing.json"), {"fit_seconds": fit_seconds})
    log.info("fitted %s model to %s", cfg.estimator, out)
    return 0


def _restore_fitted(cfg: PipelineConfig, model_path: Path,
                    manifest) -> FittedModel:
    model, sidecar = load_model(model_path)
    artifact_kind = sidecar.get("estimator")
    if artifact_kind and artifact_kind != cfg.estimator:
        raise ValueError(f"artifact estimator {artifact_kind!r} does not "
                         f"match config estimator {cfg.estimator!r}")
    reference_maps = None
    if cfg.registration:
        ids = sidecar.get("support_ids")
        supports = manifest.support({"identity"})
        if ids:
            supports = [e for e in supports if e.image_id in set(ids)]
        if not supports:
            raise ValueError("registration requested but the manifest has no "
                             "matching support entries to build a reference")
        reference_maps = [np.moveaxis(entry_features(manifest, e), 2, 0)
                          for e in supports]
    return FittedModel(model=model, config=cfg,
                       support_score_max=float(
                           sidecar.get("support_score_max", 0.0)),
                       reference_maps=reference_maps,
                       support_ids=list(sidecar.get("support_ids", [])))


def cmd_score(args) -> int:
    cfg = build_config(args)
    manifest = load_manifest(args.manifest)
    _require_files(manifest)
    fitted = _restore_fitted(cfg, Path(args.model), manifest)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in manifest.test():
        scored = score_entry(fitted, manifest, entry)
        save_anomaly_map(out_dir / entry.image_id, scored.amap)
        rows.append({"image_id": entry.image_id, "label": entry.label,
                     "image_score": scored.score})
    _write_json(out_dir / "scores.json", {"scores": rows})
    log.info("scored %d test images into %s", len(rows), out_dir)
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    manifest = load_manifest(args.manifest)
    report, timing = run_report(manifest, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    _write_json(Path(str(out) + ".timing.json"), timing)
    if args.csv:
        Path(args.csv).write_text(report_csv(report))
    summary = report["summary"]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_select_aug(args) -> int:
    cfg = build_config(args)
    manifest = load_manifest(args.manifest)
    _require_files(manifest)
    identity = manifest.support({"identity"})
    report = select_augmentations(cfg, manifest, identity)
    doc = ({"delta": None, "augmentations": {}} if report is None
           else report.to_json())
    _write_json(Path(args.out), doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_register(args) -> int:
    cfg = build_config(args)
    manifest = load_manifest(args.manifest)
    _require_files(manifest)
    identity = manifest.support({"identity"})
    if not identity:
        raise ValueError("manifest has no identity support entries to "
                         "register against")
    refs = [FeatureMap.from_array(np.moveaxis(entry_features(manifest, e), 2, 0))
            for e in identity]
    head = RegistrationHead()
    reg_cfg = RegistrationConfig()
    for entry in manifest.entries:
        agg = entry_features(manifest, entry)
        moving = FeatureMap.from_array(np.moveaxis(agg, 2, 0))
        theta, loss = register_affine(moving, refs, head, reg_cfg)
        entry.thetas = [theta.as_row()]
        log.info("registered %s: angle %.2f deg, loss %.4f", entry.image_id,
                 theta.angle_degrees(), loss)
    save_manifest(Path(args.out), manifest)
    return 0


def cmd_bench(args) -> int:
    doc = {kind: complexity_report(kind, d=args.D, dp=args.d_prime,
                                   k=args.K, h=args.H, w=args.W,
                                   gamma=args.gamma)
           for kind in ("padim", "ortho", "patchcore")}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsad",
        description="Few-shot anomaly detection over exported feature maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit an estimator from support features")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="model artifact path")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("score", help="score test images against a model")
    p.add_argument("manifest", type=Path)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="multi-run fit/score report")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--csv", type=Path, help="optional per-run CSV table")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("select-aug", help="rank support augmentations")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_select_aug)

    p = sub.add_parser("register", help="recover affine warps to the support "
                                        "reference and record them")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True,
                   help="path for the manifest with recovered transforms")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("bench", help="print complexity accounting")
    p.add_argument("-D", type=int, default=448)
    p.add_argument("--d-prime", type=int, default=100, dest="d_prime")
    p.add_argument("-K", type=int, default=2)
    p.add_argument("-H", type=int, default=56)
    p.add_argument("-W", type=int, default=56)
    p.add_argument("--gamma", type=float, default=0.1)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("FSAD_LOG_LEVEL", "WARNING"))
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface every failure as a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
