import numpy as np
import pytest

from fsad.featfile import load_manifest
from fsad.pipeline import (PipelineConfig, check_manifest_files, fit_model,
                           model_dims, score_entry, score_features)


def cfg(**kw):
    kw.setdefault("aug_mode", "none")
    kw.setdefault("out_size", 64)
    return PipelineConfig(**kw)


def test_config_round_trips_through_json():
    c = cfg(estimator="patchcore", gamma=0.2, support_k=4)
    assert PipelineConfig.from_json(c.to_json()) == c


def test_config_rejects_unknown_fields():
    with pytest.raises(ValueError, match="learning_rate"):
        PipelineConfig.from_json({"estimator": "padim", "learning_rate": 0.1})


@pytest.mark.parametrize("bad", [
    {"estimator": "svm"},
    {"aug_mode": "most"},
    {"aug_metric": "l2"},
    {"epsilon": -0.1},
    {"gamma": 0.0},
    {"gamma": 1.5},
    {"d_prime": 0},
    {"proj_dim": 0},
    {"b_neighbors": 0},
    {"smooth_sigma": -1.0},
    {"out_size": 0},
    {"runs": 0},
    {"support_k": 0},
])
def test_config_rejects_invalid_values(bad):
    with pytest.raises(ValueError):
        PipelineConfig(**bad)


def test_support_subsampling_is_seeded(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    c = cfg(estimator="patchcore", support_k=3)
    a = fit_model(c, manifest)
    b = fit_model(c, manifest)
    assert a.support_ids == b.support_ids
    assert len(a.support_ids) == 3
    other = fit_model(c, manifest, support_seed=99)
    assert other.support_ids != a.support_ids
    assert np.array_equal(a.model.items, b.model.items)


def test_fit_sample_counts_follow_the_augmentation_mode(aug_dataset_dir):
    manifest = load_manifest(aug_dataset_dir / "manifest.json")
    none = fit_model(cfg(estimator="patchcore", gamma=1.0, aug_mode="none"),
                     manifest)
    assert none.fit_samples == 8
    assert none.kept_augmentations == []

    every = fit_model(cfg(estimator="patchcore", gamma=1.0, aug_mode="all"),
                      manifest)
    assert every.fit_samples == 24
    assert sorted(every.kept_augmentations) == ["jitter", "shifted"]

    picked = fit_model(cfg(estimator="patchcore", gamma=1.0,
                           aug_mode="selected"), manifest)
    assert picked.fit_samples == 16
    assert picked.kept_augmentations == ["jitter"]
    assert picked.aug_report.selected == {"jitter": True, "shifted": False}


def test_minimum_support_sizes(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    with pytest.raises(ValueError, match="need at least two samples"):
        fit_model(cfg(estimator="padim", support_k=1), manifest)
    single = fit_model(cfg(estimator="patchcore", support_k=1), manifest)
    assert single.fit_samples == 1


def test_support_score_max_covers_the_support_set(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    fitted = fit_model(cfg(estimator="padim", support_k=4), manifest)
    by_id = {e.image_id: e for e in manifest.support({"identity"})}
    scores = [score_entry(fitted, manifest, by_id[i]).score
              for i in fitted.support_ids]
    assert fitted.support_score_max == pytest.approx(max(scores))
    assert fitted.support_score_max > 0


def test_scored_maps_have_the_requested_size(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    fitted = fit_model(cfg(estimator="ortho", support_k=3, out_size=48),
                       manifest)
    scored = score_entry(fitted, manifest, manifest.test()[0])
    assert scored.amap.final.shape == (48, 48)
    assert scored.theta is None
    assert scored.score == pytest.approx(scored.amap.image_score)


def test_bank_scores_are_reweighted_below_the_peak(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    fitted = fit_model(cfg(estimator="patchcore", support_k=3), manifest)
    scored = score_entry(fitted, manifest, manifest.test()[0])
    # The image score folds in the neighborhood weight, so it never exceeds
    # the raw peak that the map keeps.
    assert scored.score <= scored.amap.image_score + 1e-9


def test_registration_restores_a_rotated_test_image(rotation_dataset_dir):
    manifest = load_manifest(rotation_dataset_dir / "manifest.json")
    c = cfg(estimator="padim", registration=True, out_size=32)
    fitted = fit_model(c, manifest)
    assert fitted.reference_maps is not None

    entry = manifest.test()[0]
    scored = score_entry(fitted, manifest, entry)
    assert scored.theta is not None
    assert abs(scored.theta.angle_degrees() - (-10.0)) < 2.0

    plain = fit_model(cfg(estimator="padim", out_size=32), manifest)
    unregistered = score_entry(plain, manifest, entry)
    assert scored.score < unregistered.score


def test_check_manifest_files_reports_paths(dataset_dir, tmp_path):
    manifest = load_manifest(dataset_dir / "manifest.json")
    assert check_manifest_files(manifest) == []
    manifest.entries[0].scale_files = ["does_not_exist.carg"]
    missing = check_manifest_files(manifest)
    assert len(missing) == 1
    assert missing[0].endswith("does_not_exist.carg")


def test_model_dims_by_estimator(dataset_dir):
    manifest = load_manifest(dataset_dir / "manifest.json")
    padim = model_dims(fit_model(cfg(estimator="padim", support_k=2),
                                 manifest))
    assert padim == {"grid_h": 16, "grid_w": 16, "dim": 6, "low_rank": False}
    ortho = model_dims(fit_model(cfg(estimator="ortho", d_prime=4,
                                     support_k=2), manifest))
    assert ortho == {"grid_h": 16, "grid_w": 16, "dim": 4, "low_rank": True}
    bank = model_dims(fit_model(cfg(estimator="patchcore", support_k=2),
                                manifest))
    assert bank == {"bank_items": 52, "dim": 6}  # ceil(0.1 * 2 * 256)
