"""Few-shot anomaly detection from registered patch features."""

from .augselect import (AugmentationReport, gaussian_w2, select, spd_sqrt,
                        weighted_w_sum)
from .estimators import (GaussianField, LowRankProjection, MemoryBank,
                         build_memory_bank, complexity_report, coreset_sample,
                         fit_gaussian_field, fit_lowrank_field, semi_orthogonal)
from .evaluation import LabeledScores, fpr_at, roc_auc, run_report
from .featfile import (Manifest, ManifestEntry, load_manifest, read_feature_file,
                       save_manifest, write_feature_file)
from .features import (FeatureMap, PatchFeatureSet, aggregate_multiscale,
                       resize_bilinear)
from .pipeline import FittedModel, PipelineConfig, fit_model, score_entry
from .registration import (AffineTransform, RegistrationConfig,
                           RegistrationHead, accumulate_reference, affine_warp,
                           cosine_similarity_loss, inverse_remap,
                           register_affine, symmetrized_registration_loss,
                           warp_gradient_theta)
from .scoring import AnomalyMap, assemble, knn_score, mahalanobis_score

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "AnomalyMap", "AugmentationReport", "FeatureMap",
    "FittedModel", "GaussianField", "LabeledScores", "LowRankProjection",
    "Manifest", "ManifestEntry", "MemoryBank", "PatchFeatureSet",
    "PipelineConfig", "RegistrationConfig", "RegistrationHead",
    "accumulate_reference", "affine_warp", "aggregate_multiscale", "assemble",
    "build_memory_bank", "complexity_report", "coreset_sample",
    "cosine_similarity_loss", "fit_gaussian_field", "fit_lowrank_field",
    "fit_model", "fpr_at", "gaussian_w2", "inverse_remap", "knn_score",
    "load_manifest", "mahalanobis_score", "read_feature_file",
    "register_affine", "resize_bilinear", "roc_auc", "run_report",
    "save_manifest", "score_entry", "select", "semi_orthogonal", "spd_sqrt",
    "symmetrized_registration_loss", "warp_gradient_theta",
    "write_feature_file",
]
