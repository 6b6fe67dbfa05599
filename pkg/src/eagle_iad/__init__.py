"""Memory-bank industrial anomaly detection with confidence-gated multimodal prompting."""
from __future__ import annotations

from .coreset import CoresetTrace, PatchSet, ProjectionMatrix, build_coreset
from .dbt import ConfidenceVerdict, ThresholdModel, classify, fit_evt, fit_threshold, training_scores
from .features import DatasetManifest, FeatureGrid, aggregate_patches, generate_synthetic_dataset, load_feature_grid, save_feature_grid
from .scoring import BoundingBox, extract_boxes, image_score, score_grid, upsample_map

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ConfidenceVerdict",
    "CoresetTrace",
    "DatasetManifest",
    "FeatureGrid",
    "PatchSet",
    "ProjectionMatrix",
    "ThresholdModel",
    "aggregate_patches",
    "build_coreset",
    "classify",
    "extract_boxes",
    "fit_evt",
    "fit_threshold",
    "generate_synthetic_dataset",
    "image_score",
    "load_feature_grid",
    "save_feature_grid",
    "score_grid",
    "training_scores",
    "upsample_map",
]
