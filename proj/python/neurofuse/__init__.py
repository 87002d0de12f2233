"""Brain-scan classification: preprocessing, fused extractor, boosted trees, Grad-CAM."""

from ._core import (
    Run,
    ShapeError,
    TreeEnsemble,
    clahe,
    evaluate_scores,
    gbdt_fit,
    otsu_threshold,
    preprocess,
    quantize_tensor,
    read_image,
    synth,
    train,
)

__all__ = [
    "Run",
    "ShapeError",
    "TreeEnsemble",
    "clahe",
    "evaluate_scores",
    "gbdt_fit",
    "otsu_threshold",
    "preprocess",
    "quantize_tensor",
    "read_image",
    "synth",
    "train",
]
