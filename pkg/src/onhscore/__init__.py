"""Optic nerve head structural scoring toolkit.

Attenuation compensation of OCT volumes, drusen / prelamina swelling scores
from tissue label volumes, a random-forest three-way classifier
(ODD / papilledema / healthy) and the evaluation protocol around it.
"""

from onhscore.volume import (
    IntensityVolume,
    LabelVolume,
    TissueClass,
    VoxelSpacing,
    load_volume,
    normalize_intensity,
    resize_bscan,
    save_volume,
)
from onhscore.compensation import CompensationParams, compensate_ascan, compensate_volume
from onhscore.metrics import (
    Diagnosis,
    EyeFeatures,
    class_volumes,
    drusen_score,
    enface_rpe_mask,
    extract_features,
    swelling_score,
)
from onhscore.forest import ForestModel, ForestParams, load_model, predict_class, predict_proba, save_model, train_forest

__version__ = "0.1.0"

__all__ = [
    "CompensationParams",
    "Diagnosis",
    "EyeFeatures",
    "ForestModel",
    "ForestParams",
    "IntensityVolume",
    "LabelVolume",
    "TissueClass",
    "VoxelSpacing",
    "class_volumes",
    "compensate_ascan",
    "compensate_volume",
    "drusen_score",
    "enface_rpe_mask",
    "extract_features",
    "load_model",
    "load_volume",
    "normalize_intensity",
    "predict_class",
    "predict_proba",
    "resize_bscan",
    "save_model",
    "save_volume",
    "swelling_score",
    "train_forest",
]
