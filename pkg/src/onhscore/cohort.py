"""Synthetic feature cohorts drawn from the published per-class score clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from onhscore.metrics import Diagnosis, EyeFeatures
from onhscore.rng import derive_rng


@dataclass(frozen=True)
class ClassCluster:
    n_eyes: int
    drusen_mean: float
    drusen_sd: float
    swelling_mean: float
    swelling_sd: float


# mm^3, mean +/- SD per class in the 150-eye classification cohort
PUBLISHED_CLUSTERS = {
    Diagnosis.ODD: ClassCluster(70, 0.66, 0.55, 1.98, 0.63),
    Diagnosis.PAPILLEDEMA: ClassCluster(30, 0.004, 0.015, 3.43, 1.49),
    Diagnosis.HEALTHY: ClassCluster(50, 0.002, 0.005, 1.23, 0.26),
}


def truncated_normal(rng: np.random.Generator, mean: float, sd: float, size: int) -> np.ndarray:
    """Normal(mean, sd) conditioned on being >= 0, by rejection."""
    out = np.empty(0)
    while len(out) < size:
        draw = rng.normal(mean, sd, size=2 * (size - len(out)) + 8)
        out = np.concatenate([out, draw[draw >= 0]])
    return out[:size]


def simulate_cohort(seed: int, clusters=None, collapsed: bool = False) -> list[EyeFeatures]:
    """Sample one eye per subject for each class cluster.

    With ``collapsed=True`` every eye is drawn from a single pooled cluster
    (the eye-weighted average of the class parameters) while keeping the
    class labels, which gives a null problem with AUCs near 0.5.
    """
    clusters = dict(PUBLISHED_CLUSTERS if clusters is None else clusters)
    if collapsed:
        total = sum(c.n_eyes for c in clusters.values())
        pooled = ClassCluster(
            0,
            sum(c.n_eyes * c.drusen_mean for c in clusters.values()) / total,
            sum(c.n_eyes * c.drusen_sd for c in clusters.values()) / total,
            sum(c.n_eyes * c.swelling_mean for c in clusters.values()) / total,
            sum(c.n_eyes * c.swelling_sd for c in clusters.values()) / total,
        )
    features = []
    for label, cl in clusters.items():
        src = pooled if collapsed else cl
        rng = derive_rng(seed, "cohort", label.index)
        drusen = truncated_normal(rng, src.drusen_mean, src.drusen_sd, cl.n_eyes)
        swelling = truncated_normal(rng, src.swelling_mean, src.swelling_sd, cl.n_eyes)
        for i in range(cl.n_eyes):
            sid = f"{label.value}-{i:03d}"
            features.append(EyeFeatures(sid + "-OD", sid, float(drusen[i]), float(swelling[i]), label))
    return features
