"""Drusen and prelamina swelling scores from tissue label volumes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from onhscore.volume import N_CLASSES, LabelVolume, TissueClass

SCORES_HEADER = ["eye_id", "subject_id", "true_class", "drusen_score_mm3", "swelling_score_mm3"]


class Diagnosis(Enum):
    """Classification targets, in the fixed order used for probability triples."""

    ODD = "odd"
    PAPILLEDEMA = "papilledema"
    HEALTHY = "healthy"

    @property
    def index(self) -> int:
        return _DIAGNOSIS_ORDER.index(self)

    @classmethod
    def parse(cls, value) -> "Diagnosis":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown class {value!r}; expected one of odd, papilledema, healthy") from None


_DIAGNOSIS_ORDER = (Diagnosis.ODD, Diagnosis.PAPILLEDEMA, Diagnosis.HEALTHY)
CLASSES = _DIAGNOSIS_ORDER


@dataclass(frozen=True)
class EyeFeatures:
    eye_id: str
    subject_id: str
    drusen_score_mm3: float
    swelling_score_mm3: float
    true_class: Optional[Diagnosis] = None

    def __post_init__(self):
        for name in ("drusen_score_mm3", "swelling_score_mm3"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
            object.__setattr__(self, name, v)
        if self.true_class is not None:
            object.__setattr__(self, "true_class", Diagnosis.parse(self.true_class))

    @property
    def vector(self) -> tuple[float, float]:
        return (self.drusen_score_mm3, self.swelling_score_mm3)


def enface_rpe_mask(labels: LabelVolume) -> np.ndarray:
    """(nb, na) mask of columns that contain no RPE voxel at any depth.

    These columns make up the interior of the Bruch's membrane opening.
    """
    return ~np.any(labels.data == TissueClass.RPE, axis=2)


def _scale(count: int, labels: LabelVolume) -> float:
    sp = labels.spacing
    return float(count) * sp.dx_mm * sp.dy_mm * sp.dz_mm


def drusen_score(labels: LabelVolume) -> float:
    """Total physical volume (mm^3) of ODD voxels."""
    return _scale(int(np.count_nonzero(labels.data == TissueClass.ODD)), labels)


def swelling_score(labels: LabelVolume) -> float:
    """Volume (mm^3) of prelamina and ODD voxels lying in RPE-free columns."""
    data = labels.data
    tissue = (data == TissueClass.RNFL_PRELAMINA) | (data == TissueClass.ODD)
    inside = enface_rpe_mask(labels)
    return _scale(int(np.count_nonzero(tissue & inside[:, :, None])), labels)


def class_volumes(labels: LabelVolume) -> np.ndarray:
    """Physical volume (mm^3) of each class 0..8."""
    counts = np.bincount(labels.data.ravel(), minlength=N_CLASSES)
    return np.array([_scale(int(c), labels) for c in counts])


def filter_islands(labels: LabelVolume, min_voxels: int, replacement: int = TissueClass.RNFL_PRELAMINA) -> LabelVolume:
    """Relabel 26-connected ODD components smaller than ``min_voxels``.

    Removed voxels become ``replacement`` (prelamina by default), which drops
    them from the drusen score while leaving the swelling score unchanged.
    """
    if min_voxels <= 1:
        return labels
    odd = labels.data == TissueClass.ODD
    comp, n = ndimage.label(odd, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return labels
    sizes = np.bincount(comp.ravel())
    small = sizes < min_voxels
    small[0] = False
    out = labels.data.copy()
    out[small[comp]] = replacement
    return LabelVolume(out, labels.spacing)


def extract_features(labels: LabelVolume, eye_id: str, subject_id: str, true_class=None,
                     min_island: int = 0) -> EyeFeatures:
    if min_island > 1:
        labels = filter_islands(labels, min_island)
    return EyeFeatures(
        eye_id=str(eye_id),
        subject_id=str(subject_id),
        drusen_score_mm3=drusen_score(labels),
        swelling_score_mm3=swelling_score(labels),
        true_class=None if true_class is None else Diagnosis.parse(true_class),
    )


def feature_row(f: EyeFeatures) -> list[str]:
    return [
        f.eye_id,
        f.subject_id,
        "" if f.true_class is None else f.true_class.value,
        repr(f.drusen_score_mm3),
        repr(f.swelling_score_mm3),
    ]


def append_scores_csv(path, rows: Iterable[EyeFeatures]) -> None:
    """Append rows to a scores CSV, writing the header if the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(SCORES_HEADER)
        for f in rows:
            writer.writerow(feature_row(f))


def write_scores_csv(path, rows: Iterable[EyeFeatures]) -> None:
    Path(path).unlink(missing_ok=True)
    append_scores_csv(path, rows)


def read_scores_csv(path) -> list[EyeFeatures]:
    """Parse a scores CSV. Extra columns are ignored; rows whose ``status``
    column is present and not ``ok`` are skipped."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SCORES_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, 2):
            if row.get("status", "ok") not in ("ok", ""):
                continue
            try:
                out.append(EyeFeatures(
                    eye_id=row["eye_id"],
                    subject_id=row["subject_id"],
                    drusen_score_mm3=float(row["drusen_score_mm3"]),
                    swelling_score_mm3=float(row["swelling_score_mm3"]),
                    true_class=row["true_class"] or None,
                ))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
