"""Segmentation overlap metrics, one-vs-all ROC AUC and subject-grouped CV."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from onhscore.forest import ForestParams, predict_proba, train_forest
from onhscore.metrics import CLASSES, Diagnosis, EyeFeatures
from onhscore.rng import derive_rng
from onhscore.volume import LabelVolume

METRICS = ("auc_odd", "auc_papilledema", "auc_healthy", "accuracy")


def _label_array(x) -> np.ndarray:
    return x.data if isinstance(x, LabelVolume) else np.asarray(x)


def _masks(pred, truth, c):
    p, t = _label_array(pred), _label_array(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p == c, t == c


def dice(pred, truth, c: int) -> float:
    """Dice coefficient for class ``c``; NaN when neither input contains it."""
    a, b = _masks(pred, truth, c)
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        return math.nan
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def jaccard(pred, truth, c: int) -> float:
    """Intersection over union for class ``c``; NaN when neither input contains it."""
    a, b = _masks(pred, truth, c)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return math.nan
    return int(np.count_nonzero(a & b)) / union


@dataclass
class DiceReport:
    per_class: dict  # class code -> dice, or None when undefined
    jaccard: dict
    mean_dice: Optional[float]
    excluded: list  # classes absent from the truth

    def to_json(self) -> str:
        return json.dumps({
            "dice": {str(k): _sig(v) for k, v in self.per_class.items()},
            "jaccard": {str(k): _sig(v) for k, v in self.jaccard.items()},
            "mean_dice": _sig(self.mean_dice),
            "excluded_classes": self.excluded,
        }, indent=2)


def dice_report(pred, truth, classes=range(1, 9)) -> DiceReport:
    """Per-class Dice/Jaccard; the mean runs over classes present in ``truth``."""
    t = _label_array(truth)
    per, jac, excluded = {}, {}, []
    for c in classes:
        d = dice(pred, truth, c)
        per[c] = None if math.isnan(d) else d
        j = jaccard(pred, truth, c)
        jac[c] = None if math.isnan(j) else j
        if not np.any(t == c):
            excluded.append(c)
    used = [per[c] for c in classes if c not in excluded]
    return DiceReport(per, jac, float(np.mean(used)) if used else None, excluded)


def roc_auc(scores, positives) -> float:
    """P(score of a positive > score of a negative) + 0.5 P(tie), by exact pair counting."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape:
        raise ValueError("scores and labels must have the same length")
    sp, sn = s[pos], np.sort(s[~pos])
    if len(sp) == 0 or len(sn) == 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    below = np.searchsorted(sn, sp, side="left")
    below_or_tie = np.searchsorted(sn, sp, side="right")
    twice = int(np.sum(below + below_or_tie))  # 2*wins + ties
    return twice / (2 * len(sp) * len(sn))


def one_vs_all_aucs(probs, truth: Sequence[Diagnosis]) -> tuple[float, float, float]:
    p = np.asarray(probs, dtype=np.float64)
    idx = np.array([Diagnosis.parse(t).index for t in truth])
    missing = [c.value for c in CLASSES if not np.any(idx == c.index)]
    if missing:
        raise ValueError(f"classes missing from evaluation set: {missing}")
    return tuple(roc_auc(p[:, k], idx == k) for k in range(len(CLASSES)))


def subject_classes(features: Sequence[EyeFeatures]) -> dict:
    """Class per subject: the most frequent eye class (earlier class wins ties)."""
    votes: dict = {}
    for f in features:
        if f.true_class is None:
            raise ValueError(f"eye {f.eye_id} has no true_class")
        votes.setdefault(f.subject_id, [0] * len(CLASSES))[f.true_class.index] += 1
    return {s: CLASSES[int(np.argmax(v))] for s, v in votes.items()}


def _allocate(n: int, fractions: Sequence[float], offset: int) -> list[int]:
    # largest remainder; equal remainders go round-robin from ``offset``
    raw = [n * f for f in fractions]
    base = [math.floor(r + 1e-9) for r in raw]
    left = n - sum(base)
    k = len(fractions)
    order = sorted(range(k), key=lambda i: (-round(raw[i] - base[i], 9), (i - offset) % k))
    for i in order[:left]:
        base[i] += 1
    return base


def grouped_split(features: Sequence[EyeFeatures], fractions: Sequence[float], seed: int,
                  label: str = "split") -> list[list[EyeFeatures]]:
    """Partition eyes by subject, stratified by subject class.

    Each class's subjects are shuffled and dealt to the parts in proportion to
    ``fractions``; every eye of a subject lands in that subject's part.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative and sum to 1")
    k = len(fractions)
    by_subject = subject_classes(features)
    part_of = {}
    offset = 0
    for cls in CLASSES:
        subjects = sorted(s for s, c in by_subject.items() if c is cls)
        if not subjects:
            continue
        if len(subjects) < k:
            raise ValueError(f"class {cls.value} has {len(subjects)} subjects, fewer than {k} parts")
        rng = derive_rng(seed, label, cls.index)
        subjects = [subjects[i] for i in rng.permutation(len(subjects))]
        counts = _allocate(len(subjects), fractions, offset)
        offset = (offset + len(subjects)) % k
        pos = 0
        for part, cnt in enumerate(counts):
            for s in subjects[pos:pos + cnt]:
                part_of[s] = part
            pos += cnt
    parts = [[] for _ in range(k)]
    for f in features:
        parts[part_of[f.subject_id]].append(f)
    return parts


def _sig(x):
    if x is None:
        return None
    if isinstance(x, (list, tuple)):
        return [_sig(v) for v in x]
    return float(f"{x:.6g}")


@dataclass
class AucReport:
    """Fold-wise metrics. ``folds[m]`` holds one value per fold for metric ``m``."""

    folds: dict = field(default_factory=lambda: {m: [] for m in METRICS})
    mode: str = "cv"

    def add(self, aucs, accuracy):
        for m, v in zip(METRICS, (*aucs, accuracy)):
            self.folds[m].append(float(v))

    def mean(self, metric: str) -> float:
        return float(np.mean(self.folds[metric]))

    def std(self, metric: str) -> float:
        vals = self.folds[metric]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def as_dict(self) -> dict:
        out = {"mode": self.mode, "n_folds": len(self.folds["accuracy"])}
        for m in METRICS:
            out[m] = {"folds": _sig(self.folds[m]), "mean": _sig(self.mean(m)), "std": _sig(self.std(m))}
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def _evaluate(train, test, params: ForestParams):
    model = train_forest(train, params)
    proba = predict_proba(model, np.array([f.vector for f in test]).reshape(-1, 2))
    truth = [f.true_class for f in test]
    aucs = one_vs_all_aucs(proba, truth)
    pred = np.argmax(proba, axis=1)
    acc = float(np.mean(pred == np.array([t.index for t in truth])))
    return aucs, acc


def cv_folds(features: Sequence[EyeFeatures], k: int, seed: int) -> list[list[EyeFeatures]]:
    return grouped_split(features, [1.0 / k] * k, seed, label="cv.folds")


def cross_validate(features: Sequence[EyeFeatures], k: int = 5, params: ForestParams = ForestParams(),
                   seed: int = 0, threads: int = 1) -> AucReport:
    """Subject-grouped, class-stratified k-fold CV of the forest.

    Each fold's forest is seeded from (seed, fold index), so the report does
    not depend on ``threads``.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    folds = cv_folds(features, k, seed)

    def run(i):
        train = [f for j, fold in enumerate(folds) if j != i for f in fold]
        fold_params = replace(params, seed=int(derive_rng(seed, "cv.forest", i).integers(0, 2**63)))
        return _evaluate(train, folds[i], fold_params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]
    report = AucReport(mode="cv")
    for aucs, acc in results:
        report.add(aucs, acc)
    return report


def holdout_evaluate(features: Sequence[EyeFeatures], params: ForestParams = ForestParams(),
                     seed: int = 0, train_fraction: float = 0.5) -> AucReport:
    """Single subject-grouped train/test split (50/50 by default)."""
    train, test = grouped_split(features, [train_fraction, 1.0 - train_fraction], seed, label="holdout")
    fold_params = replace(params, seed=int(derive_rng(seed, "holdout.forest").integers(0, 2**63)))
    report = AucReport(mode="holdout")
    report.add(*_evaluate(train, test, fold_params))
    return report
