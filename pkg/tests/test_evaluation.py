import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onhscore.cohort import simulate_cohort
from onhscore.evaluation import (
    AucReport,
    cross_validate,
    cv_folds,
    dice,
    dice_report,
    grouped_split,
    holdout_evaluate,
    jaccard,
    one_vs_all_aucs,
    roc_auc,
)
from onhscore.forest import ForestParams
from onhscore.metrics import Diagnosis, EyeFeatures

ODD, PAP, HEALTHY = Diagnosis.ODD, Diagnosis.PAPILLEDEMA, Diagnosis.HEALTHY


def brute_auc(scores, positives):
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    credit = sum(2 if a > b else 1 if a == b else 0 for a, b in itertools.product(pos, neg))
    return credit / (2 * len(pos) * len(neg))


def brute_overlap(a, b):
    sa = {idx for idx, v in np.ndenumerate(a) if v}
    sb = {idx for idx, v in np.ndenumerate(b) if v}
    return 2 * len(sa & sb) / (len(sa) + len(sb)), len(sa & sb) / len(sa | sb)


# overlap metrics

def test_dice_examples():
    t = np.zeros(400, dtype=np.uint8)
    t[:100] = 3
    assert dice(t, t, 3) == 1.0
    disjoint = np.zeros(400, dtype=np.uint8)
    disjoint[200:300] = 3
    assert dice(disjoint, t, 3) == 0.0
    half = np.zeros(400, dtype=np.uint8)
    half[50:150] = 3
    assert dice(half, t, 3) == 0.5
    assert jaccard(half, t, 3) == pytest.approx(1 / 3, abs=1e-15)
    assert jaccard(t, t, 3) == 1.0


def test_absent_class_is_undefined():
    z = np.zeros((4, 4), dtype=np.uint8)
    assert math.isnan(dice(z, z, 5)) and math.isnan(jaccard(z, z, 5))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 3)), np.zeros((3, 2)), 1)


def test_random_masks_against_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(3):
        a = rng.integers(0, 9, (32, 32, 32), dtype=np.uint8)
        b = np.where(rng.random(a.shape) < 0.3, rng.integers(0, 9, a.shape), a).astype(np.uint8)
        for c in (1, 4, 8):
            d, j = brute_overlap(a == c, b == c)
            assert dice(a, b, c) == pytest.approx(d, abs=1e-15)
            assert jaccard(a, b, c) == pytest.approx(j, abs=1e-15)


@given(st.integers(0, 2**32), st.floats(0.01, 0.9))
def test_dice_jaccard_identity_and_symmetry(seed, p):
    rng = np.random.default_rng(seed)
    a = (rng.random((6, 7, 8)) < p).astype(np.uint8)
    b = (rng.random((6, 7, 8)) < p).astype(np.uint8)
    if not (a.any() or b.any()):
        return
    d, j = dice(a, b, 1), jaccard(a, b, 1)
    assert d == dice(b, a, 1) and j == jaccard(b, a, 1)
    assert abs(j - d / (2 - d)) <= 1e-12
    assert 0.0 <= d <= 1.0


def test_dice_report_excludes_absent():
    truth = np.zeros((2, 4, 5), dtype=np.uint8)
    truth[0] = 1
    truth[1, :2] = 4
    pred = truth.copy()
    pred[1, :2] = 1
    pred[1, 3] = 7
    rep = dice_report(pred, truth)
    assert rep.excluded == [2, 3, 5, 6, 7, 8]
    assert rep.per_class[4] == 0.0
    assert rep.per_class[7] == 0.0  # predicted but absent from truth: defined, not averaged
    assert rep.per_class[2] is None
    assert rep.mean_dice == pytest.approx((dice(pred, truth, 1) + 0.0) / 2)
    data = json.loads(rep.to_json())
    assert data["excluded_classes"] == rep.excluded


# AUC

@pytest.mark.parametrize("pos, neg, expected", [
    ([0.9, 0.8], [0.2, 0.1], 1.0),
    ([0.8, 0.3], [0.5, 0.1], 0.75),
    ([0.4, 0.4], [0.4, 0.4, 0.4], 0.5),
])
def test_auc_examples(pos, neg, expected):
    scores = pos + neg
    labels = [True] * len(pos) + [False] * len(neg)
    assert roc_auc(scores, labels) == expected
    assert brute_auc(scores, labels) == expected


def test_auc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [True, True])


def _trapezoid_auc(scores, positives):
    s, y = np.asarray(scores), np.asarray(positives)
    P, N = y.sum(), (~y).sum()
    pts = [(0.0, 0.0)]
    for t in sorted(set(s), reverse=True):
        pts.append((np.sum((s >= t) & ~y) / N, np.sum((s >= t) & y) / P))
    return sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))


auc_cases = st.integers(2, 50).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 8).map(lambda v: v / 8), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@given(auc_cases)
def test_auc_oracles_and_identities(case):
    scores, labels = case
    auc = roc_auc(scores, labels)
    assert auc == brute_auc(scores, labels)
    assert auc == pytest.approx(_trapezoid_auc(scores, labels), abs=1e-12)
    assert auc + roc_auc(scores, [not v for v in labels]) == 1.0
    assert roc_auc(np.exp(3 * np.asarray(scores)) - 7, labels) == auc


def test_one_vs_all_examples():
    truth = [ODD, ODD, PAP, PAP, HEALTHY]
    perfect = np.eye(3)[[c.index for c in truth]]
    assert one_vs_all_aucs(perfect, truth) == (1.0, 1.0, 1.0)
    assert one_vs_all_aucs(np.full((5, 3), 1 / 3), truth) == (0.5, 0.5, 0.5)
    with pytest.raises(ValueError, match="missing"):
        one_vs_all_aucs(perfect[:4], truth[:4])


# splits

def _cohort(n_subjects, eyes_per_subject=1, classes=(ODD,)):
    out = []
    for i in range(n_subjects):
        cls = classes[i % len(classes)]
        for e in range(eyes_per_subject):
            out.append(EyeFeatures(f"s{i}-{e}", f"s{i}", 0.1 * i, 1.0 + e, cls))
    return out


def test_ten_subjects_half_split():
    feats = _cohort(10)
    a, b = grouped_split(feats, [0.5, 0.5], seed=3)
    assert len(a) == len(b) == 5
    assert not {f.subject_id for f in a} & {f.subject_id for f in b}
    assert grouped_split(feats, [0.5, 0.5], seed=3) == [a, b]


def test_both_eyes_together():
    feats = _cohort(12, eyes_per_subject=2, classes=(ODD, HEALTHY, PAP))
    for seed in range(20):
        for part in grouped_split(feats, [0.5, 0.5], seed):
            ids = [f.subject_id for f in part]
            assert all(ids.count(s) == 2 for s in ids)


def test_published_cohort_halves():
    a, b = grouped_split(simulate_cohort(1), [0.5, 0.5], seed=42)
    for part in (a, b):
        counts = [sum(f.true_class is c for f in part) for c in (ODD, PAP, HEALTHY)]
        assert counts == [35, 15, 25]


def test_split_errors():
    with pytest.raises(ValueError):
        grouped_split(_cohort(10), [0.5, 0.6], 0)
    with pytest.raises(ValueError, match="fewer"):
        grouped_split(_cohort(3), [0.25] * 4, 0)


def _random_multi_eye_cohort(rng):
    feats = []
    for cls in (ODD, PAP, HEALTHY):
        for i in range(int(rng.integers(5, 20))):
            for e in range(int(rng.integers(1, 3))):
                feats.append(EyeFeatures(f"{cls.value}{i}-{e}", f"{cls.value}{i}", float(rng.random()),
                                         float(rng.random() * 4), cls))
    return feats


@given(st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_split_hygiene(seed):
    rng = np.random.default_rng(seed)
    feats = _random_multi_eye_cohort(rng)
    fractions = [0.2] * 5
    parts = grouped_split(feats, fractions, seed)
    owner = {}
    for p, part in enumerate(parts):
        for f in part:
            assert owner.setdefault(f.subject_id, p) == p
    assert sorted(f.eye_id for part in parts for f in part) == sorted(f.eye_id for f in feats)
    # per-class subject counts within one of the target share
    for cls in (ODD, PAP, HEALTHY):
        n = len({f.subject_id for f in feats if f.true_class is cls})
        for part in parts:
            k = len({f.subject_id for f in part if f.true_class is cls})
            assert abs(k - n * 0.2) < 1


# cross-validation

def test_folds_cover_each_sample_once():
    feats = _random_multi_eye_cohort(np.random.default_rng(4))
    folds = cv_folds(feats, 5, seed=1)
    test_ids = [f.eye_id for fold in folds for f in fold]
    assert sorted(test_ids) == sorted(f.eye_id for f in feats)
    assert len(set(test_ids)) == len(test_ids)


def test_separable_clusters_perfect():
    feats = []
    for k, cls in enumerate((ODD, PAP, HEALTHY)):
        for i in range(10):
            feats.append(EyeFeatures(f"{k}-{i}", f"{k}-{i}", 10.0 * k + 0.01 * i, 1.0 + 0.01 * i, cls))
    rep = cross_validate(feats, k=5, params=ForestParams(n_trees=20), seed=0)
    for m in ("auc_odd", "auc_papilledema", "auc_healthy", "accuracy"):
        assert rep.mean(m) == 1.0 and rep.std(m) == 0.0


def test_label_shuffle_baseline():
    base = simulate_cohort(0)
    labels = [f.true_class for f in base]
    rng = np.random.default_rng(123)
    means = []
    for s in range(20):
        perm = rng.permutation(len(labels))
        feats = [EyeFeatures(f.eye_id, f.subject_id, f.drusen_score_mm3, f.swelling_score_mm3, labels[j])
                 for f, j in zip(base, perm)]
        rep = cross_validate(feats, k=5, params=ForestParams(n_trees=25), seed=s)
        means.append([rep.mean(m) for m in ("auc_odd", "auc_papilledema", "auc_healthy")])
    avg = np.mean(means, axis=0)
    assert np.all(np.abs(avg - 0.5) <= 0.15)


def test_cluster_simulation_cv():
    rep = cross_validate(simulate_cohort(1), k=5, seed=1)
    assert all(rep.mean(m) >= 0.95 for m in ("auc_odd", "auc_papilledema", "auc_healthy"))
    assert rep.mean("accuracy") >= 0.88


def test_report_invariants_and_json():
    rep = cross_validate(simulate_cohort(2), k=5, params=ForestParams(n_trees=20), seed=2)
    data = json.loads(rep.to_json())
    for m in ("auc_odd", "auc_papilledema", "auc_healthy", "accuracy"):
        folds = rep.folds[m]
        assert len(folds) == 5
        assert min(folds) <= rep.mean(m) <= max(folds)
        assert rep.std(m) >= 0
        assert data[m]["mean"] == float(f"{rep.mean(m):.6g}")


def test_threads_do_not_change_report():
    feats = simulate_cohort(5)
    a = cross_validate(feats, params=ForestParams(n_trees=30), seed=5, threads=1).to_json()
    b = cross_validate(feats, params=ForestParams(n_trees=30), seed=5, threads=4).to_json()
    assert a == b


def test_holdout_mode():
    rep = holdout_evaluate(simulate_cohort(3), ForestParams(n_trees=50), seed=3)
    assert rep.mode == "holdout" and len(rep.folds["accuracy"]) == 1
    assert rep.std("accuracy") == 0.0


def test_single_fold_report():
    rep = AucReport()
    rep.add((1.0, 0.5, 0.25), 0.9)
    assert rep.as_dict()["accuracy"]["mean"] == 0.9
