"""
Unit tests for classification metrics, fold aggregation, the Wilcoxon
signed-rank test and craving-level labeling.
"""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from errors import DataError, DegenerateDataError, ShapeError
from metrics import (METRIC_NAMES, CrossValReport, FoldResult, compute_metrics, craving_level_labels,
                     signed_rank_distribution, wilcoxon_signed_rank)
from signalio import CravingLevel


def _brute_force_p(diffs: np.ndarray) -> float:
    """Two-sided p by enumerating every sign assignment of the absolute differences."""
    diffs = diffs[diffs != 0]
    ranks = stats.rankdata(np.abs(diffs))
    center = ranks.sum() / 2.0
    observed = abs(ranks[diffs > 0].sum() - center)
    extreme = 0
    for signs in itertools.product([0, 1], repeat=diffs.size):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if abs(w - center) >= observed - 1e-9:
            extreme += 1
    return min(1.0, extreme / 2 ** diffs.size)


def test_perfect_predictions():
    for labels in ([0, 1, 1, 0, 1], [0, 1, 2, 2, 1, 0]):
        report = compute_metrics(labels, labels)
        for name, value in report.as_dict().items():
            assert value == 1.0, name


def test_all_wrong_binary():
    labels = np.array([0, 1, 1, 0, 1])
    report = compute_metrics(1 - labels, labels)
    assert report.accuracy == 0.0
    assert report.sensitivity == 0.0
    assert report.precision == 0.0
    assert report.f1 == 0.0


def test_hand_confusion_matrix():
    # TP=3, FN=1, FP=2, TN=4
    labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    preds = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
    report = compute_metrics(preds, labels, positive_class=1)
    assert report.sensitivity == pytest.approx(0.75)
    assert report.recall == pytest.approx(0.75)
    assert report.precision == pytest.approx(0.6)
    assert report.accuracy == pytest.approx(0.7)
    assert report.f1 == pytest.approx(2 * 0.6 * 0.75 / 1.35)
    assert report.f1 == pytest.approx(0.6667, abs=1e-4)
    assert report.confusion.tolist() == [[4, 2], [1, 3]]
    assert report.percent()["accuracy"] == pytest.approx(70.0)


def test_positive_class_choice():
    labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    preds = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
    report = compute_metrics(preds, labels, positive_class=0)
    assert report.sensitivity == pytest.approx(4 / 6)
    assert report.precision == pytest.approx(4 / 5)


def test_undefined_metrics_are_none():
    report = compute_metrics([0, 0, 0], [0, 1, 0])
    assert report.precision is None
    assert report.f1 is None
    assert report.sensitivity == 0.0
    report = compute_metrics([0, 1, 0], [0, 0, 0])
    assert report.sensitivity is None
    assert report.recall is None


def test_multiclass_macro_and_micro():
    labels = [0, 0, 1, 1, 2, 2]
    preds = [0, 1, 1, 1, 2, 0]
    report = compute_metrics(preds, labels, positive_class=2, n_classes=3)
    per_precision = [1 / 2, 2 / 3, 1.0]
    per_recall = [1 / 2, 1.0, 1 / 2]
    per_f1 = [2 * p * r / (p + r) for p, r in zip(per_precision, per_recall)]
    assert report.macro_precision == pytest.approx(np.mean(per_precision))
    assert report.macro_recall == pytest.approx(np.mean(per_recall))
    assert report.macro_f1 == pytest.approx(np.mean(per_f1))
    assert report.precision == report.macro_precision
    assert report.sensitivity == pytest.approx(0.5)
    for name in ("micro_precision", "micro_recall", "micro_f1"):
        assert getattr(report, name) == pytest.approx(4 / 6)


def test_micro_accuracy_is_one_minus_hamming():
    rng = np.random.default_rng(0)
    for n_classes, n in itertools.product([2, 3, 5], [1, 7, 50]):
        labels = rng.integers(0, n_classes, size=n)
        preds = rng.integers(0, n_classes, size=n)
        report = compute_metrics(preds, labels, n_classes=n_classes, positive_class=0)
        assert report.accuracy == pytest.approx(1 - np.mean(preds != labels))
        assert report.micro_f1 == pytest.approx(report.accuracy, abs=1e-12)
        for value in report.as_dict().values():
            assert value is None or 0.0 <= value <= 1.0


def test_metric_errors():
    with pytest.raises(DataError):
        compute_metrics([0, 1], [0, 2], n_classes=2)
    with pytest.raises(DataError):
        compute_metrics([], [])
    with pytest.raises(ShapeError):
        compute_metrics([0, 1], [0])
    with pytest.raises(DataError):
        compute_metrics([0, 1], [0, 1], positive_class=2)


def test_crossval_report_aggregation():
    folds = [
        FoldResult(0, (1,), np.array([1, 1]), np.array([1, 1]), compute_metrics([1, 1], [1, 1])),
        FoldResult(1, (2,), np.array([0, 1]), np.array([0, 0]), compute_metrics([0, 1], [0, 0])),
    ]
    report = CrossValReport.from_folds("loso", "hc_vs_mbt", folds, positive_class=1, n_classes=2)
    assert report.n_folds == 2
    assert report.mean["accuracy"] == pytest.approx(0.75)
    assert report.sd["accuracy"] == pytest.approx(math.sqrt(0.125))
    # The second fold has no positive labels, so its sensitivity is left out.
    assert report.mean["sensitivity"] == 1.0 and report.sd["sensitivity"] == 0.0
    assert report.pooled.accuracy == pytest.approx(0.75)
    assert set(report.mean) == set(METRIC_NAMES)
    rows = report.fold_rows()
    assert [r["fold"] for r in rows] == [0, 1] and rows[1]["test_subjects"] == "2"
    assert report.summary_lines()[0] == "hc_vs_mbt (loso, 2 folds)"


def test_wilcoxon_all_positive():
    result = wilcoxon_signed_rank([0, 0, 0, 0, 0], [1, 2, 3, 4, 5])
    assert result.statistic == 15
    assert result.p_value == pytest.approx(2 / 32, abs=1e-15)
    assert result.n_effective == 5 and result.method == "exact"


def test_wilcoxon_matches_brute_force():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 100:
        n = int(rng.integers(1, 11))
        pre = rng.integers(0, 6, size=n).astype(np.float64)
        post = rng.integers(0, 6, size=n).astype(np.float64)
        if np.all(pre == post):
            continue
        result = wilcoxon_signed_rank(pre, post)
        assert abs(result.p_value - _brute_force_p(post - pre)) < 1e-12
        checked += 1


def test_wilcoxon_swap_symmetry():
    rng = np.random.default_rng(2)
    for n in [4, 9, 15, 30]:
        pre, post = rng.normal(size=n), rng.normal(size=n)
        forward = wilcoxon_signed_rank(pre, post)
        backward = wilcoxon_signed_rank(post, pre)
        assert forward.p_value == pytest.approx(backward.p_value, abs=1e-12)
        assert forward.statistic + backward.statistic == pytest.approx(n * (n + 1) / 2)


def test_wilcoxon_drops_zero_differences():
    result = wilcoxon_signed_rank([1, 2, 3, 4], [1, 3, 5, 4])
    assert result.n_effective == 2
    assert result.statistic == 3


def test_wilcoxon_normal_approximation():
    diffs = np.arange(1, 26, dtype=np.float64)
    diffs[[0, 3, 7]] *= -1
    result = wilcoxon_signed_rank(np.zeros(25), diffs)
    assert result.method == "normal"
    n = 25
    w_plus = n * (n + 1) / 2 - (1 + 4 + 8)
    mean = n * (n + 1) / 4
    sd = math.sqrt(n * (n + 1) * (2 * n + 1) / 24)
    z = (abs(w_plus - mean) - 0.5) / sd
    assert result.statistic == w_plus
    assert result.p_value == pytest.approx(math.erfc(z / math.sqrt(2)), rel=1e-9)


def test_wilcoxon_errors():
    with pytest.raises(DegenerateDataError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(ShapeError):
        wilcoxon_signed_rank([1, 2], [1, 2, 3])


def test_signed_rank_distribution_counts():
    counts = signed_rank_distribution(np.array([1.0, 2.0, 3.0]))
    # 2W+ over {0, 2, ..., 12}: W+ = 0, 1, 2, 3, 3, 4, 5, 6
    assert counts[::2].tolist() == [1, 1, 1, 2, 1, 1, 1]
    assert counts.sum() == 8
    tied = signed_rank_distribution(np.array([1.5, 1.5]))
    assert tied.tolist() == [1, 0, 0, 2, 0, 0, 1]


def test_craving_levels_from_ratings():
    high = [("Meth02", 99.0), ("Meth03", 98.0), ("Meth04", 97.0), ("Meth05", 96.0), ("Meth13", 94.14)]
    medium = [("Meth20", 93.9), ("Meth21", 93.8), ("Meth22", 93.7), ("Meth23", 93.5), ("Meth98", 93.21)]
    low = [("Meth30", 93.0), ("Meth31", 92.9), ("Meth32", 92.5), ("Meth33", 92.3), ("Meth01", 92.07)]
    scores = low + high + medium
    labels = craving_level_labels(scores)
    assert labels["Meth13"] == CravingLevel.HIGH
    assert labels["Meth98"] == CravingLevel.MEDIUM
    assert labels["Meth01"] == CravingLevel.LOW
    assert list(labels)[:5] == [image_id for image_id, _ in high]
    assert sum(1 for level in labels.values() if level == CravingLevel.MEDIUM) == 5


def test_craving_levels_ties_and_sizes():
    three = [("b", 2.0), ("c", 1.0), ("a", 3.0)]
    assert list(craving_level_labels(three, allow_any_multiple=True).values()) == [
        CravingLevel.HIGH, CravingLevel.MEDIUM, CravingLevel.LOW]
    tied = [("y", 5.0), ("x", 5.0), ("z", 1.0)]
    for order in itertools.permutations(tied):
        labels = craving_level_labels(list(order), allow_any_multiple=True)
        assert labels == {"x": CravingLevel.HIGH, "y": CravingLevel.MEDIUM, "z": CravingLevel.LOW}
    with pytest.raises(DataError):
        craving_level_labels(three)
    with pytest.raises(DataError):
        craving_level_labels(three[:2], allow_any_multiple=True)
    with pytest.raises(DataError):
        craving_level_labels([("a", 1.0), ("a", 2.0), ("b", 3.0)], allow_any_multiple=True)
