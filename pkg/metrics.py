"""
Classification metrics, their aggregation over folds, the Wilcoxon signed-rank
test and craving-level labeling of image ratings.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

from errors import DataError, DegenerateDataError, ShapeError
from signalio import CravingLevel

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "sensitivity", "precision", "recall", "f1", "macro_precision", "macro_recall",
                "macro_f1", "micro_precision", "micro_recall", "micro_f1")


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def _f1(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricsReport:
    """
    Confusion-matrix metrics of one prediction set.

    precision/recall/f1 are those of the positive class for binary tasks and
    macro averages otherwise. Metrics that are undefined for the data (e.g.
    sensitivity without positive examples) are None.
    """

    n: int
    n_classes: int
    positive_class: int
    confusion: np.ndarray
    accuracy: float
    sensitivity: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def percent(self) -> Dict[str, Optional[float]]:
        return {name: None if value is None else 100.0 * value for name, value in self.as_dict().items()}


def compute_metrics(preds: Sequence[int], labels: Sequence[int], positive_class: int = 1,
                    n_classes: Optional[int] = None) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ShapeError(f"predictions {preds.shape} and labels {labels.shape} must be equal-length vectors")
    if preds.size == 0:
        raise DataError("cannot score an empty prediction set")
    if n_classes is None:
        n_classes = max(2, int(max(preds.max(), labels.max())) + 1)
    for name, values in (("label", labels), ("prediction", preds)):
        if values.min() < 0 or values.max() >= n_classes:
            raise DataError(f"{name} outside the class set 0..{n_classes - 1}: {sorted(set(values.tolist()))}")
    if not 0 <= positive_class < n_classes:
        raise DataError(f"positive class {positive_class} outside 0..{n_classes - 1}")

    classes = np.arange(n_classes)
    confusion = confusion_matrix(labels, preds, labels=classes)
    tp = np.diag(confusion).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    accuracy = float(accuracy_score(labels, preds))

    # Macro averages run over the classes seen in labels or predictions; an
    # undefined per-class ratio counts as 0.
    seen = classes[(actual > 0) | (predicted > 0)]
    macro_precision, macro_recall, macro_f1 = (float(v) for v in precision_recall_fscore_support(
        labels, preds, labels=seen, average="macro", zero_division=0)[:3])
    micro_precision, micro_recall, micro_f1 = (float(v) for v in precision_recall_fscore_support(
        labels, preds, labels=classes, average="micro", zero_division=0)[:3])

    sensitivity = _ratio(tp[positive_class], actual[positive_class])
    if n_classes == 2:
        precision = _ratio(tp[positive_class], predicted[positive_class])
        recall = sensitivity
        f1 = _f1(precision, recall)
    else:
        precision, recall, f1 = macro_precision, macro_recall, macro_f1
    return MetricsReport(int(preds.size), n_classes, positive_class, confusion, accuracy, sensitivity, precision,
                         recall, f1, macro_precision, macro_recall, macro_f1, micro_precision, micro_recall, micro_f1)


@dataclass(frozen=True)
class FoldResult:
    fold: int
    test_subjects: Tuple[int, ...]
    preds: np.ndarray
    labels: np.ndarray
    metrics: MetricsReport


@dataclass
class CrossValReport:
    """
    Per-fold metrics with mean and sample standard deviation across folds.

    Under leave-one-subject-out the mean is the subject average. Undefined fold
    values are left out of mean and sd; `pooled` scores all test predictions at once.
    """

    scheme: str
    task_id: str
    folds: List[FoldResult]
    pooled: MetricsReport
    mean: Dict[str, Optional[float]] = field(default_factory=dict)
    sd: Dict[str, Optional[float]] = field(default_factory=dict)

    @staticmethod
    def from_folds(scheme: str, task_id: str, folds: Sequence[FoldResult], positive_class: int,
                   n_classes: int) -> "CrossValReport":
        folds = list(folds)
        pooled = compute_metrics(np.concatenate([f.preds for f in folds]), np.concatenate([f.labels for f in folds]),
                                 positive_class, n_classes)
        mean, sd = {}, {}
        for name in METRIC_NAMES:
            values = [getattr(f.metrics, name) for f in folds if getattr(f.metrics, name) is not None]
            mean[name] = float(np.mean(values)) if values else None
            sd[name] = float(np.std(values, ddof=1)) if len(values) > 1 else (0.0 if values else None)
        return CrossValReport(scheme, task_id, folds, pooled, mean, sd)

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def summary_lines(self) -> List[str]:
        lines = [f"{self.task_id} ({self.scheme}, {self.n_folds} folds)"]
        for name in ("accuracy", "sensitivity", "precision", "recall", "f1"):
            if self.mean[name] is None:
                lines.append(f"  {name}: undefined")
            else:
                lines.append(f"  {name}: {100 * self.mean[name]:.2f} +- {100 * self.sd[name]:.2f} %")
        return lines

    def fold_rows(self) -> List[dict]:
        rows = []
        for f in self.folds:
            row = {"fold": f.fold, "test_subjects": " ".join(str(s) for s in f.test_subjects), "n_test": f.metrics.n}
            row.update(f.metrics.as_dict())
            rows.append(row)
        return rows


# Wilcoxon signed-rank test.

@dataclass(frozen=True)
class WilcoxonResult:
    """
    Attributes:
        statistic: W+, the rank sum of the positive differences (post - pre)
        p_value: two-sided p
        n_effective: number of non-zero differences
        method: "exact" or "normal"
    """

    statistic: float
    p_value: float
    n_effective: int
    method: str


def signed_rank_distribution(ranks: np.ndarray) -> np.ndarray:
    """
    Number of sign assignments giving each value of 2*W+.

    Ranks may be mid-ranks, so the sums are tracked on the doubled (integer) scale.
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def _exact_p(ranks: np.ndarray, w_plus: float) -> float:
    counts = signed_rank_distribution(ranks)
    center = (counts.size - 1) / 2.0
    observed = abs(round(2 * w_plus) - center)
    extreme = np.abs(np.arange(counts.size) - center) >= observed - 1e-9
    return min(1.0, counts[extreme].sum() / float(2 ** ranks.size))


def _normal_p(ranks: np.ndarray, w_plus: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = max(0.0, abs(w_plus - mean) - 0.5) / np.sqrt(var)
    return min(1.0, 2.0 * stats.norm.sf(z))


def wilcoxon_signed_rank(pre: Sequence[float], post: Sequence[float], exact_max_n: int = 20) -> WilcoxonResult:
    """
    Two-sided signed-rank test of post - pre. Zero differences are dropped and
    ties get mid-ranks; n <= exact_max_n uses the exact null distribution, larger
    samples the tie-corrected normal approximation with continuity correction.
    """
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if pre.shape != post.shape or pre.ndim != 1:
        raise ShapeError(f"paired samples must be equal-length vectors, got {pre.shape} and {post.shape}")
    diffs = post - pre
    diffs = diffs[diffs != 0]
    if diffs.size == 0:
        raise DegenerateDataError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    if diffs.size <= exact_max_n:
        return WilcoxonResult(w_plus, float(_exact_p(ranks, w_plus)), int(diffs.size), "exact")
    return WilcoxonResult(w_plus, float(_normal_p(ranks, w_plus)), int(diffs.size), "normal")


# Craving levels.

LEVELS_BY_RANK = (CravingLevel.HIGH, CravingLevel.MEDIUM, CravingLevel.LOW)


def craving_level_labels(scores: Sequence[Tuple[str, float]], allow_any_multiple: bool = False
                         ) -> Dict[str, CravingLevel]:
    """
    Ranks images by craving score (descending, ties by image id) and labels the
    top, middle and bottom thirds high, medium and low. Expects 15 images unless
    allow_any_multiple is set. The result is ordered by rank.
    """
    n = len(scores)
    if n == 0 or n % 3:
        raise DataError(f"need a multiple of 3 rated images, got {n}")
    if n != 15 and not allow_any_multiple:
        raise DataError(f"expected 15 rated images, got {n}")
    ids = [image_id for image_id, _ in scores]
    if len(set(ids)) != n:
        raise DataError("image ids are not unique")
    ranked = sorted(scores, key=lambda item: (-float(item[1]), item[0]))
    third = n // 3
    return {image_id: LEVELS_BY_RANK[rank // third] for rank, (image_id, _) in enumerate(ranked)}
