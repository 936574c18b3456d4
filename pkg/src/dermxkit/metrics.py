"""Fuzzy overlap metrics, confusion-matrix metrics, Cohen's kappa, aggregation.

Undefined values (zero denominators) are returned as ``nan`` and are
excluded from aggregates, which report how many were dropped.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

NAN = math.nan


@dataclass(frozen=True)
class AttentionMap:
    values: np.ndarray  # h x w, in [0, 1]
    characteristic: str
    image_id: str

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeError(f"attention map must be 2-D, got shape {v.shape}")
        if v.size and (np.nanmin(v) < 0 or np.nanmax(v) > 1):
            raise ValueError("attention map values must lie in [0, 1]")


def _values(x):
    # AttentionMap / FuzzyMask carry their array in .values
    return getattr(x, "values", x)


def _pair(A, M):
    A = np.asarray(_values(A), dtype=np.float64)
    M = np.asarray(_values(M), dtype=np.float64)
    if A.shape != M.shape:
        raise ShapeError(f"attention map {A.shape} and reference map {M.shape} differ in shape")
    return A, M


def _div(num, den):
    return float(num / den) if den > 0 else NAN


@dataclass(frozen=True)
class FuzzySums:
    """Sufficient statistics for the fuzzy metrics; add them to pool pixels."""

    inter: float
    sum_a: float
    sum_m: float
    inter_neg: float
    sum_not_m: float

    def __add__(self, other):
        return FuzzySums(*(a + b for a, b in zip(self.astuple(), other.astuple())))

    def astuple(self):
        return (self.inter, self.sum_a, self.sum_m, self.inter_neg, self.sum_not_m)

    @property
    def f1(self):
        return _div(2.0 * self.inter, self.sum_a + self.sum_m)

    @property
    def sensitivity(self):
        return _div(self.inter, self.sum_m)

    @property
    def specificity(self):
        return _div(self.inter_neg, self.sum_not_m)


def fuzzy_sums(A, M):
    A, M = _pair(A, M)
    return FuzzySums(
        inter=float(np.minimum(A, M).sum()),
        sum_a=float(A.sum()),
        sum_m=float(M.sum()),
        inter_neg=float(np.minimum(1.0 - A, 1.0 - M).sum()),
        sum_not_m=float((1.0 - M).sum()),
    )


def fuzzy_f1(A, M):
    """2 * sum(min(A, M)) / (sum(A) + sum(M)); nan when both maps are empty."""
    return fuzzy_sums(A, M).f1


def fuzzy_sensitivity(A, M):
    return fuzzy_sums(A, M).sensitivity


def fuzzy_specificity(A, M):
    return fuzzy_sums(A, M).specificity


@dataclass(frozen=True)
class BinaryMetrics:
    f1: float
    sensitivity: float
    specificity: float
    support: int

    FIELDS = ("f1", "sensitivity", "specificity", "support")

    def astuple(self):
        return (self.f1, self.sensitivity, self.specificity, self.support)


def confusion(pred, target):
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    tp = int(np.sum(pred & target))
    fp = int(np.sum(pred & ~target))
    fn = int(np.sum(~pred & target))
    tn = int(np.sum(~pred & ~target))
    return tp, fp, fn, tn


def binary_prf(pred, target):
    tp, fp, fn, tn = confusion(pred, target)
    return BinaryMetrics(
        f1=_div(2 * tp, 2 * tp + fp + fn),
        sensitivity=_div(tp, tp + fn),
        specificity=_div(tn, tn + fp),
        support=tp + fn,
    )


def cohens_kappa(a, b):
    """Cohen's kappa for two binary raters; nan when chance agreement is 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"rater vectors differ in shape: {a.shape} vs {b.shape}")
    n = a.size
    if n == 0:
        raise ValueError("cohens_kappa needs at least one item")
    p_o = np.mean(a == b)
    pa, pb = a.mean(), b.mean()
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if math.isclose(p_e, 1.0):
        return NAN
    return float((p_o - p_e) / (1 - p_e))


def macro_f1(pred_labels, true_labels, classes):
    """Unweighted mean of one-vs-rest F1 over ``classes`` present in either vector."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    scores = []
    for c in classes:
        f1 = binary_prf(pred_labels == c, true_labels == c).f1
        if not math.isnan(f1):
            scores.append(f1)
    return float(np.mean(scores)) if scores else NAN


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int
    excluded: int = 0

    def __str__(self):
        return format_mean_std(self.mean, self.std)


def format_mean_std(mean, std, digits=2):
    if math.isnan(mean):
        return "NA"
    if math.isnan(std):
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def aggregate(values, ddof=0):
    """Mean and standard deviation of the defined entries of ``values``.

    ``ddof=0`` is the population std (the convention used for the reported
    fold and rater spreads); ``ddof=1`` gives the sample std, which is nan
    for a single value.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    defined = arr[~np.isnan(arr)]
    excluded = int(arr.size - defined.size)
    n = int(defined.size)
    if n == 0:
        return Summary(NAN, NAN, 0, excluded)
    std = float(np.std(defined, ddof=ddof)) if n > ddof else NAN
    return Summary(float(np.mean(defined)), std, n, excluded)


def aggregate_groups(groups, ddof=0):
    """Aggregate a ``{group: values}`` mapping; groups with no defined value are omitted."""
    out = {}
    for key, values in groups.items():
        summary = aggregate(values, ddof=ddof)
        if summary.n == 0:
            logger.warning("no defined values for %r; row omitted", key)
            continue
        out[key] = summary
    return out
