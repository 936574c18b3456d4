import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dermxkit.errors import ShapeError
from dermxkit.metrics import (
    AttentionMap, FuzzySums, aggregate, aggregate_groups, binary_prf, cohens_kappa, confusion,
    format_mean_std, fuzzy_f1, fuzzy_sensitivity, fuzzy_specificity, fuzzy_sums, macro_f1,
)

A_EX = np.array([[1, 0], [0.5, 0]])
M_EX = np.array([[0.5, 1], [0.5, 0]])


def oracle(A, M):
    """Direct pixel loop with exact rationals; nan for a zero denominator."""
    inter = num_neg = sa = sm = den_neg = Fraction(0)
    for a, m in zip(np.ravel(A), np.ravel(M)):
        a, m = Fraction(float(a)), Fraction(float(m))
        inter += min(a, m)
        num_neg += min(1 - a, 1 - m)
        sa += a
        sm += m
        den_neg += 1 - m
    f1 = float(2 * inter / (sa + sm)) if sa + sm else math.nan
    sens = float(inter / sm) if sm else math.nan
    spec = float(num_neg / den_neg) if den_neg else math.nan
    return f1, sens, spec


def close(a, b, tol=1e-9):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol


quarter_grids = st.integers(1, 8).flatmap(
    lambda h: st.integers(1, 8).flatmap(
        lambda w: st.tuples(
            arrays(np.float64, (h, w), elements=st.sampled_from([0, 0.25, 0.5, 0.75, 1.0])),
            arrays(np.float64, (h, w), elements=st.sampled_from([0, 0.25, 0.5, 0.75, 1.0])),
        )
    )
)


def test_worked_example():
    assert fuzzy_f1(A_EX, M_EX) == pytest.approx(2 * 1.0 / 3.5, abs=1e-12)
    assert fuzzy_sensitivity(A_EX, M_EX) == pytest.approx(0.5, abs=1e-12)
    assert fuzzy_specificity(A_EX, M_EX) == pytest.approx(0.75, abs=1e-12)


def test_identical_and_disjoint_maps():
    M = np.array([[0.2, 0.0], [1.0, 0.6]])
    assert fuzzy_f1(M, M) == pytest.approx(1.0)
    assert fuzzy_sensitivity(M, M) == pytest.approx(1.0)
    assert fuzzy_specificity(M, M) == pytest.approx(1.0)
    assert fuzzy_f1(np.zeros_like(M), M) == 0.0
    B = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert fuzzy_sensitivity(1 - B, B) == 0.0


def test_undefined_denominators():
    Z = np.zeros((3, 3))
    assert math.isnan(fuzzy_f1(Z, Z))
    assert math.isnan(fuzzy_sensitivity(Z, Z))
    assert math.isnan(fuzzy_specificity(Z, np.ones((3, 3))))


def test_shape_mismatch_is_an_error():
    with pytest.raises(ShapeError):
        fuzzy_f1(np.zeros((2, 2)), np.zeros((2, 3)))


def test_accepts_map_objects():
    A = AttentionMap(A_EX, "plaque", "img")
    assert fuzzy_f1(A, M_EX) == fuzzy_f1(A_EX, M_EX)
    with pytest.raises(ValueError):
        AttentionMap(np.array([[1.5]]), "plaque", "img")
    with pytest.raises(ShapeError):
        AttentionMap(np.zeros(3), "plaque", "img")


@settings(max_examples=300, deadline=None)
@given(quarter_grids)
def test_matches_direct_transcription(pair):
    A, M = pair
    f1, sens, spec = oracle(A, M)
    assert close(fuzzy_f1(A, M), f1)
    assert close(fuzzy_sensitivity(A, M), sens)
    assert close(fuzzy_specificity(A, M), spec)


@settings(max_examples=200, deadline=None)
@given(quarter_grids)
def test_f1_symmetric_and_bounded(pair):
    A, M = pair
    f = fuzzy_f1(A, M)
    assert close(f, fuzzy_f1(M, A), 1e-12)
    assert math.isnan(f) or 0.0 <= f <= 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.data())
def test_binary_grids_equal_confusion_dice(h, w, data):
    A = data.draw(arrays(np.bool_, (h, w)))
    M = data.draw(arrays(np.bool_, (h, w)))
    tp, fp, fn, _ = confusion(A, M)
    dice = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else math.nan
    f = fuzzy_f1(A.astype(float), M.astype(float))
    assert (math.isnan(f) and math.isnan(dice)) or f == dice


def test_sums_pool_additively():
    s = fuzzy_sums(A_EX, M_EX) + fuzzy_sums(M_EX, M_EX)
    assert isinstance(s, FuzzySums)
    both = fuzzy_sums(np.concatenate([A_EX, M_EX]), np.concatenate([M_EX, M_EX]))
    assert s.f1 == pytest.approx(both.f1)


def test_binary_prf_examples():
    m = binary_prf([1, 1, 0, 0], [1, 0, 1, 0])
    assert (m.f1, m.sensitivity, m.specificity, m.support) == (0.5, 0.5, 0.5, 2)
    perfect = binary_prf([1, 0, 1], [1, 0, 1])
    assert perfect.astuple()[:3] == (1.0, 1.0, 1.0)
    neg = binary_prf([0, 1, 0], [0, 0, 0])
    assert math.isnan(neg.sensitivity)
    assert neg.specificity == pytest.approx(2 / 3)
    with pytest.raises(ShapeError):
        binary_prf([1, 0], [1])


def test_kappa_examples():
    assert cohens_kappa([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert cohens_kappa([1, 1, 0, 0], [1, 0, 1, 0]) == 0.0
    assert math.isnan(cohens_kappa([1, 1, 1], [1, 1, 1]))


def test_macro_f1_skips_absent_classes():
    assert macro_f1([0, 1, 1], [0, 1, 1], range(5)) == 1.0
    assert macro_f1([0, 0], [1, 1], [0, 1]) == 0.0


def test_aggregate_conventions():
    s = aggregate([0.5, 0.5, 0.5])
    assert (s.mean, s.std, s.n) == (0.5, 0.0, 3)
    one = aggregate([0.3])
    assert one.std == 0.0
    assert math.isnan(aggregate([0.3], ddof=1).std)
    with_nan = aggregate([1.0, math.nan, 0.0])
    assert (with_nan.mean, with_nan.n, with_nan.excluded) == (0.5, 2, 1)
    assert math.isnan(aggregate([]).mean)


def test_population_std_reproduces_reported_spread():
    # Per-characteristic rater-agreement F1 means and their reported
    # summary "0.63 ± 0.16"; the sample std would round to 0.17.
    f1 = [0.36, 0.54, 0.65, 0.67, 0.76, 0.78, 0.76, 0.89, 0.46, 0.46]
    assert str(aggregate(f1)) == "0.63 ± 0.16"
    assert format_mean_std(aggregate(f1, ddof=1).mean, aggregate(f1, ddof=1).std) == "0.63 ± 0.17"


def test_aggregate_groups_omits_empty(caplog):
    out = aggregate_groups({"a": [1.0, 0.0], "b": [math.nan]})
    assert list(out) == ["a"]
    assert "omitted" in caplog.text
