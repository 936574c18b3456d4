import math

import numpy as np
import pytest

from dermxkit.agreement import agreement_report, binary_agreement, diagnosis_agreement, localization_agreement

from conftest import ev, make_record

R1 = [1, 1, 1, 1, 0, 0, 0, 0]
R2 = [1, 1, 0, 0, 1, 0, 0, 0]
R3 = R1


def three_raters():
    recs = []
    for i in range(8):
        evs = [ev(name, "psoriasis", {"plaque": None} if bits[i] else {})
               for name, bits in (("r1", R1), ("r2", R2), ("r3", R3))]
        recs.append(make_record(f"i{i}", "psoriasis", evs))
    return recs


def test_pairwise_values_hand_computed():
    out = binary_agreement(three_raters(), ["plaque"])["plaque"]
    # r1 vs r2: tp=2 fp=2 fn=1 tn=3 -> F1 4/7; p_o=5/8, p_e=1/2 -> kappa 1/4
    assert out.pair_values[("r1", "r2")] == (4 / 7, 0.25)
    assert out.pair_values[("r1", "r3")] == (1.0, 1.0)
    assert out.pair_values[("r2", "r3")] == (4 / 7, 0.25)
    assert out.f1.mean == pytest.approx((4 / 7 + 1 + 4 / 7) / 3, abs=1e-15)
    assert out.kappa.mean == pytest.approx(0.5, abs=1e-15)
    assert out.pairs == 3
    assert out.selection.mean == pytest.approx(11 / 3)


def test_identical_raters_agree_perfectly():
    recs = []
    for i in range(6):
        marks = {"scale": None} if i % 2 else {}
        recs.append(make_record(f"i{i}", "psoriasis", [ev("a", "psoriasis", marks), ev("b", "psoriasis", marks)]))
    out = binary_agreement(recs, ["scale"])["scale"]
    assert out.f1.mean == 1.0 and out.kappa.mean == 1.0


def test_only_co_evaluated_images_count():
    recs = [
        make_record("x", "acne", [ev("a", "acne", {"papule": None}), ev("b", "acne", {"papule": None})]),
        make_record("y", "acne", [ev("a", "acne", {"papule": None}), ev("c", "acne")]),
    ]
    out = binary_agreement(recs, ["papule"])["papule"]
    assert set(out.pair_values) == {("a", "b"), ("a", "c")}  # b and c share no image


def test_diagnosis_vs_gold():
    recs = [make_record(f"i{i}", g, [ev("a", g), ev("b", "acne")])
            for i, g in enumerate(["acne", "acne", "vitiligo", "psoriasis"])]
    rep = diagnosis_agreement(recs)
    a = rep.per_rater["a"]
    assert all(a[d].f1 == 1.0 for d in ("acne", "vitiligo", "psoriasis"))
    assert math.isnan(a["viral warts"].f1)
    b = rep.per_rater["b"]["acne"]
    assert (b.f1, b.sensitivity, b.specificity) == (pytest.approx(2 / 3), 1.0, 0.0)
    assert rep.selections["b"]["acne"] == 4
    assert rep.f1["acne"].mean == pytest.approx((1 + 2 / 3) / 2)


def test_localization_agreement():
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    n = np.zeros((4, 4), bool)
    n[:2, :3] = True
    recs = [
        make_record("i0", "acne", [ev("a", "acne", {"pustule": m}), ev("b", "vitiligo", {"pustule": m})]),
        make_record("i1", "acne", [ev("a", "acne", {"pustule": m}), ev("b", "acne", {"pustule": n})]),
        make_record("i2", "acne", [ev("a", "acne", {"pustule": m}), ev("b", "acne")]),
    ]
    out = localization_agreement(recs, ["pustule"])["pustule"]
    assert out.images == 2 and out.pairs == 1
    # per-image F1 1 and 2*4/(4+6) = 0.8; averaged within the pair
    assert out.f1.mean == pytest.approx(0.9)
    assert out.sensitivity.mean == pytest.approx((1 + (1 + 4 / 6) / 2) / 2)


def test_report_bundles_sections(blobs):
    rep = agreement_report(blobs.records)
    assert set(rep.characteristics) == set(blobs.characteristics)
    assert rep.notes["std"] == "population"
    assert 0 <= rep.diagnosis.mean_f1.mean <= 1
