import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermxkit.errors import ConfigError
from dermxkit.fusion import (
    FusionConfig, build_label_set, characteristic_sample_counts, downscale_fuzzy, fuse_labels,
    load_labels, prevalence_table, resize_map, save_labels, select_characteristics,
)

from conftest import ev, make_record

CHARS = ("plaque", "scale", "papule")


def random_fixture(rng, n_raters=8, shape=(4, 4), gold="psoriasis"):
    evs = []
    for k in range(n_raters):
        dx = gold if rng.random() < 0.6 else "acne"
        masks = {}
        for name in CHARS:
            r = rng.random()
            if r < 0.4:
                masks[name] = rng.random(shape) < 0.5
            elif r < 0.5:
                masks[name] = None  # tagged, not outlined
        evs.append(ev(f"r{k}", dx, masks))
    return make_record("img", gold, evs, shape=shape)


def brute_force(record, name):
    """Exact fraction per pixel, counted rater by rater."""
    contributors = [e for e in record.evaluations if e.diagnosis == record.gold_diagnosis]
    h, w = record.shape
    out = [[Fraction(0)] * w for _ in range(h)]
    if not contributors:
        return out, False
    for e in contributors:
        m = e.characteristic_masks.get(name)
        if m is None:
            continue
        for y in range(h):
            for x in range(w):
                if m[y][x]:
                    out[y][x] += Fraction(1, len(contributors))
    present = any(e.characteristic_masks.get(name) is not None for e in contributors)
    return out, present


def test_fuzzy_values_match_rational_enumeration():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        rec = random_fixture(rng)
        fused = fuse_labels(rec, CHARS)
        for ci, name in enumerate(CHARS):
            expected, present = brute_force(rec, name)
            mismatches += int(bool(fused.presence[ci]) != present)
            fm = fused.fuzzy_map(name)
            if fm is None:
                mismatches += int(any(v != 0 for row in expected for v in row))
                continue
            counts = fused.counts[name]
            for y, x in itertools.product(range(4), range(4)):
                mismatches += int(Fraction(int(counts[y, x]), fused.denominator) != expected[y][x])
                mismatches += int(fm.values[y, x] != float(expected[y][x]))
    assert mismatches == 0


def test_two_of_three_raters():
    m1 = np.zeros((2, 2), bool)
    m1[0, 0] = True
    evs = [ev("a", "acne", {"pustule": m1}), ev("b", "acne", {"pustule": m1}),
           ev("c", "acne", {"pustule": np.zeros((2, 2), bool)})]
    fused = fuse_labels(make_record("x", "acne", evs, shape=(2, 2)), ("pustule",))
    assert fused.fuzzy_map("pustule").values[0, 0] == pytest.approx(2 / 3)


def test_single_marking_rater_sets_presence():
    m = np.ones((2, 2), bool)
    evs = [ev("r0", "acne", {"pustule": m})] + [ev(f"r{k}", "acne") for k in range(1, 8)]
    fused = fuse_labels(make_record("x", "acne", evs, shape=(2, 2)), ("pustule",))
    assert fused.presence.tolist() == [1]
    assert fused.fuzzy_map("pustule").values.max() == pytest.approx(1 / 8)


def test_all_raters_wrong_gives_zero_presence():
    m = np.ones((2, 2), bool)
    evs = [ev(f"r{k}", "vitiligo", {"pustule": m}) for k in range(3)]
    fused = fuse_labels(make_record("x", "acne", evs, shape=(2, 2)), ("pustule", "plaque"))
    assert fused.presence.tolist() == [0, 0]
    assert fused.counts == {}


def test_tag_only_presence_is_configurable():
    evs = [ev("r0", "acne", {"pustule": None})]
    rec = make_record("x", "acne", evs, shape=(2, 2))
    assert fuse_labels(rec, ("pustule",)).presence.tolist() == [0]
    tagged = fuse_labels(rec, ("pustule",), FusionConfig(require_outline=False))
    assert tagged.presence.tolist() == [1]
    assert tagged.fuzzy_map("pustule") is None


def test_denominator_all():
    m = np.ones((2, 2), bool)
    evs = [ev("a", "acne", {"pustule": m}), ev("b", "vitiligo")]
    rec = make_record("x", "acne", evs, shape=(2, 2))
    assert fuse_labels(rec, ("pustule",)).fuzzy_map("pustule").values.max() == 1.0
    alt = fuse_labels(rec, ("pustule",), FusionConfig(denominator="all"))
    assert alt.fuzzy_map("pustule").values.max() == 0.5


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(denominator="some")
    with pytest.raises(ConfigError):
        FusionConfig(resize_mode="nearest")
    with pytest.raises(ValueError):
        fuse_labels(make_record("x", "acne", [ev("a", "acne")]), ())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_invariants(seed, rnd):
    rec = random_fixture(np.random.default_rng(seed))
    fused = fuse_labels(rec, CHARS)
    for ci, name in enumerate(CHARS):
        fm = fused.fuzzy_map(name)
        if fm is None:
            continue
        assert fm.values.max() <= 1.0
        # a map exists only where some contributor drew an outline
        assert fused.presence[ci] == 1
        contributors = rec.correct_evaluations()
        outlines = [e.mask(name) for e in contributors if name in e.outlined]
        if len(outlines) == len(contributors):
            unanimous = np.logical_and.reduce(outlines)
            assert np.all(fm.values[unanimous] == 1.0)
    for ci, name in enumerate(CHARS):
        if not fused.presence[ci]:
            assert name not in fused.counts
    shuffled = list(rec.evaluations)
    rnd.shuffle(shuffled)
    other = fuse_labels(make_record("img", rec.gold_diagnosis, shuffled, shape=rec.shape), CHARS)
    assert other.presence.tolist() == fused.presence.tolist()
    for name in fused.counts:
        np.testing.assert_array_equal(other.counts[name], fused.counts[name])


def _selection_fixture(n_common=40, n_rare=29, raters=3):
    """Every rater agrees; 'common' on n_common images, 'rare' on n_rare."""
    m = np.ones((2, 2), bool)
    recs = []
    for i in range(max(n_common, n_rare)):
        marks = {}
        if i < n_common:
            marks["common"] = m
        if i < n_rare:
            marks["rare"] = m
        recs.append(make_record(f"i{i:03d}", "acne", [ev(f"r{k}", "acne", marks) for k in range(raters)],
                                shape=(2, 2)))
    return recs


def test_selection_sample_threshold():
    recs = _selection_fixture()
    counts = characteristic_sample_counts(recs)
    assert counts == {"common": 40, "rare": 29}
    assert select_characteristics(recs, 30, 0.3) == ("common",)
    assert select_characteristics(recs, 29, 0.3) == ("common", "rare")
    assert select_characteristics(recs, 0, 0) == ("common", "rare")
    assert select_characteristics([], 0, 0) == ()


def test_selection_agreement_threshold():
    m = np.ones((2, 2), bool)
    recs = []
    for i in range(40):
        # r0 marks "noisy" on even images, r1 on odd: pairwise F1 = 0.
        evs = [ev("r0", "acne", {"noisy": m} if i % 2 == 0 else {}),
               ev("r1", "acne", {"noisy": m} if i % 2 == 1 else {})]
        recs.append(make_record(f"i{i:03d}", "acne", evs, shape=(2, 2)))
    assert select_characteristics(recs, 30, 0.3) == ()
    assert select_characteristics(recs, 30, 0.0) == ("noisy",)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 60), st.integers(0, 60), st.floats(0, 1), st.floats(0, 1))
def test_selection_monotone(s1, s2, f1, f2):
    recs = _selection_fixture(35, 31) + [
        make_record("z", "acne", [ev("r0", "acne", {"odd": np.ones((2, 2), bool)}), ev("r1", "acne")], shape=(2, 2))
    ]
    lo = set(select_characteristics(recs, min(s1, s2), min(f1, f2)))
    hi = set(select_characteristics(recs, max(s1, s2), max(f1, f2)))
    assert hi <= lo


def test_resize_examples():
    assert resize_map(np.array([[1.0, 0.0], [0.0, 1.0]]), (1, 1))[0, 0] == pytest.approx(0.5, abs=1e-12)
    const = np.full((7, 5), 0.5)
    for target in [(3, 2), (9, 9), (1, 1), (14, 10)]:
        np.testing.assert_allclose(resize_map(const, target), 0.5, atol=1e-12)
    x = np.random.default_rng(0).random((4, 6))
    np.testing.assert_array_equal(resize_map(x, (4, 6)), x)
    up = resize_map(resize_map(np.full((8, 8), 0.25), (3, 3)), (8, 8))
    np.testing.assert_allclose(up, 0.25, atol=1e-12)
    np.testing.assert_allclose(resize_map(const, (3, 2), mode="area"), 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        resize_map(const, (0, 2))


def test_downscale_clips():
    out = downscale_fuzzy(np.random.default_rng(1).random((16, 16)), (5, 5))
    assert out.shape == (5, 5) and out.min() >= 0 and out.max() <= 1


def test_prevalence(caplog):
    recs = [make_record(f"a{i}", "acne", [ev("r", "acne", {"plaque": None}), ev("s", "vitiligo", {"scale": None})])
            for i in range(3)]
    table = prevalence_table(recs, ("plaque", "scale"))
    assert table["acne", "plaque"] == 1.0
    assert table["acne", "scale"] == 0.0
    assert table.values[table.diseases.index("vitiligo")].tolist() == [0.0, 0.0]
    assert "prevalence row is zero" in caplog.text
    assert table.expected("acne", 0.05) == frozenset({"plaque"})
    assert table.rows()[0] == ["plaque", 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]


def test_label_bundle_round_trip(tmp_path, blobs, blob_labels):
    h1 = save_labels(tmp_path / "l.npz", blob_labels)
    assert h1 == save_labels(tmp_path / "m.npz", blob_labels)
    loaded = load_labels(tmp_path / "l.npz")
    assert loaded.content_hash == h1
    assert loaded.characteristics == blob_labels.characteristics
    np.testing.assert_array_equal(loaded.prevalence.values, blob_labels.prevalence.values)
    for a, b in zip(loaded.items, blob_labels.items):
        assert a.image_id == b.image_id and a.denominator == b.denominator
        np.testing.assert_array_equal(a.presence, b.presence)
        for name in b.counts:
            np.testing.assert_array_equal(a.fuzzy_map(name).values, b.fuzzy_map(name).values)
        np.testing.assert_array_equal(loaded.image(a.image_id), blob_labels.image(b.image_id))
    assert math.isclose(sum(loaded.sample_counts.values()), sum(blob_labels.sample_counts.values()))


def test_build_label_set_sorted(blobs):
    labels = build_label_set(list(reversed(blobs.records)), blobs.characteristics)
    ids = [it.image_id for it in labels.items]
    assert ids == sorted(ids)
