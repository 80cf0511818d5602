from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agelab import data
from agelab.data import LabelRecord
from agelab.synth import REFERENCE_COUNTS, reference_roster
from oracles import mean_std_two_pass

HEADER = "subject_id,image_path,age,gender,race\n"


def _manifest(tmp_path, body, header=HEADER):
    p = tmp_path / "labels.csv"
    p.write_text(header + body)
    return p


# -- manifests -----------------------------------------------------------------

def test_load_labels_good_and_bad_rows(tmp_path):
    path = _manifest(tmp_path, "s1,a.pgm,30,m,b\n"
                               "s1,b.pgm,15,M,B\n"
                               "s2,c.pgm,x,F,W\n"
                               "s3,d.pgm,40,X,W\n"
                               "s4,e.pgm,40,F,Q\n"
                               "s5,a.pgm,41,F,W\n"
                               ",f.pgm,41,F,W\n"
                               "s6,g.pgm,77,F,O\n")
    records, rejects = data.load_labels(path)
    assert [r.image_path for r in records] == ["a.pgm", "g.pgm"]
    assert records[0] == LabelRecord("s1", "a.pgm", 30, "M", "B")
    assert [r.line for r in rejects] == [3, 4, 5, 6, 7, 8]
    assert "outside" in rejects[0].reason
    assert "duplicate" in rejects[4].reason


def test_missing_column_is_fatal(tmp_path):
    path = _manifest(tmp_path, "s1,a.pgm,30,M\n", header="subject_id,image_path,age,gender\n")
    with pytest.raises(data.ManifestFormatError, match="race"):
        data.load_labels(path)


def test_write_then_load_round_trip(tmp_path):
    recs = [LabelRecord("a", "x.pgm", 20, "F", "W", "1990-01-01"), LabelRecord("b", "y.pgm", 50, "M", "O")]
    data.write_labels(recs, tmp_path / "m.csv")
    back, rejects = data.load_labels(tmp_path / "m.csv")
    assert back == recs and not rejects


# -- cleaning ------------------------------------------------------------------

def _rec(sid, n, gender="M", race="B"):
    return LabelRecord(sid, f"{sid}_{n}.pgm", 30, gender, race)


def test_majority_vote_fixes_a_minority_label():
    recs = [_rec("a", 0), _rec("a", 1), _rec("a", 2, gender="F"), _rec("b", 0, race="W")]
    report = data.detect_inconsistencies(recs)
    assert list(report.rows()) == [("a", "gender", "F|M")]
    res = data.clean_labels(recs, report)
    assert [r.gender for r in res.records] == ["M", "M", "M", "M"]
    assert not res.quarantined
    assert not data.detect_inconsistencies(res.records)


def test_tie_quarantines_the_subject():
    recs = [_rec("a", 0, race="B"), _rec("a", 1, race="W"), _rec("b", 0)]
    res = data.clean_labels(recs)
    assert [r.subject_id for r in res.quarantined] == ["a", "a"]
    assert [r.subject_id for r in res.records] == ["b"]


def test_override_beats_majority_and_unknown_subject_warns():
    recs = [_rec("a", 0), _rec("a", 1), _rec("a", 2, gender="F")]
    res = data.clean_labels(recs, overrides=[("a", "gender", "F"), ("zz", "gender", "M")])
    assert {r.gender for r in res.records} == {"F"}
    assert len(res.warnings) == 1 and "zz" in res.warnings[0]


def test_override_file(tmp_path):
    p = tmp_path / "ov.csv"
    p.write_text("subject_id,field,value\na,gender,f\n")
    assert data.load_overrides(p) == [("a", "gender", "F")]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("MF"), st.sampled_from("BWO")),
                min_size=1, max_size=30))
def test_cleaning_is_idempotent_and_leaves_no_conflicts(rows):
    recs = [LabelRecord(s, f"{i}.pgm", 30, g, r) for i, (s, g, r) in enumerate(rows)]
    res = data.clean_labels(recs)
    assert len(res.records) + len(res.quarantined) == len(recs)
    assert not data.detect_inconsistencies(res.records)
    again = data.clean_labels(res.records)
    assert again.records == res.records and not again.quarantined


# -- subsetting ----------------------------------------------------------------

def test_table_one_roster_marginals():
    roster = reference_roster(seed=0)
    assert len(roster) == 55_134
    for gender, bins in REFERENCE_COUNTS.items():
        for (lo, hi), count in bins.items():
            assert sum(1 for r in roster if r.gender == gender and lo <= r.age <= hi) == count


def test_table_one_split_sizes():
    split = data.guo_mu_subset(reference_roster(seed=0), seed=0)
    # S3 is everything left over: 55,134 - 2 * 10,280
    assert split.sizes() == (10_280, 10_280, 34_574)
    for s in (split.s1, split.s2):
        c = Counter(r.gender for r in s)
        assert (c["M"], c["F"]) == (7710, 2570)
        assert {r.race for r in s} <= {"B", "W"}


def _partition_ok(records, split):
    paths = [r.image_path for r in split.s1 + split.s2 + split.s3]
    return sorted(paths) == sorted(r.image_path for r in records) and len(set(paths)) == len(paths)


def test_partition_property_on_random_rosters():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(200, 600))
        recs = [LabelRecord(f"s{i // 3}", f"{i}.pgm", int(rng.integers(16, 78)),
                            "M" if rng.random() < 0.8 else "F", str(rng.choice(["B", "W", "O"], p=[.7, .2, .1])))
                for i in range(n)]
        split = data.guo_mu_subset(recs, seed=trial, size=40)
        assert _partition_ok(recs, split)
        assert split.sizes()[:2] == (40, 40)
        for s in (split.s1, split.s2):
            assert Counter(r.gender for r in s) == Counter({"M": 30, "F": 10})


def test_subset_is_deterministic_and_seed_dependent():
    roster = reference_roster(seed=1)[::20]
    a = data.guo_mu_subset(roster, seed=3)
    b = data.guo_mu_subset(roster, seed=3)
    c = data.guo_mu_subset(roster, seed=4)
    assert a == b and a.s1 != c.s1


def test_subset_too_small_raises():
    recs = [_rec("a", i) for i in range(10)]
    with pytest.raises(data.SizingError):
        data.guo_mu_subset(recs, size=8)


def test_strict_subject_mode_keeps_subjects_together():
    roster = reference_roster(seed=2)[::10]
    split = data.guo_mu_subset(roster, seed=0, strict_subjects=True)
    owners = [{r.subject_id for r in s} for s in (split.s1, split.s2, split.s3)]
    assert not owners[0] & owners[1] and not owners[0] & owners[2] and not owners[1] & owners[2]
    assert _partition_ok(roster, split)


# -- images ---------------------------------------------------------------------

def test_pgm_byte_layout(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n# a comment\n3 2\n255\n" + bytes([0, 1, 2, 10, 20, 255]))
    img = data.read_netpbm(p)
    assert img.shape == (1, 2, 3) and img.dtype == np.uint8
    np.testing.assert_array_equal(img[0], [[0, 1, 2], [10, 20, 255]])


def test_ppm_channel_order(tmp_path):
    p = tmp_path / "t.ppm"
    p.write_bytes(b"P6 2 1 255\n" + bytes([1, 2, 3, 4, 5, 6]))
    img = data.read_netpbm(p)
    np.testing.assert_array_equal(img[:, 0, :], [[1, 4], [2, 5], [3, 6]])


@pytest.mark.parametrize("payload", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"])
def test_bad_netpbm(tmp_path, payload):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(data.ImageFormatError):
        data.read_netpbm(p)


def test_netpbm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7), dtype=np.uint8)
    data.write_netpbm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(data.read_netpbm(tmp_path / "x.ppm"), img)


def test_resize_constant_and_corners():
    const = np.full((1, 7, 9), 42.0)
    np.testing.assert_allclose(data.resize_bilinear(const, 4, 5), 42.0)
    ramp = np.arange(12, dtype=float).reshape(1, 3, 4)
    out = data.resize_bilinear(ramp, 5, 7)
    assert out[0, 0, 0] == 0 and out[0, -1, -1] == 11
    # corner-aligned: the middle of the output hits the middle of the input
    assert out[0, 2, 3] == pytest.approx(ramp[0].mean())


# -- standardisation --------------------------------------------------------------

def test_stats_of_two_values():
    s = data.compute_standardization_stats(np.array([0.0, 255.0]))
    assert (s.mean, s.std) == (127.5, 127.5)


def test_stats_match_two_pass_oracle_and_merge_batches():
    rng = np.random.default_rng(1)
    batches = [rng.integers(0, 256, (int(rng.integers(1, 5)), 1, 6, 6)).astype(np.float32) for _ in range(7)]
    merged = data.compute_standardization_stats(batches)
    mean, std = mean_std_two_pass(np.concatenate([b.ravel() for b in batches]))
    assert merged.mean == pytest.approx(mean, rel=1e-12)
    assert merged.std == pytest.approx(std, rel=1e-12)


def test_standardizing_by_own_stats():
    x = np.random.default_rng(2).integers(0, 256, (20, 1, 16, 16)).astype(np.float32)
    z = data.standardize(x, data.compute_standardization_stats(x)).astype(np.float64)
    assert abs(z.mean()) <= 1e-6
    assert abs(z.std() - 1) <= 1e-6


def test_reference_stats_map_known_pixels():
    ref = data.StandardizationStats(142.46, 59.85)
    assert data.standardize(np.array([142.46]), ref)[0] == pytest.approx(0.0, abs=1e-6)
    assert data.standardize(np.array([202.31]), ref)[0] == pytest.approx(1.0, abs=1e-6)
    assert data.zero_center(np.array([142.46]), 142.46)[0] == pytest.approx(0.0, abs=1e-6)
    assert data.unstandardize(data.standardize(np.array([10.0]), ref), ref)[0] == pytest.approx(10.0, abs=1e-4)


def test_constant_images_are_degenerate():
    with pytest.raises(data.DegenerateDataError):
        data.compute_standardization_stats(np.full((3, 1, 4, 4), 9.0))


def test_stats_file_round_trip(tmp_path):
    s = data.StandardizationStats(142.46, 59.85)
    data.write_stats(tmp_path / "stats.csv", s, "s1", 3)
    assert data.read_stats(tmp_path / "stats.csv") == s
    assert "split=s1 seed=3" in (tmp_path / "stats.csv").read_text()


# -- augmentation ------------------------------------------------------------------

def _crop_oracle(x, top, left, ch, cw):
    c = x.shape[0]
    return np.array([[[x[k, top + i, left + j] for j in range(cw)] for i in range(ch)] for k in range(c)])


@pytest.mark.parametrize("w,h,cw,ch", [(64, 64, 56, 56), (10, 7, 4, 3), (9, 9, 9, 9), (5, 8, 1, 2)])
def test_twelve_crop_matches_index_oracle(w, h, cw, ch):
    x = np.random.default_rng(w * h).integers(0, 256, (2, h, w)).astype(np.float32)
    crops = data.twelve_crop(x, cw, ch)
    assert len(crops) == 12
    origins = [(0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw), ((h - ch) // 2, (w - cw) // 2)]
    for crop, (top, left) in zip(crops[:5], origins):
        np.testing.assert_array_equal(crop, _crop_oracle(x, top, left, ch, cw))
    np.testing.assert_array_equal(crops[5], data.resize_bilinear(x, ch, cw))
    for base, flipped in zip(crops[:6], crops[6:]):
        np.testing.assert_array_equal(flipped, base[:, :, ::-1])
        assert flipped.shape == (2, ch, cw)


def test_crop_larger_than_image_raises():
    with pytest.raises(data.SizingError):
        data.twelve_crop(np.zeros((1, 8, 8)), 9, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3))
def test_mirror_is_an_involution(h, w, c):
    x = np.arange(c * h * w, dtype=np.float32).reshape(c, h, w)
    np.testing.assert_array_equal(data.mirror(data.mirror(x)), x)


def test_augment_dataset_keeps_labels():
    recs = [_rec("a", 0), _rec("b", 0, gender="F")]
    ds = data.Dataset(np.zeros((2, 1, 8, 8), np.float32), recs)
    aug = data.augment_dataset(ds, 6, 6)
    assert len(aug) == 24 and aug.images.shape == (24, 1, 6, 6)
    assert aug.records[:12] == [recs[0]] * 12 and aug.records[12:] == [recs[1]] * 12


def test_manifest_dataset_resolves_relative_paths(tmp_path):
    (tmp_path / "img").mkdir()
    data.write_netpbm(tmp_path / "img" / "a.pgm", np.full((1, 4, 6), 7, np.uint8))
    p = _manifest(tmp_path, "s1,img/a.pgm,30,M,B\n")
    ds = data.load_manifest_dataset(p, size=(3, 2))
    assert ds.images.shape == (1, 1, 2, 3)
    np.testing.assert_allclose(ds.images, 7.0)
    assert ds.genders.tolist() == [0] and ds.ages.tolist() == [30]
