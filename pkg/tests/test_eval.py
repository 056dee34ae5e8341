import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knnsid.errors import ContractError, DatasetError
from knnsid.evaluation import (
    ConfusionMatrix, DatasetManifest, MetricReport, SongRecord, confusion, metrics, split_by_album, split_random,
)
from oracles import album_fixture, metric_deviation, random_confusion


def songs(n_per_singer, singers=("a", "b", "c")):
    return [SongRecord(f"{s}{i:03d}", f"{s}/{i}.wav", s) for s in singers for i in range(n_per_singer)]


def split_counts(manifest, singer):
    return tuple(sum(1 for r in manifest.split(sp) if r.singer_id == singer) for sp in ("train", "val", "test"))


# --- random split -----------------------------------------------------------------


@pytest.mark.parametrize("n, expected", [(70, (56, 7, 7)), (10, (8, 1, 1)), (20, (16, 2, 2)), (3, (1, 1, 1))])
def test_split_random_counts(n, expected):
    m = split_random(songs(n), seed=1)
    for s in "abc":
        assert split_counts(m, s) == expected


def test_split_random_order_independent_and_seeded():
    base = songs(30)
    shuffled = [base[i] for i in np.random.default_rng(0).permutation(len(base))]
    a, b = split_random(base, seed=5), split_random(shuffled, seed=5)
    assert [(r.song_id, r.split) for r in a] == [(r.song_id, r.split) for r in b]
    c = split_random(base, seed=6)
    assert [r.split for r in a] != [r.split for r in c]


def test_split_random_rejects_tiny_singer():
    with pytest.raises(DatasetError):
        split_random(songs(2), seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 40))
def test_split_random_no_leakage(seed, n):
    base = songs(n)
    m = split_random(base, seed=seed)
    assert sorted(r.song_id for r in m) == sorted(r.song_id for r in base)
    assert all(split_counts(m, s)[0] >= 1 for s in "abc")


# --- album split ---------------------------------------------------------------------


def test_album_split_six_albums_is_4_1_1():
    recs = [SongRecord(f"{s}_{a}_{k}", "x.wav", s, album_id=f"{s}_alb{a}") for s in "xy" for a in range(6) for k in range(3)]
    m = split_by_album(recs, seed=0)
    for s in "xy":
        albums = {sp: {r.album_id for r in m.split(sp) if r.singer_id == s} for sp in ("train", "val", "test")}
        assert tuple(len(albums[sp]) for sp in ("train", "val", "test")) == (4, 1, 1)
        assert min(albums["val"]) < min(albums["test"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_album_split_never_splits_an_album(seed):
    rng = np.random.default_rng(seed)
    recs = album_fixture(rng)
    m = split_by_album(recs, seed=seed)
    where = {}
    for r in m:
        where.setdefault(r.album_id, set()).add(r.split)
    assert all(len(v) == 1 for v in where.values())
    assert sorted(r.song_id for r in m) == sorted(r.song_id for r in recs)


def test_album_split_ignores_enumeration_order():
    rng = np.random.default_rng(3)
    recs = album_fixture(rng, n_singers=3)
    rev = list(reversed(recs))
    a, b = split_by_album(recs, seed=9), split_by_album(rev, seed=9)
    assert {r.song_id: r.split for r in a} == {r.song_id: r.split for r in b}


def test_album_split_errors():
    few = [SongRecord(f"s{a}", "x.wav", "x", album_id=f"alb{a}") for a in range(5)]
    with pytest.raises(DatasetError):
        split_by_album(few)
    with pytest.raises(DatasetError):
        split_by_album([SongRecord("s", "x.wav", "x")] * 1)


# --- manifest ------------------------------------------------------------------------------


def test_manifest_roundtrip_and_validation(tmp_path):
    m = split_random(songs(10), seed=0)
    m.records[0].album_id = "alb"
    m.save(tmp_path / "m.jsonl")
    back = DatasetManifest.load(tmp_path / "m.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in m]
    assert set(json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])) == {
        "song_id", "path", "singer_id", "album_id", "split"}
    back.validate_for_training()
    with pytest.raises(DatasetError):
        DatasetManifest([SongRecord("a", "x", "s"), SongRecord("a", "y", "s")])
    with pytest.raises(DatasetError):
        DatasetManifest([SongRecord("a", "x", "s", split="holdout")])
    no_val = DatasetManifest([r for r in m if r.split != "val"])
    with pytest.raises(DatasetError, match="validation"):
        no_val.validate_for_training()
    one = DatasetManifest([r for r in m if r.singer_id == "a"])
    with pytest.raises(DatasetError):
        one.validate_for_training()


# --- confusion / metrics -----------------------------------------------------------------------


def test_confusion_examples():
    labels = ["a", "b", "c"]
    cm = confusion([(x, x) for x in "abcab"], labels)
    assert np.array_equal(cm.counts, np.diag([2, 2, 1]))
    one = confusion([("a", "b")], labels)
    assert one.counts.sum() == 1 and one.counts[0, 1] == 1
    with pytest.raises(ContractError):
        confusion([("a", "z")], labels)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_confusion_counting_oracle_and_merge(seed):
    rng = np.random.default_rng(seed)
    pairs = [(int(a), int(b)) for a, b in rng.integers(0, 4, (int(rng.integers(1, 60)), 2))]
    cm = confusion(pairs, range(4))
    naive = np.zeros((4, 4), dtype=int)
    for t, p in pairs:
        naive[t][p] += 1
    assert np.array_equal(cm.counts, naive) and cm.total == len(pairs)
    half = len(pairs) // 2
    merged = confusion(pairs[:half], range(4)) + confusion(pairs[half:], range(4))
    assert np.array_equal(merged.counts, naive)


def test_metrics_hand_example():
    rep = metrics(ConfusionMatrix(np.array([[8, 2], [3, 7]]), ["a", "b"]))
    assert rep.accuracy == 0.75
    assert rep.precision[0] == pytest.approx(8 / 11, abs=1e-15)
    assert rep.recall[0] == pytest.approx(0.8, abs=1e-15)
    assert rep.macro_f1 == pytest.approx(np.mean(rep.f1), abs=0)


def test_metrics_diagonal_all_ones_and_zero_matrix_error():
    rep = metrics(ConfusionMatrix(np.diag([3, 1, 4]), list("abc")))
    assert rep.accuracy == rep.macro_precision == rep.macro_recall == rep.macro_f1 == 1.0
    with pytest.raises(ContractError):
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int), ["a", "b"]))


def test_zero_denominator_classes_flagged():
    rep = metrics(ConfusionMatrix(np.array([[2, 0, 0], [1, 0, 0], [0, 0, 0]]), list("abc")))
    assert rep.undefined_precision == ["b", "c"]
    assert rep.undefined_recall == ["c"]
    assert rep.precision[1] == rep.recall[2] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_match_exact_oracle(seed):
    cm = random_confusion(np.random.default_rng(seed))
    rep = metrics(ConfusionMatrix(cm, list(range(len(cm)))))
    assert metric_deviation(rep, cm) <= 1e-12
    assert Fraction(rep.correct, rep.total) == Fraction(int(np.trace(cm)), int(cm.sum()))
    assert all(0.0 <= v <= 1.0 for v in rep.precision + rep.recall + rep.f1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_relabeling_invariant(seed):
    rng = np.random.default_rng(seed)
    cm = random_confusion(rng, zero_classes=False)
    perm = rng.permutation(len(cm))
    a = metrics(ConfusionMatrix(cm, list(range(len(cm)))))
    b = metrics(ConfusionMatrix(cm[np.ix_(perm, perm)], list(range(len(cm)))))
    assert a.accuracy == b.accuracy
    for key in ("macro_precision", "macro_recall", "macro_f1"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-15)
    assert np.allclose(np.array(a.f1)[perm], b.f1, atol=1e-15)


def test_report_serialization(tmp_path):
    cm = ConfusionMatrix(np.array([[8, 2], [3, 7]]), ["a", "b"])
    rep = metrics(cm)
    assert MetricReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
    text = rep.to_text()
    assert "accuracy 0.7500 (15/20)" in text and "macro" in text
    cm.to_csv(tmp_path / "cm.csv")
    assert (tmp_path / "cm.csv").read_text().splitlines() == ["true\\predicted,a,b", "a,8,2", "b,3,7"]
