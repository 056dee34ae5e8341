import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knnsid import knn
from knnsid.errors import ContractError, DegenerateVectorError, DimensionError, MagicMismatchError, TruncatedFileError


def brute_cosines(q, W):
    return np.array([knn.cosine_similarity(q, W[:, r]) for r in range(W.shape[1])])


def counting_oracle(labels, scores):
    counts = Counter(labels)
    best = max(counts.values())
    tied = [lab for lab, c in counts.items() if c == best]
    sums = {lab: sum(s for l2, s in zip(labels, scores) if l2 == lab) for lab in tied}
    top = max(sums.values())
    return min(lab for lab in tied if sums[lab] == top)


def random_ref(rng, D, R, n_labels=3):
    return knn.build_reference_matrix(rng.standard_normal((R, D)), rng.integers(0, n_labels, R))


# --- cosine ---------------------------------------------------------------------


def test_cosine_examples():
    assert knn.cosine_similarity([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
    assert knn.cosine_similarity([1, 0], [0, 3]) == 0.0
    hand = 32 / math.sqrt(14 * 77)
    assert knn.cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(hand, abs=1e-15)
    assert knn.cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(0.9746318, abs=1e-6)
    with pytest.raises(DegenerateVectorError):
        knn.cosine_similarity([0, 0], [1, 1])


# --- reference matrix --------------------------------------------------------------


def test_build_reference_examples():
    ref = knn.build_reference_matrix(np.array([[3.0, 4.0]]), [0])
    assert np.allclose(ref.W[:, 0], [0.6, 0.8], rtol=0, atol=1e-15)
    assert ref.norms_applied


def test_build_reference_names_zero_block():
    with pytest.raises(DegenerateVectorError, match=r"\[2\]"):
        knn.build_reference_matrix(np.array([[1.0, 0], [0, 1.0], [0, 0]]), [0, 1, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 20))
def test_reference_columns_unit_norm_and_direction(seed, R, D):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((R, D)) * rng.uniform(0.01, 100, (R, 1))
    ref = knn.build_reference_matrix(E, np.zeros(R))
    assert np.allclose(np.linalg.norm(ref.W, axis=0), 1.0, rtol=0, atol=1e-6)
    for r in range(R):
        assert knn.cosine_similarity(ref.W[:, r], E[r]) == pytest.approx(1.0, abs=1e-6)


# --- scoring ---------------------------------------------------------------------------


def test_collinear_query_scores_its_norm():
    rng = np.random.default_rng(0)
    ref = random_ref(rng, 8, 20)
    q = 5 * ref.W[:, 7]
    s = knn.knn_layer_scores(q, ref)
    assert s[7] == pytest.approx(5.0, rel=1e-12) and np.argmax(s) == 7


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 32, 128]), st.sampled_from([10, 500]))
def test_dense_equals_knn(seed, D, R):
    rng = np.random.default_rng(seed)
    ref = random_ref(rng, D, R)
    q = rng.standard_normal(D)
    dense = knn.knn_layer_scores(q, ref) / np.linalg.norm(q)
    brute = brute_cosines(q, ref.W)
    assert np.max(np.abs(dense - brute)) <= 1e-6
    for k in (1, 5, 11, R):
        assert np.array_equal(knn.top_k(dense, k).indices, knn.top_k(brute, k).indices)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_ranking_scale_invariant(seed, lam):
    rng = np.random.default_rng(seed)
    ref = random_ref(rng, 16, 50)
    q = rng.standard_normal(16)
    assert np.array_equal(knn.top_k(knn.knn_layer_scores(q, ref), 50).indices,
                          knn.top_k(knn.knn_layer_scores(lam * q, ref), 50).indices)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_batched_scoring_bit_identical(dtype):
    rng = np.random.default_rng(1)
    ref = knn.build_reference_matrix(rng.standard_normal((300, 32)).astype(dtype), np.zeros(300))
    Q = rng.standard_normal((17, 32)).astype(dtype)
    batch = knn.knn_layer_scores(Q, ref)
    for i in range(17):
        assert np.array_equal(batch[i], knn.knn_layer_scores(Q[i], ref))


def test_dimension_mismatch():
    ref = random_ref(np.random.default_rng(0), 4, 5)
    with pytest.raises(DimensionError):
        knn.knn_layer_scores(np.ones(5), ref)


def test_unnormalized_reference_rejected():
    ref = knn.ReferenceMatrix(np.ones((3, 2)), np.zeros(2, dtype=np.int64), norms_applied=False)
    with pytest.raises(ContractError):
        knn.knn_layer_scores(np.ones(3), ref)


# --- top_k and vote ------------------------------------------------------------------------


def test_top_k_examples():
    assert knn.top_k(np.array([0.1, 0.9, 0.5]), 2).indices.tolist() == [1, 2]
    assert knn.top_k(np.full(5, 0.3), 3).indices.tolist() == [0, 1, 2]
    assert len(knn.top_k(np.arange(4.0), 10).indices) == 4
    with pytest.raises(ContractError):
        knn.top_k(np.arange(3.0), 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.integers(1, 50))
def test_top_k_matches_full_sort(values, k):
    scores = np.array(values, dtype=float)
    oracle = sorted(range(len(values)), key=lambda i: (-values[i], i))[:k]
    ns = knn.top_k(scores, k)
    assert ns.indices.tolist() == oracle
    assert np.all(np.diff(ns.scores) <= 0)
    assert len(set(ns.indices.tolist())) == len(ns.indices) == min(k, len(values))


def test_vote_examples():
    assert knn.majority([0, 0, 1], [0.1, 0.1, 0.9]) == 0
    assert knn.majority([0, 1], [0.9, 0.8]) == 0
    assert knn.majority([0, 1], [0.8, 0.9]) == 1
    assert knn.majority([3, 1], [0.5, 0.5]) == 1
    with pytest.raises(ContractError):
        knn.majority([], [])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_vote_matches_counting_oracle_k11(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 11).tolist()
    scores = np.round(rng.uniform(0, 1, 11), 1).tolist()  # coarse values create ties
    assert knn.majority(labels, scores) == counting_oracle(labels, scores)
    perm = rng.permutation(11)
    assert knn.majority([labels[i] for i in perm], [scores[i] for i in perm]) == knn.majority(labels, scores)


def test_vote_uses_reference_labels():
    ref = knn.ReferenceMatrix(np.eye(3), np.array([2, 1, 1]))
    ns = knn.kneighbors(np.array([1.0, 0.9, 0.8]), ref, k=3)
    assert knn.vote(ns, ref) == 1
    assert knn.vote(knn.kneighbors(np.array([1.0, 0.9, 0.8]), ref, k=1), ref) == 2


def test_kneighbors_reports_cosines_and_rejects_zero():
    rng = np.random.default_rng(0)
    ref = random_ref(rng, 6, 30)
    q = rng.standard_normal(6) * 7
    ns = knn.kneighbors(q, ref, 5)
    assert np.allclose(ns.scores, brute_cosines(q, ref.W)[ns.indices], atol=1e-12)
    with pytest.raises(DegenerateVectorError):
        knn.kneighbors(np.zeros(6), ref)


# --- compression -----------------------------------------------------------------------------


def test_compress_single_centroid_example():
    ref = knn.ReferenceMatrix(np.eye(2), np.array([0, 0]))
    out = knn.compress_reference(ref, 1)
    assert out.n_columns == 1
    assert np.allclose(out.W[:, 0], [1 / math.sqrt(2)] * 2, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_compress_bounds_and_norms(seed, c):
    rng = np.random.default_rng(seed)
    ref = random_ref(rng, 8, int(rng.integers(1, 60)), n_labels=3)
    out = knn.compress_reference(ref, c, seed=seed)
    n_singers = len(np.unique(ref.labels))
    assert out.n_columns <= min(ref.n_columns, n_singers * c)
    assert set(out.labels.tolist()) == set(ref.labels.tolist())
    assert np.allclose(np.linalg.norm(out.W, axis=0), 1.0, atol=1e-6)


def test_compress_deterministic_per_seed():
    ref = random_ref(np.random.default_rng(0), 8, 80)
    a, b = knn.compress_reference(ref, 4, seed=3), knn.compress_reference(ref, 4, seed=3)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.labels, b.labels)


def test_compress_rejects_bad_count():
    with pytest.raises(ContractError):
        knn.compress_reference(random_ref(np.random.default_rng(0), 4, 4), 0)


# --- file format / estimator --------------------------------------------------------------------


def test_reference_roundtrip_and_errors(tmp_path):
    ref = knn.build_reference_matrix(np.random.default_rng(0).standard_normal((9, 5)).astype(np.float32),
                                     np.arange(9) % 3)
    p = tmp_path / "r.tknr"
    knn.save_reference(ref, p)
    back = knn.load_reference(p)
    assert np.array_equal(back.W, ref.W) and np.array_equal(back.labels, ref.labels)
    raw = p.read_bytes()
    # column-major payload: first column follows the label block
    first = np.frombuffer(raw, dtype="<f4", count=5, offset=16 + 4 * 9)
    assert np.array_equal(first, ref.W[:, 0])
    (tmp_path / "m.tknr").write_bytes(b"TKNN" + raw[4:])
    with pytest.raises(MagicMismatchError):
        knn.load_reference(tmp_path / "m.tknr")
    (tmp_path / "t.tknr").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        knn.load_reference(tmp_path / "t.tknr")


def test_knn_head_classifier_api():
    from sklearn.base import clone

    rng = np.random.default_rng(0)
    centers = rng.standard_normal((3, 10)) * 5
    X = np.concatenate([c + rng.standard_normal((20, 10)) for c in centers])
    y = np.repeat(["a", "b", "c"], 20)
    clf = clone(knn.KNNHeadClassifier(k=5)).fit(X, y)
    assert (clf.predict(X) == y).mean() > 0.95
    assert clf.decision_function(X[:2]).shape == (2, 60)
    small = knn.KNNHeadClassifier(k=1, centroids_per_class=2).fit(X, y)
    assert small.reference_.n_columns <= 6
