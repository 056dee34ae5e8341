"""Cosine KNN head expressed as a bias-free linear layer over a unit-column reference matrix.

With every reference column normalized, ``q @ W`` equals ``|q| * cos(q, w_r)``
for each column, so ranking the dense-layer outputs is ranking by cosine
similarity; ``|q|`` is a per-query constant and never changes the order.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ContractError, DegenerateVectorError, DimensionError, MagicMismatchError, TruncatedFileError, VersionMismatchError

DEFAULT_K = 11

REFERENCE_MAGIC = b"TKNR"
REFERENCE_VERSION = 1
_REF_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ReferenceMatrix:
    W: np.ndarray  # (D, R), one column per reference embedding
    labels: np.ndarray  # (R,) integer singer ids
    norms_applied: bool = True

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[1] < 1:
            raise DimensionError(f"reference matrix must be (D, R>=1), got {self.W.shape}")
        if self.labels.shape != (self.W.shape[1],):
            raise DimensionError(f"{self.labels.shape[0]} labels for {self.W.shape[1]} columns")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def n_columns(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray  # column ids, best first
    scores: np.ndarray  # cosine similarities, descending
    k: int = DEFAULT_K
    labels: np.ndarray = field(default=None)


def cosine_similarity(q, w) -> float:
    q = np.asarray(q, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if q.shape != w.shape:
        raise DimensionError(f"cosine_similarity: shapes {q.shape} and {w.shape} differ")
    nq, nw = np.linalg.norm(q), np.linalg.norm(w)
    if nq == 0.0 or nw == 0.0:
        raise DegenerateVectorError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(q, w) / (nq * nw), -1.0, 1.0))


def build_reference_matrix(embeddings, labels, dtype=None) -> ReferenceMatrix:
    """Stack embeddings as L2-normalized columns, in input order."""
    E = np.asarray(embeddings)
    if E.ndim != 2 or E.shape[0] == 0:
        raise ContractError(f"need a nonempty (R, D) array of embeddings, got shape {E.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (E.shape[0],):
        raise ContractError(f"{labels.size} labels for {E.shape[0]} embeddings")
    dtype = dtype or (E.dtype if E.dtype.kind == "f" else np.float64)
    E = E.astype(np.float64)
    norms = np.linalg.norm(E, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateVectorError(f"training block(s) {bad[:10].tolist()} have zero-norm embeddings")
    W = (E / norms[:, None]).T.astype(dtype)
    return ReferenceMatrix(np.ascontiguousarray(W), labels, True)


def knn_layer_scores(q, ref: ReferenceMatrix) -> np.ndarray:
    """Dense-layer output ``q @ W`` (linear activation, zero bias).

    ``q`` may be one query ``(D,)`` or a batch ``(B, D)``. The batch is one
    stacked matmul of ``(B, 1, D)`` by ``(D, R)``: each row gets its own
    vector-matrix product, so a query's scores are bit-identical whether it
    is scored alone or inside any batch (a flat ``Q @ W`` gemm is not).
    """
    if not ref.norms_applied:
        raise ContractError("reference matrix columns are not normalized")
    q = np.asarray(q)
    if q.shape[-1] != ref.dim or q.ndim not in (1, 2):
        raise DimensionError(f"query shape {q.shape} incompatible with reference dim {ref.dim}")
    out = np.matmul(np.atleast_2d(q)[:, None, :], ref.W)[:, 0]
    return out[0] if q.ndim == 1 else out


def top_k(scores, k: int) -> NeighborSet:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")[:k]
    return NeighborSet(indices=order, scores=scores[order], k=k)


def _tally(labels, scores):
    counts: dict[int, int] = defaultdict(int)
    sums: dict[int, float] = defaultdict(float)
    for lab, s in zip(labels, scores):
        counts[int(lab)] += 1
        sums[int(lab)] += float(s)
    return counts, sums


def majority(labels, scores) -> int:
    """Most frequent label; ties by larger summed score, then smaller label."""
    if len(labels) == 0:
        raise ContractError("cannot vote over an empty set")
    counts, sums = _tally(labels, scores)
    return min(counts, key=lambda lab: (-counts[lab], -sums[lab], lab))


def vote(neighbors: NeighborSet, ref: ReferenceMatrix) -> int:
    return majority(ref.labels[neighbors.indices], neighbors.scores)


def kneighbors(q, ref: ReferenceMatrix, k: int = DEFAULT_K) -> NeighborSet:
    """Top-k neighbors of one query, with scores reported as cosines."""
    q = np.asarray(q)
    norm = float(np.linalg.norm(q.astype(np.float64)))
    if norm == 0.0:
        raise DegenerateVectorError("query embedding has zero norm")
    raw = top_k(knn_layer_scores(q, ref), k)
    return NeighborSet(indices=raw.indices, scores=raw.scores / norm, k=k, labels=ref.labels[raw.indices])


def _kmeans(X, n_clusters, rng, max_iter=50, tol=1e-6):
    """Plain Lloyd iterations with k-means++ seeding; rows of X are points."""
    n = len(X)
    centers = np.empty((n_clusters, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[c] = X[idx]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    for _ in range(max_iter):
        assign = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)
        new = centers.copy()
        for c in range(n_clusters):
            members = X[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    assign = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)
    return centers, assign


def compress_reference(ref: ReferenceMatrix, centroids_per_singer: int, seed: int = 0) -> ReferenceMatrix:
    """Replace each singer's columns by renormalized k-means centroids.

    Singers with fewer columns than ``centroids_per_singer`` keep one
    centroid per column; empty clusters are dropped.
    """
    if centroids_per_singer < 1:
        raise ContractError("centroids_per_singer must be >= 1")
    rng = np.random.default_rng(seed)
    cols, labels = [], []
    for singer in np.unique(ref.labels):
        X = ref.W[:, ref.labels == singer].T.astype(np.float64)
        if len(X) == 0:
            raise ContractError(f"singer {singer} has no reference columns")
        centers, assign = _kmeans(X, min(centroids_per_singer, len(X)), rng)
        for c in range(len(centers)):
            if not np.any(assign == c):
                continue
            mean = X[assign == c].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                raise DegenerateVectorError(f"singer {singer}: centroid {c} averages to zero")
            cols.append(mean / norm)
            labels.append(int(singer))
    W = np.ascontiguousarray(np.array(cols).T.astype(ref.W.dtype))
    return ReferenceMatrix(W, np.array(labels, dtype=np.int64), True)


# --- TKNR file ---------------------------------------------------------------


def save_reference(ref: ReferenceMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_REF_HEADER.pack(REFERENCE_MAGIC, REFERENCE_VERSION, ref.dim, ref.n_columns))
        fh.write(np.asarray(ref.labels, dtype="<u4").tobytes())
        # column-major: column r occupies D consecutive floats
        fh.write(np.ascontiguousarray(ref.W.T, dtype="<f4").tobytes())


def load_reference(path) -> ReferenceMatrix:
    data = Path(path).read_bytes()
    if len(data) < _REF_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated reference header")
    magic, version, D, R = _REF_HEADER.unpack_from(data)
    if magic != REFERENCE_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}, expected {REFERENCE_MAGIC!r}")
    if version != REFERENCE_VERSION:
        raise VersionMismatchError(f"{path}: reference format version {version}, expected {REFERENCE_VERSION}")
    off = _REF_HEADER.size
    need = off + 4 * R + 4 * D * R
    if len(data) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(data)}")
    labels = np.frombuffer(data, dtype="<u4", count=R, offset=off).astype(np.int64)
    cols = np.frombuffer(data, dtype="<f4", count=D * R, offset=off + 4 * R).reshape(R, D)
    return ReferenceMatrix(np.ascontiguousarray(cols.T.astype(np.float32)), labels, True)


class KNNHeadClassifier(ClassifierMixin, BaseEstimator):
    """Cosine KNN over fixed embeddings, scored as a dense layer.

    ``fit`` stores the normalized training embeddings as the reference
    matrix; ``predict`` runs top-k + vote per row. ``centroids_per_class``
    optionally compresses the reference after fitting.
    """

    def __init__(self, k=DEFAULT_K, centroids_per_class=None, random_state=0):
        self.k = k
        self.centroids_per_class = centroids_per_class
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=[np.float64, np.float32])
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        ref = build_reference_matrix(X, y_idx)
        if self.centroids_per_class:
            ref = compress_reference(ref, self.centroids_per_class, seed=self.random_state)
        self.reference_ = ref
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X) -> list[NeighborSet]:
        check_is_fitted(self, "reference_")
        X = check_array(X, dtype=[np.float64, np.float32])
        return [kneighbors(row, self.reference_, self.k) for row in X]

    def predict(self, X):
        sets = self.kneighbors(X)
        return self.classes_[[vote(ns, self.reference_) for ns in sets]]

    def decision_function(self, X):
        """Raw dense-layer scores, shape ``(n_samples, n_reference_columns)``."""
        check_is_fitted(self, "reference_")
        return knn_layer_scores(check_array(X, dtype=[np.float64, np.float32]), self.reference_)
