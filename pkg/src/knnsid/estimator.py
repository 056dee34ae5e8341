"""scikit-learn facade over the two-stage pipeline.

``X`` is an array of log-mel blocks, shape ``(n_blocks, 32, n_mels)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted

from . import knn
from .nn import NetworkConfig
from .pipeline import KnnNet, TrainConfig, fit_extractor, knn_net_from_blocks, prepare_input


class KNNNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Attention-CRNN embedding with a cosine KNN output layer.

    ``fit`` trains the extractor with a softmax head (stage 1), freezes it
    and stores every training block as a reference column (stage 2).
    ``transform`` returns embeddings; ``predict`` uses the KNN head and
    ``predict_softmax`` the stage-1 head.

    If ``X_val``/``y_val`` are not passed to ``fit``, a stratified
    ``validation_fraction`` of the blocks is held out for checkpoint
    selection; those blocks are still added to the reference matrix.
    """

    def __init__(self, k=knn.DEFAULT_K, conv_channels=(16, 32, 32, 32), pool_sizes=((2, 2), (2, 2), (1, 2), (1, 8)),
                 gru_hidden=32, attention_dim=32, lr=1e-3, batch_size=16, max_epochs=30, patience=5,
                 validation_fraction=0.1, random_state=7):
        self.k = k
        self.conv_channels = conv_channels
        self.pool_sizes = pool_sizes
        self.gru_hidden = gru_hidden
        self.attention_dim = attention_dim
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _check_blocks(self, X):
        return check_array(X, allow_nd=True, dtype=np.float32, ensure_min_features=1)

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_blocks(X)
        if X.ndim != 3:
            raise ValueError(f"expected (n_blocks, frames, n_mels) input, got shape {X.shape}")
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        if X_val is None:
            X_tr, X_va, y_tr, y_va = train_test_split(
                X, y_idx, test_size=self.validation_fraction, stratify=y_idx, random_state=self.random_state)
        else:
            X_tr, y_tr = X, y_idx
            X_va = self._check_blocks(X_val)
            y_va = np.searchsorted(self.classes_, np.asarray(y_val))
        net_cfg = NetworkConfig(self.conv_channels, 3, self.pool_sizes, self.gru_hidden, self.attention_dim)
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                                patience=self.patience, seed=self.random_state)
        extractor = fit_extractor(X_tr, y_tr, X_va, y_va, len(self.classes_), net_cfg, train_cfg)
        self.net_: KnnNet = knn_net_from_blocks(extractor, X, y_idx, self.k, [str(c) for c in self.classes_])
        self.history_ = extractor.history
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return self.net_.embed(self._check_blocks(X))

    def kneighbors(self, X) -> list[knn.NeighborSet]:
        check_is_fitted(self, "net_")
        return [ns for _, ns in self.net_.predict_blocks(self._check_blocks(X))]

    def predict(self, X):
        check_is_fitted(self, "net_")
        labels = [lab for lab, _ in self.net_.predict_blocks(self._check_blocks(X))]
        return self.classes_[labels]

    def predict_softmax(self, X):
        check_is_fitted(self, "net_")
        return self.classes_[self.net_.extractor.network.logits(prepare_input(self._check_blocks(X))).argmax(axis=1)]

    def predict_songs(self, songs):
        """One label per song; each song is a ``(n_blocks, 32, n_mels)`` array."""
        check_is_fitted(self, "net_")
        return self.classes_[[self.net_.predict_song(self._check_blocks(s)).predicted for s in songs]]

