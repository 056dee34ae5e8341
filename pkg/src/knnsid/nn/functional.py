"""Softmax and cross-entropy."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError


def softmax(logits) -> np.ndarray:
    """Row-wise softmax over the last axis, max-subtracted."""
    z = np.asarray(logits)
    if z.shape[-1:] == (0,) or z.ndim == 0:
        raise ContractError("softmax needs a nonempty final axis")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, true_label):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    ``probs`` is ``(C,)`` with an int label or ``(B, C)`` with ``B`` labels.
    The returned gradient is for the logits that produced ``probs`` through
    ``softmax`` (``probs - one_hot``, divided by ``B`` for batches).
    """
    p = np.asarray(probs)
    single = p.ndim == 1
    p2 = p[None] if single else p
    labels = np.atleast_1d(np.asarray(true_label))
    if labels.shape != (p2.shape[0],):
        raise ContractError(f"{labels.shape[0]} labels for {p2.shape[0]} rows")
    n_classes = p2.shape[1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ContractError(f"labels must be integers in [0, {n_classes}), got {labels.tolist()}")
    rows = np.arange(p2.shape[0])
    picked = p2[rows, labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(p2.dtype).tiny))))
    grad = p2.copy()
    grad[rows, labels] -= 1.0
    grad /= p2.shape[0]
    return loss, (grad[0] if single else grad)
