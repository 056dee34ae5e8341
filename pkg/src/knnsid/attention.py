"""Additive attention pooling over GRU outputs.

Every function accepts a single sequence ``H`` of shape ``(N, D)`` or a
batch of shape ``(B, N, D)``; the time axis is always ``-2``.

Scoring uses the sequence mean as context::

    s_bar   = mean_j h_j
    score_j = v . tanh(W_s^T s_bar + W_h^T h_j)
    alpha   = softmax_j(score)
    c       = sum_j alpha_j h_j
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError


@dataclass
class AttentionParams:
    W_s: np.ndarray  # (D, A)
    W_h: np.ndarray  # (D, A)
    v: np.ndarray  # (A,)

    def __post_init__(self):
        if self.W_s.ndim != 2 or self.W_s.shape != self.W_h.shape:
            raise DimensionError(f"W_s {self.W_s.shape} and W_h {self.W_h.shape} must both be (D, A)")
        if self.v.shape != (self.W_s.shape[1],):
            raise DimensionError(f"v has shape {self.v.shape}, expected ({self.W_s.shape[1]},)")

    @property
    def dim(self) -> int:
        return self.W_s.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.W_s.shape[1]

    @classmethod
    def init(cls, dim: int, attn_dim: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        lim = np.sqrt(6.0 / (dim + attn_dim))
        return cls(
            W_s=rng.uniform(-lim, lim, (dim, attn_dim)).astype(dtype),
            W_h=rng.uniform(-lim, lim, (dim, attn_dim)).astype(dtype),
            v=rng.uniform(-lim, lim, attn_dim).astype(dtype),
        )


@dataclass
class AttentionOutput:
    c: np.ndarray  # (..., D)
    alpha: np.ndarray  # (..., N)


def _check(H: np.ndarray, params: AttentionParams) -> None:
    if H.ndim not in (2, 3) or H.shape[-2] < 1:
        raise DimensionError(f"expected (N, D) or (B, N, D) with N >= 1, got {H.shape}")
    if H.shape[-1] != params.dim:
        raise DimensionError(f"sequence feature dim {H.shape[-1]} != attention dim {params.dim}")


def _scores_and_cache(H, params):
    s_bar = H.mean(axis=-2)
    context = np.matmul(s_bar[..., None, :], params.W_s)[..., 0, :]  # (..., A), row by row
    t = np.tanh(context[..., None, :] + H @ params.W_h)  # (..., N, A)
    return np.matmul(t, params.v[:, None])[..., 0], s_bar, t


def attention_scores(H: np.ndarray, params: AttentionParams) -> np.ndarray:
    _check(H, params)
    return _scores_and_cache(H, params)[0]


def attention_weights(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise NumericError("attention scores must be finite")
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_pool(H: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    if alpha.shape != H.shape[:-1]:
        raise DimensionError(f"alpha shape {alpha.shape} does not match sequence shape {H.shape[:-1]}")
    return np.einsum("...n,...nd->...d", alpha, H)


def attention_forward(H: np.ndarray, params: AttentionParams):
    """Return ``(AttentionOutput, cache)``; the cache feeds ``attention_backward``."""
    _check(H, params)
    scores, s_bar, t = _scores_and_cache(H, params)
    alpha = attention_weights(scores)
    c = attention_pool(H, alpha)
    cache = {"H": H, "s_bar": s_bar, "t": t, "alpha": alpha, "params": params}
    return AttentionOutput(c=c, alpha=alpha), cache


def attention_backward(cache: dict | None, upstream_grad: np.ndarray):
    """Gradients of a scalar loss given ``dL/dc``.

    Returns ``(dH, {"W_s": ..., "W_h": ..., "v": ...})``.
    """
    if not cache:
        raise ContractError("attention_backward called without a forward cache")
    H, s_bar, t, alpha, p = cache["H"], cache["s_bar"], cache["t"], cache["alpha"], cache["params"]
    dc = np.asarray(upstream_grad, dtype=H.dtype)
    if dc.shape != H.shape[:-2] + H.shape[-1:]:
        raise DimensionError(f"upstream grad {dc.shape} does not match pooled shape {H.shape[:-2] + H.shape[-1:]}")
    n = H.shape[-2]

    dH = alpha[..., :, None] * dc[..., None, :]
    dalpha = np.einsum("...nd,...d->...n", H, dc)
    dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))

    dv = dscore.reshape(-1) @ t.reshape(-1, t.shape[-1])
    dpre = dscore[..., None] * p.v * (1.0 - t * t)  # (..., N, A)
    H2 = H.reshape(-1, H.shape[-1])
    dW_h = H2.T @ dpre.reshape(-1, dpre.shape[-1])
    dcontext = dpre.sum(axis=-2)  # (..., A)
    dW_s = s_bar.reshape(-1, s_bar.shape[-1]).T @ dcontext.reshape(-1, dcontext.shape[-1])
    ds_bar = dcontext @ p.W_s.T
    dH = dH + dpre @ p.W_h.T + ds_bar[..., None, :] / n
    return dH, {"W_s": dW_s, "W_h": dW_h, "v": dv}
