"""Layer kernels with explicit forward caches and hand-written backward passes.

Tensors are plain numpy arrays. Image-like activations are laid out as
``(batch, channels, time, mel)``; sequences as ``(batch, time, features)``.
"""

from __future__ import annotations

import numpy as np

from .. import attention as attn
from ..errors import ContractError, DimensionError


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape).astype(dtype)


class Layer:
    kind = ""
    tag = 0
    param_names: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.frozen = False
        self._version = 0

    # subclasses implement _forward/_backward and spec()
    def spec(self) -> tuple[int, ...]:
        raise NotImplementedError

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, cache, dout):
        raise NotImplementedError

    def forward(self, x):
        out, cache = self._forward(x)
        cache["_owner"] = id(self)
        cache["_version"] = self._version
        return out, cache

    def backward(self, cache, upstream_grad):
        if not cache or cache.get("_owner") != id(self):
            raise ContractError(f"{self.kind}: backward needs the cache from this layer's forward call")
        if cache["_version"] != self._version:
            raise ContractError(f"{self.kind}: stale cache, weights changed since forward")
        return self._backward(cache, upstream_grad)

    def __call__(self, x):
        return self.forward(x)[0]

    def mark_updated(self):
        self._version += 1

    @property
    def dtype(self):
        for p in self.params.values():
            return p.dtype
        return np.float32

    def astype(self, dtype):
        clone = self.__class__.from_spec(self.spec(), {k: v.astype(dtype) for k, v in self.params.items()})
        clone.frozen = self.frozen
        return clone

    @classmethod
    def from_spec(cls, spec, params):
        layer = cls(*spec)
        for name in cls.param_names:
            if params[name].shape != layer.params[name].shape:
                raise DimensionError(
                    f"{cls.kind}: tensor {name!r} has shape {params[name].shape}, spec wants {layer.params[name].shape}"
                )
            layer.params[name] = params[name]
        return layer

    def __repr__(self):
        return f"{type(self).__name__}{self.spec()}"


def rowmm(x, W):
    """``x @ W`` for the last axis of ``x``, one row at a time.

    Keeps each sample's result independent of how many rows share the call.
    """
    return np.matmul(x[..., None, :], W)[..., 0, :]


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


class Conv2D(Layer):
    """Same-padded stride-1 convolution followed by ELU."""

    kind = "conv2d"
    tag = 1
    param_names = ("W", "b")

    def __init__(self, in_channels, out_channels, kernel_size=3, rng=None, dtype=np.float32):
        super().__init__()
        if min(in_channels, out_channels, kernel_size) < 1 or kernel_size % 2 == 0:
            raise DimensionError(f"conv2d: bad dims ({in_channels}, {out_channels}, {kernel_size})")
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size**2
        fan_out = out_channels * kernel_size**2
        self.params["W"] = glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, fan_out, dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)

    def spec(self):
        return (self.in_channels, self.out_channels, self.kernel_size)

    def _forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"conv2d: expected (B, {self.in_channels}, T, F), got {x.shape}")
        W, b = self.params["W"], self.params["b"]
        x = x.astype(W.dtype, copy=False)
        B, C, T, F = x.shape
        k, p = self.kernel_size, self.kernel_size // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((B, C, k, k, T, F), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + T, j : j + F]
        cols = cols.reshape(B, C * k * k, T * F)
        pre = W.reshape(self.out_channels, -1) @ cols + b[:, None]
        out = _elu(pre)
        return out.reshape(B, self.out_channels, T, F), {"cols": cols, "out": out, "pre": pre, "shape": x.shape}

    def _backward(self, cache, dout):
        W = self.params["W"]
        B, C, T, F = cache["shape"]
        k, p = self.kernel_size, self.kernel_size // 2
        dout = dout.reshape(B, self.out_channels, T * F)
        dpre = dout * np.where(cache["pre"] > 0, 1.0, cache["out"] + 1.0).astype(dout.dtype)
        dW = np.tensordot(dpre, cache["cols"], axes=([0, 2], [0, 2])).reshape(W.shape)
        db = dpre.sum(axis=(0, 2))
        dcols = (W.reshape(self.out_channels, -1).T @ dpre).reshape(B, C, k, k, T, F)
        dxp = np.zeros((B, C, T + 2 * p, F + 2 * p), dtype=dpre.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + T, j : j + F] += dcols[:, :, i, j]
        return dxp[:, :, p : p + T, p : p + F], {"W": dW, "b": db}


class MaxPool2D(Layer):
    kind = "max_pool"
    tag = 2

    def __init__(self, pool_time, pool_freq):
        super().__init__()
        if pool_time < 1 or pool_freq < 1:
            raise DimensionError(f"max_pool: pool sizes must be positive, got ({pool_time}, {pool_freq})")
        self.pool_time, self.pool_freq = pool_time, pool_freq

    def spec(self):
        return (self.pool_time, self.pool_freq)

    def _forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"max_pool: expected 4-D input, got {x.shape}")
        B, C, T, F = x.shape
        pt, pf = self.pool_time, self.pool_freq
        if T % pt or F % pf:
            raise DimensionError(f"max_pool: input {x.shape} not divisible by pool ({pt}, {pf})")
        windows = x.reshape(B, C, T // pt, pt, F // pf, pf).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, T // pt, F // pf, pt * pf)
        idx = windows.argmax(axis=-1)[..., None]
        out = np.take_along_axis(windows, idx, axis=-1)[..., 0]
        return out, {"idx": idx, "shape": x.shape}

    def _backward(self, cache, dout):
        B, C, T, F = cache["shape"]
        pt, pf = self.pool_time, self.pool_freq
        d = np.zeros((B, C, T // pt, F // pf, pt * pf), dtype=dout.dtype)
        np.put_along_axis(d, cache["idx"], dout[..., None], axis=-1)
        dx = d.reshape(B, C, T // pt, F // pf, pt, pf).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, T, F)
        return dx, {}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRU(Layer):
    """Single-layer GRU returning every hidden state, ``h_0 = 0``.

    Gate order in the stacked weights is (update z, reset r, candidate n)::

        z = sigmoid(x Wx_z + h Wh_z + b_z)
        r = sigmoid(x Wx_r + h Wh_r + b_r)
        n = tanh(x Wx_n + (r * h) Wh_n + b_n)
        h' = (1 - z) * n + z * h

    A 4-D input ``(B, C, T, F)`` is read as the sequence ``(B, T, C * F)``.
    """

    kind = "gru"
    tag = 3
    param_names = ("Wx", "Wh", "b")

    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        super().__init__()
        if input_size < 1 or hidden_size < 1:
            raise DimensionError(f"gru: bad dims ({input_size}, {hidden_size})")
        self.input_size, self.hidden_size = input_size, hidden_size
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden_size
        self.params["Wx"] = glorot_uniform(rng, (input_size, 3 * H), input_size, H, dtype)
        self.params["Wh"] = glorot_uniform(rng, (H, 3 * H), H, H, dtype)
        self.params["b"] = np.zeros(3 * H, dtype=dtype)

    def spec(self):
        return (self.input_size, self.hidden_size)

    def _forward(self, x):
        in_shape = x.shape
        if x.ndim == 4:
            B, C, T, F = x.shape
            x = x.transpose(0, 2, 1, 3).reshape(B, T, C * F)
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise DimensionError(f"gru: expected (B, T, {self.input_size}) input, got {in_shape}")
        Wx, Wh, b = self.params["Wx"], self.params["Wh"], self.params["b"]
        x = x.astype(Wx.dtype, copy=False)
        B, T, _ = x.shape
        H = self.hidden_size
        xw = x @ Wx + b  # (B, T, 3H)
        hs = np.zeros((B, T + 1, H), dtype=Wx.dtype)
        zs = np.empty((B, T, H), dtype=Wx.dtype)
        rs, ns = np.empty_like(zs), np.empty_like(zs)
        for t in range(T):
            h = hs[:, t]
            hw = rowmm(h, Wh[:, : 2 * H])
            z = _sigmoid(xw[:, t, :H] + hw[:, :H])
            r = _sigmoid(xw[:, t, H : 2 * H] + hw[:, H:])
            n = np.tanh(xw[:, t, 2 * H :] + rowmm(r * h, Wh[:, 2 * H :]))
            hs[:, t + 1] = (1.0 - z) * n + z * h
            zs[:, t], rs[:, t], ns[:, t] = z, r, n
        cache = {"x": x, "hs": hs, "z": zs, "r": rs, "n": ns, "in_shape": in_shape}
        return hs[:, 1:], cache

    def _backward(self, cache, dout):
        Wx, Wh = self.params["Wx"], self.params["Wh"]
        x, hs, zs, rs, ns = cache["x"], cache["hs"], cache["z"], cache["r"], cache["n"]
        B, T, _ = x.shape
        H = self.hidden_size
        da = np.empty((B, T, 3 * H), dtype=dout.dtype)
        dWh = np.zeros_like(Wh, dtype=dout.dtype)
        dh_next = np.zeros((B, H), dtype=dout.dtype)
        for t in reversed(range(T)):
            h_prev, z, r, n = hs[:, t], zs[:, t], rs[:, t], ns[:, t]
            dh = dout[:, t] + dh_next
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            dz = dh * (h_prev - n)
            drh = da_n @ Wh[:, 2 * H :].T
            da_r = drh * h_prev * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            da[:, t, :H], da[:, t, H : 2 * H], da[:, t, 2 * H :] = da_z, da_r, da_n
            dWh[:, 2 * H :] += (r * h_prev).T @ da_n
            dWh[:, : 2 * H] += h_prev.T @ da[:, t, : 2 * H]
            dh_next = dh * z + drh * r + da[:, t, : 2 * H] @ Wh[:, : 2 * H].T
        dWx = x.reshape(-1, self.input_size).T @ da.reshape(-1, 3 * H)
        db = da.sum(axis=(0, 1))
        dx = da @ Wx.T
        in_shape = cache["in_shape"]
        if len(in_shape) == 4:
            Bq, C, Tq, F = in_shape
            dx = dx.reshape(Bq, Tq, C, F).transpose(0, 2, 1, 3)
        return dx, {"Wx": dWx, "Wh": dWh, "b": db}


class Dense(Layer):
    """Affine map with linear activation."""

    kind = "dense"
    tag = 4
    param_names = ("W", "b")

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise DimensionError(f"{self.kind}: bad dims ({in_features}, {out_features})")
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)

    def spec(self):
        return (self.in_features, self.out_features)

    def _forward(self, x):
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"{self.kind}: expected last dim {self.in_features}, got shape {x.shape}")
        W = self.params["W"]
        x = x.astype(W.dtype, copy=False)
        return rowmm(x, W) + self.params["b"], {"x": x}

    def _backward(self, cache, dout):
        x = cache["x"]
        x2 = x.reshape(-1, self.in_features)
        d2 = dout.reshape(-1, self.out_features)
        return dout @ self.params["W"].T, {"W": x2.T @ d2, "b": d2.sum(axis=0)}


class SoftmaxHead(Dense):
    """Dense layer producing class logits; the softmax itself lives in the loss."""

    kind = "softmax_head"
    tag = 5


class Attention(Layer):
    kind = "attn"
    tag = 6
    param_names = ("W_s", "W_h", "v")

    def __init__(self, dim, attn_dim, rng=None, dtype=np.float32):
        super().__init__()
        if dim < 1 or attn_dim < 1:
            raise DimensionError(f"attn: bad dims ({dim}, {attn_dim})")
        self.dim, self.attn_dim = dim, attn_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        p = attn.AttentionParams.init(dim, attn_dim, rng, dtype)
        self.params.update(W_s=p.W_s, W_h=p.W_h, v=p.v)

    def spec(self):
        return (self.dim, self.attn_dim)

    @property
    def attention_params(self) -> attn.AttentionParams:
        return attn.AttentionParams(self.params["W_s"], self.params["W_h"], self.params["v"])

    def _forward(self, x):
        x = x.astype(self.params["v"].dtype, copy=False)
        out, cache = attn.attention_forward(x, self.attention_params)
        return out.c, {"attn": cache, "alpha": out.alpha}

    def _backward(self, cache, dout):
        return attn.attention_backward(cache["attn"], dout)


LAYER_TYPES = {cls.tag: cls for cls in (Conv2D, MaxPool2D, GRU, Dense, SoftmaxHead, Attention)}
