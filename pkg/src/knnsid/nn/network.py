"""Sequential network container, the attention-CRNN builder, and the TKNM file format."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError, FormatError, MagicMismatchError, TruncatedFileError, VersionMismatchError
from .functional import cross_entropy, softmax
from .layers import GRU, LAYER_TYPES, Attention, Conv2D, Layer, MaxPool2D, SoftmaxHead

MODEL_MAGIC = b"TKNM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    conv_channels: tuple[int, ...] = (16, 32, 32, 32)
    kernel_size: int = 3
    # (time, mel) pooling after each conv; the product over mel must equal n_mels
    pool_sizes: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (1, 2), (1, 8))
    gru_hidden: int = 32
    attention_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_sizes", tuple((int(a), int(b)) for a, b in self.pool_sizes))
        if len(self.conv_channels) != len(self.pool_sizes):
            raise ConfigError("conv_channels and pool_sizes must have the same length")
        if min(self.conv_channels) < 1 or self.gru_hidden < 1 or self.attention_dim < 1:
            raise ConfigError("network dimensions must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def output_grid(self, n_frames: int, n_mels: int) -> tuple[int, int]:
        t, f = n_frames, n_mels
        for pt, pf in self.pool_sizes:
            if t % pt or f % pf:
                raise ConfigError(f"pool ({pt}, {pf}) does not divide feature grid ({t}, {f})")
            t, f = t // pt, f // pf
        return t, f


class Network:
    """Ordered layers ending in an attention embedding and (optionally) a softmax head."""

    def __init__(self, layers: list[Layer], rng_seed: int = 0):
        self.layers = list(layers)
        self.rng_seed = rng_seed

    # -- structure --------------------------------------------------------
    @property
    def has_head(self) -> bool:
        return bool(self.layers) and isinstance(self.layers[-1], SoftmaxHead)

    @property
    def extractor(self) -> list[Layer]:
        return self.layers[:-1] if self.has_head else self.layers

    @property
    def head(self) -> SoftmaxHead:
        if not self.has_head:
            raise DimensionError("network has no softmax head")
        return self.layers[-1]

    @property
    def embedding_dim(self) -> int:
        for layer in reversed(self.extractor):
            if isinstance(layer, Attention):
                return layer.dim
        raise DimensionError("network has no attention layer")

    def freeze_extractor(self):
        for layer in self.extractor:
            layer.frozen = True

    def astype(self, dtype) -> "Network":
        return Network([layer.astype(dtype) for layer in self.layers], self.rng_seed)

    def n_trainable(self) -> int:
        return sum(p.size for layer in self.layers if not layer.frozen for p in layer.params.values())

    # -- computation ------------------------------------------------------
    def _run(self, x, layers, keep_cache):
        caches = []
        for layer in layers:
            x, cache = layer.forward(x)
            if keep_cache:
                caches.append(cache)
        return x, caches

    def embed(self, x, batch_size: int = 64) -> np.ndarray:
        """Embeddings for ``(B, 1, T, F)`` input, evaluated in chunks."""
        if len(x) == 0:
            return np.zeros((0, self.embedding_dim), dtype=self.layers[0].dtype)
        parts = [self._run(x[i : i + batch_size], self.extractor, False)[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(parts, axis=0)

    def logits(self, x, batch_size: int = 64) -> np.ndarray:
        return self.head(self.embed(x, batch_size))

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        return softmax(self.logits(x, batch_size))

    def loss(self, x, y) -> float:
        out, _ = self._run(x, self.layers, False)
        return cross_entropy(softmax(out), y)[0]

    def loss_and_grads(self, x, y):
        """Mean cross-entropy over the batch and per-layer gradient dicts."""
        out, caches = self._run(x, self.layers, True)
        loss, d = cross_entropy(softmax(out), y)
        grads: list[dict] = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            d, grads[i] = self.layers[i].backward(caches[i], d)
        return loss, grads

    def weights_snapshot(self) -> list[dict]:
        return [{k: v.copy() for k, v in layer.params.items()} for layer in self.layers]

    def __repr__(self):
        return f"Network({self.layers})"


def build_network(cfg: NetworkConfig, n_mels: int, n_classes: int, seed: int = 0,
                  n_frames: int = 32, dtype=np.float32) -> Network:
    """Conv/pool stack -> GRU -> attention -> softmax head."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    _, f_out = cfg.output_grid(n_frames, n_mels)
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    in_ch = 1
    for ch, (pt, pf) in zip(cfg.conv_channels, cfg.pool_sizes):
        layers.append(Conv2D(in_ch, ch, cfg.kernel_size, rng=rng, dtype=dtype))
        layers.append(MaxPool2D(pt, pf))
        in_ch = ch
    layers.append(GRU(in_ch * f_out, cfg.gru_hidden, rng=rng, dtype=dtype))
    layers.append(Attention(cfg.gru_hidden, cfg.attention_dim, rng=rng, dtype=dtype))
    layers.append(SoftmaxHead(cfg.gru_hidden, n_classes, rng=rng, dtype=dtype))
    return Network(layers, rng_seed=seed)


# --- serialization -------------------------------------------------------------


def save_network(net: Network, path) -> None:
    buf = bytearray(struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(net.layers)))
    for layer in net.layers:
        spec = layer.spec()
        buf += struct.pack("<BB", layer.tag, len(spec))
        buf += struct.pack(f"<{len(spec)}I", *spec)
        buf += struct.pack("<BB", int(layer.frozen), len(layer.param_names))
        for name in layer.param_names:
            t = np.asarray(layer.params[name], dtype="<f4")
            buf += struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape)
            buf += np.ascontiguousarray(t).tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path
        self.where = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: file truncated while reading {self.where}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def load_network(path, rng_seed: int = 0) -> Network:
    r = _Reader(Path(path).read_bytes(), path)
    magic, version, n_layers = r.unpack("4sII")
    if magic != MODEL_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"{path}: model format version {version}, expected {MODEL_VERSION}")
    layers = []
    for i in range(n_layers):
        r.where = f"layer {i}"
        tag, n_spec = r.unpack("BB")
        cls = LAYER_TYPES.get(tag)
        if cls is None:
            raise FormatError(f"{path}: layer {i} has unknown kind tag {tag}")
        r.where = f"layer {i} ({cls.kind})"
        spec = r.unpack(f"{n_spec}I")
        frozen, n_tensors = r.unpack("BB")
        if n_tensors != len(cls.param_names):
            raise FormatError(f"{path}: layer {i} ({cls.kind}) has {n_tensors} tensors, expected {len(cls.param_names)}")
        params = {}
        for name in cls.param_names:
            r.where = f"layer {i} ({cls.kind}) tensor {name!r}"
            (rank,) = r.unpack("B")
            dims = r.unpack(f"{rank}I")
            n = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        layer = cls.from_spec(spec, params)
        layer.frozen = bool(frozen)
        layers.append(layer)
    return Network(layers, rng_seed=rng_seed)
