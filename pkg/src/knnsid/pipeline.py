"""Two-stage workflow: train the attention-CRNN with a softmax head, freeze it,
then swap the head for a cosine KNN layer built from training-block embeddings.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import knn
from .errors import ConfigError, ContractError, DatasetError, DegenerateVectorError, FormatError
from .evaluation import DatasetManifest, SongRecord
from .features import (
    FEATURE_VERSION,
    SpectrogramConfig,
    log_mel_block_array,
    read_feature_cache,
    read_wav,
    write_feature_cache,
)
from .nn import Adam, Network, NetworkConfig, build_network, load_network, save_network
from .nn.network import MODEL_VERSION

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
MODEL_FILE = "model.tknm"
REFERENCE_FILE = "reference.tknr"
META_FILE = "meta.json"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 7

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1 or self.patience < 1 or self.lr <= 0:
            raise ConfigError("batch_size, patience and lr must be positive")

    def to_dict(self):
        return asdict(self)


def prepare_input(blocks) -> np.ndarray:
    """Standardize each block to zero mean / unit variance and add the channel axis."""
    x = np.asarray(blocks, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    mean = x.mean(axis=(1, 2), keepdims=True)
    std = x.std(axis=(1, 2), keepdims=True)
    return ((x - mean) / np.maximum(std, 1e-6))[:, None].astype(np.float32)


# --- feature loading -----------------------------------------------------------


def feature_path(feature_dir, song_id: str) -> Path:
    return Path(feature_dir) / f"{song_id}.tknn"


def _featurize_one(args):
    path, out, cfg_dict = args
    cfg = SpectrogramConfig.from_dict(cfg_dict)
    blocks = log_mel_block_array(read_wav(path, cfg.sample_rate), cfg)
    write_feature_cache(out, blocks)
    return len(blocks)


def featurize_manifest(manifest: DatasetManifest, cfg: SpectrogramConfig, feature_dir, jobs: int = 1) -> dict:
    """Write one feature cache per song plus ``features.json``; returns block counts."""
    out = Path(feature_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(manifest.resolve(r), feature_path(out, r.song_id), cfg.to_dict()) for r in manifest]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            counts = list(pool.map(_featurize_one, work))
    else:
        counts = [_featurize_one(w) for w in work]
    (out / "features.json").write_text(json.dumps({"feature_config": cfg.to_dict(), "format_version": FEATURE_VERSION}, indent=2))
    return {r.song_id: n for r, n in zip(manifest, counts)}


def load_feature_config(feature_dir) -> SpectrogramConfig:
    p = Path(feature_dir) / "features.json"
    if not p.exists():
        raise DatasetError(f"{feature_dir}: no features.json; run featurize first")
    meta = json.loads(p.read_text())
    if meta.get("format_version") != FEATURE_VERSION:
        raise ConfigError(f"{p}: feature format version {meta.get('format_version')}, expected {FEATURE_VERSION}")
    return SpectrogramConfig.from_dict(meta["feature_config"])


@dataclass
class BlockSet:
    blocks: np.ndarray  # (n, 32, n_mels)
    labels: np.ndarray  # (n,) class index
    song_ids: list[str]  # per block
    songs: list[SongRecord]


def load_split(manifest: DatasetManifest, feature_dir, split: str, singers: list[str]) -> BlockSet:
    index = {s: i for i, s in enumerate(singers)}
    blocks, labels, song_ids, songs = [], [], [], []
    for r in manifest.split(split):
        arr = read_feature_cache(feature_path(feature_dir, r.song_id))
        if len(arr) == 0:
            warnings.warn(f"song {r.song_id} is shorter than one block; skipped", stacklevel=2)
            continue
        if r.singer_id not in index:
            raise DatasetError(f"song {r.song_id}: singer {r.singer_id!r} unknown to the model")
        blocks.append(arr)
        labels.extend([index[r.singer_id]] * len(arr))
        song_ids.extend([r.song_id] * len(arr))
        songs.append(r)
    if not blocks:
        raise DatasetError(f"split {split!r} has no usable blocks")
    return BlockSet(np.concatenate(blocks), np.array(labels, dtype=np.int64), song_ids, songs)


# --- stage 1 -----------------------------------------------------------------


@dataclass
class TrainedExtractor:
    network: Network
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def frozen(self) -> bool:
        return all(layer.frozen for layer in self.network.extractor)

    def embed(self, blocks) -> np.ndarray:
        return self.network.embed(prepare_input(blocks))


def _accuracy(net: Network, x, y) -> float:
    return float(np.mean(net.logits(x).argmax(axis=1) == y))


def _mean_loss(net: Network, x, y, chunk: int = 64) -> float:
    return sum(net.loss(x[i : i + chunk], y[i : i + chunk]) * len(y[i : i + chunk]) for i in range(0, len(y), chunk)) / len(y)


def fit_extractor(X_train, y_train, X_val, y_val, n_classes: int, net_cfg: NetworkConfig = NetworkConfig(),
                  train_cfg: TrainConfig = TrainConfig()) -> TrainedExtractor:
    """Train conv/GRU/attention + softmax head; keep the best-validation checkpoint."""
    if n_classes < 2:
        raise DatasetError("classification needs at least 2 singers")
    missing = sorted(set(range(n_classes)) - set(np.unique(y_train).tolist()))
    if missing:
        raise DatasetError(f"classes {missing} have no training blocks")
    x_tr, x_va = prepare_input(X_train), prepare_input(X_val)
    y_tr, y_va = np.asarray(y_train, dtype=np.int64), np.asarray(y_val, dtype=np.int64)
    net = build_network(net_cfg, x_tr.shape[3], n_classes, seed=train_cfg.seed, n_frames=x_tr.shape[2])
    rng = np.random.default_rng(train_cfg.seed)
    opt = Adam(train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)

    history = [{"epoch": 0, "loss": _mean_loss(net, x_tr, y_tr), "val_accuracy": _accuracy(net, x_va, y_va)}]
    best_acc, best_epoch, best_weights = history[0]["val_accuracy"], 0, net.weights_snapshot()
    for epoch in range(1, train_cfg.max_epochs + 1):
        perm = rng.permutation(len(y_tr))
        losses = []
        for i in range(0, len(perm), train_cfg.batch_size):
            idx = perm[i : i + train_cfg.batch_size]
            loss, grads = net.loss_and_grads(x_tr[idx], y_tr[idx])
            opt.step(net, grads)
            losses.append(loss * len(idx))
        val_acc = _accuracy(net, x_va, y_va)
        history.append({"epoch": epoch, "loss": float(np.sum(losses) / len(perm)), "val_accuracy": val_acc})
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, history[-1]["loss"], val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_weights = val_acc, epoch, net.weights_snapshot()
        elif epoch - best_epoch >= train_cfg.patience:
            break
    for layer, w in zip(net.layers, best_weights):
        for name, v in w.items():
            layer.params[name][...] = v
        layer.mark_updated()
    return TrainedExtractor(net, history, best_epoch)


def train_stage1(manifest: DatasetManifest, feature_dir, net_cfg: NetworkConfig = NetworkConfig(),
                 train_cfg: TrainConfig = TrainConfig()):
    """Stage 1 on a featurized manifest; returns ``(TrainedExtractor, singers)``."""
    manifest.validate_for_training()
    singers = manifest.singers
    train = load_split(manifest, feature_dir, "train", singers)
    val = load_split(manifest, feature_dir, "val", singers)
    return fit_extractor(train.blocks, train.labels, val.blocks, val.labels, len(singers), net_cfg, train_cfg), singers


# --- stage 2 -----------------------------------------------------------------


@dataclass
class Prediction:
    song_id: str
    predicted: int
    block_predictions: list[int]
    block_top1: list[float]
    neighbors: list[knn.NeighborSet] | None = None


@dataclass
class KnnNet:
    """Frozen extractor + KNN layer; immutable during prediction."""

    extractor: TrainedExtractor
    head: knn.ReferenceMatrix
    k: int = knn.DEFAULT_K
    singers: list[str] = field(default_factory=list)
    feature_config: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    def __post_init__(self):
        if not self.extractor.frozen:
            raise ContractError("KnnNet needs a frozen extractor")
        if self.head.dim != self.extractor.network.embedding_dim:
            raise ContractError(f"reference dim {self.head.dim} != embedding dim {self.extractor.network.embedding_dim}")
        if self.k < 1:
            raise ContractError("k must be >= 1")

    def embed(self, blocks) -> np.ndarray:
        return self.extractor.embed(blocks)

    def predict_blocks(self, blocks, song_id: str = ""):
        """Per-block (label, NeighborSet) pairs for a ``(n, 32, n_mels)`` array."""
        E = self.embed(blocks)
        out = []
        for i, q in enumerate(E):
            try:
                ns = knn.kneighbors(q, self.head, self.k)
            except DegenerateVectorError as exc:
                raise DegenerateVectorError(f"song {song_id!r} block {i}: {exc}") from exc
            out.append((knn.vote(ns, self.head), ns))
        return out

    def predict_block(self, block, song_id: str = "", block_index: int = 0):
        values = getattr(block, "values", block)
        song_id = getattr(block, "source_song", song_id)
        (label, ns), = self.predict_blocks(np.asarray(values)[None], song_id)
        return label, ns

    def predict_song(self, blocks, song_id: str = "", detail: bool = False) -> Prediction:
        blocks = np.asarray([getattr(b, "values", b) for b in blocks]) if isinstance(blocks, list) else np.asarray(blocks)
        if len(blocks) == 0:
            raise ContractError(f"song {song_id!r} has no blocks")
        results = self.predict_blocks(blocks, song_id)
        labels = [lab for lab, _ in results]
        top1 = [float(ns.scores[0]) for _, ns in results]
        return Prediction(song_id, knn.majority(labels, top1), labels, top1,
                          [ns for _, ns in results] if detail else None)

    def predict_song_softmax(self, blocks, song_id: str = "") -> Prediction:
        """Song label from the stage-1 softmax head, voted the same way."""
        probs = self.extractor.network.predict_proba(prepare_input(blocks))
        labels = probs.argmax(axis=1).tolist()
        top = probs.max(axis=1).tolist()
        return Prediction(song_id, knn.majority(labels, top), labels, top)


def knn_net_from_blocks(extractor: TrainedExtractor, blocks, labels, k: int = knn.DEFAULT_K,
                        singers=None, feature_config=None) -> KnnNet:
    """Freeze ``extractor`` and build the reference matrix from ``blocks``; no weight changes."""
    extractor.network.freeze_extractor()
    E = extractor.embed(blocks)
    ref = knn.build_reference_matrix(E, labels)
    return KnnNet(extractor, ref, k, list(singers or []), feature_config or SpectrogramConfig())


def build_knn_net(extractor: TrainedExtractor, manifest: DatasetManifest, feature_dir, k: int = knn.DEFAULT_K,
                  singers=None) -> KnnNet:
    """Reference columns = every train-split block embedding, in manifest order."""
    singers = singers or manifest.singers
    cfg = load_feature_config(feature_dir)
    train = load_split(manifest, feature_dir, "train", singers)
    return knn_net_from_blocks(extractor, train.blocks, train.labels, k, singers, cfg)


# --- bundle I/O ----------------------------------------------------------------


def save_model(net: KnnNet, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    save_network(net.extractor.network, out / MODEL_FILE)
    knn.save_reference(net.head, out / REFERENCE_FILE)
    meta = {
        "format_versions": {"bundle": BUNDLE_VERSION, "model": MODEL_VERSION, "reference": knn.REFERENCE_VERSION,
                            "features": FEATURE_VERSION},
        "k": net.k,
        "feature_config": net.feature_config.to_dict(),
        "singers": {str(i): name for i, name in enumerate(net.singers)},
        "rng_seed": net.extractor.network.rng_seed,
        "best_epoch": net.extractor.best_epoch,
    }
    (out / META_FILE).write_text(json.dumps(meta, indent=2))


def load_model(path) -> KnnNet:
    d = Path(path)
    try:
        meta = json.loads((d / META_FILE).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: not a model bundle (missing {META_FILE})") from exc
    version = meta.get("format_versions", {}).get("bundle")
    if version != BUNDLE_VERSION:
        raise ConfigError(f"{d}: bundle version {version}, expected {BUNDLE_VERSION}")
    network = load_network(d / MODEL_FILE, rng_seed=meta.get("rng_seed", 0))
    ref = knn.load_reference(d / REFERENCE_FILE)
    singers = [meta["singers"][str(i)] for i in range(len(meta["singers"]))]
    extractor = TrainedExtractor(network, best_epoch=meta.get("best_epoch", 0))
    return KnnNet(extractor, ref, int(meta["k"]), singers, SpectrogramConfig.from_dict(meta["feature_config"]))
