"""Log-mel front end: WAV I/O, STFT, mel filterbank and 32-frame blocks."""

from __future__ import annotations

import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, ContractError, FormatError, MagicMismatchError, TruncatedFileError, VersionMismatchError

BLOCK_FRAMES = 32

FEATURE_MAGIC = b"TKNN"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16000
    window_length: int = 1000
    hop_length: int = 500
    fft_size: int = 1024
    n_mels: int = 64
    f_min: float = 30.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sample_rate <= 0 or self.window_length <= 0 or self.hop_length <= 0:
            raise ConfigError("sample_rate, window_length and hop_length must be positive")
        if self.fft_size < self.window_length:
            raise ConfigError(f"fft_size {self.fft_size} < window_length {self.window_length}")
        if self.hop_length > self.window_length:
            raise ConfigError(f"hop_length {self.hop_length} > window_length {self.window_length}")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ConfigError(f"need 0 <= f_min < f_max <= sr/2, got {self.f_min}, {self.f_max}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        block_seconds = BLOCK_FRAMES * self.hop_length / self.sample_rate
        if abs(block_seconds - 1.0) > 0.05:
            raise ConfigError(f"32 frames span {block_seconds:.3f} s; hop_length must make a block ~1 s")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpectrogramConfig":
        return cls(**d)


@dataclass
class AudioClip:
    """Mono PCM samples in [-1, 1]. 2-D input is treated as (samples, channels) and averaged."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 2:
            x = x.mean(axis=1)
        if x.ndim != 1:
            raise ContractError(f"expected 1-D or (n, channels) samples, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ContractError("audio samples must be finite")
        self.samples = x

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelBlock:
    values: np.ndarray  # (32, n_mels) float32
    source_song: str = ""
    block_index: int = 0


def hann_window(n: int) -> np.ndarray:
    # periodic form, the usual choice for spectral analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """Power spectrogram, one row per frame, no centering.

    Returns an array of shape ``(n_frames, fft_size // 2 + 1)`` where
    ``n_frames = (len - window_length) // hop_length + 1``; a clip shorter
    than one window gives zero rows.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ContractError(f"clip sample rate {clip.sample_rate} != config {cfg.sample_rate}")
    x = clip.samples
    if len(x) < cfg.window_length:
        return np.zeros((0, cfg.n_bins))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * hann_window(cfg.window_length), n=cfg.fft_size, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    """Edges of the triangular filters in Hz (n_mels + 2 points)."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Peak-normalized triangular filters on the HTK mel scale, shape ``(n_mels, n_bins)``."""
    edges = mel_center_frequencies(cfg)
    bin_freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lo) / (mid - lo)
    falling = (hi - bin_freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(~(fb > 0).any(axis=1))
    if empty.size:
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for fft_size={cfg.fft_size}: filters {empty.tolist()} cover no bins"
        )
    return fb


_FILTERBANK_CACHE: dict[SpectrogramConfig, np.ndarray] = {}


def _cached_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    fb = _FILTERBANK_CACHE.get(cfg)
    if fb is None:
        fb = _FILTERBANK_CACHE[cfg] = mel_filterbank(cfg)
    return fb


def log_mel_frames(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """Log-mel frames with ``len // hop_length`` rows.

    The clip is zero-padded by ``(window_length - hop_length) / 2`` on each
    side so that one second of audio yields exactly 32 frames.
    """
    pad = cfg.window_length - cfg.hop_length
    padded = AudioClip(np.pad(clip.samples, (pad // 2, pad - pad // 2)), clip.sample_rate)
    power = stft(padded, cfg)
    mel = power @ _cached_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def log_mel_block_array(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """Stacked blocks as a ``(n_blocks, 32, n_mels)`` float32 array; partial tail dropped."""
    frames = log_mel_frames(clip, cfg)
    n_blocks = len(frames) // BLOCK_FRAMES
    out = frames[: n_blocks * BLOCK_FRAMES].reshape(n_blocks, BLOCK_FRAMES, cfg.n_mels)
    return out.astype(np.float32)


def log_mel_blocks(clip: AudioClip, cfg: SpectrogramConfig, song_id: str = "") -> list[MelBlock]:
    arr = log_mel_block_array(clip, cfg)
    return [MelBlock(values=arr[i], source_song=song_id, block_index=i) for i in range(len(arr))]


# --- WAV -----------------------------------------------------------------


def resample_linear(samples: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out or len(samples) == 0:
        return samples
    n_out = int(round(len(samples) * sr_out / sr_in))
    t_out = np.arange(n_out) / sr_out
    t_in = np.arange(len(samples)) / sr_in
    return np.interp(t_out, t_in, samples)


def read_wav(path, target_rate: int | None = None) -> AudioClip:
    """Read 16-bit PCM WAV; stereo is averaged, other rates linearly resampled."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise FormatError(f"{path}: only 16-bit PCM is supported (sample width {wf.getsampwidth()})")
        n_ch = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(axis=1)
    if target_rate is not None and rate != target_rate:
        data = resample_linear(data, rate, target_rate)
        rate = target_rate
    return AudioClip(data, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


# --- feature cache ---------------------------------------------------------


def write_feature_cache(path, blocks: np.ndarray) -> None:
    blocks = np.asarray(blocks, dtype="<f4")
    if blocks.ndim != 3 or blocks.shape[1] != BLOCK_FRAMES:
        raise ContractError(f"expected (n, 32, n_mels) blocks, got {blocks.shape}")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, blocks.shape[0], blocks.shape[2]))
        fh.write(np.ascontiguousarray(blocks).tobytes())


def read_feature_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated feature header")
    magic, version, n_blocks, n_mels = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{path}: feature format version {version}, expected {FEATURE_VERSION}")
    n = n_blocks * BLOCK_FRAMES * n_mels
    body = data[_FEATURE_HEADER.size :]
    if len(body) < 4 * n:
        raise TruncatedFileError(f"{path}: expected {n} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4", count=n).reshape(n_blocks, BLOCK_FRAMES, n_mels).astype(np.float32)


class LogMelBlockTransformer(TransformerMixin, BaseEstimator):
    """Turn a list of clips (or raw sample arrays) into stacked log-mel blocks.

    ``transform`` returns ``(n_blocks_total, 32, n_mels)``; ``song_index_``
    is not stored because the transformer is stateless, use
    ``transform_songs`` to keep the per-song grouping.
    """

    def __init__(self, sample_rate=16000, window_length=1000, hop_length=500, fft_size=1024,
                 n_mels=64, f_min=30.0, f_max=8000.0, log_floor=1e-10):
        self.sample_rate = sample_rate
        self.window_length = window_length
        self.hop_length = hop_length
        self.fft_size = fft_size
        self.n_mels = n_mels
        self.f_min = f_min
        self.f_max = f_max
        self.log_floor = log_floor

    def _config(self) -> SpectrogramConfig:
        return SpectrogramConfig(**self.get_params())

    def fit(self, X, y=None):
        self.config_ = self._config()
        self.n_features_out_ = (BLOCK_FRAMES, self.n_mels)
        return self

    def _as_clip(self, x) -> AudioClip:
        if isinstance(x, AudioClip):
            if x.sample_rate != self.sample_rate:
                return AudioClip(resample_linear(x.samples, x.sample_rate, self.sample_rate), self.sample_rate)
            return x
        return AudioClip(np.asarray(x, dtype=np.float64), self.sample_rate)

    def transform_songs(self, X) -> list[np.ndarray]:
        cfg = self._config()
        return [log_mel_block_array(self._as_clip(x), cfg) for x in X]

    def transform(self, X):
        songs = self.transform_songs(X)
        if not songs:
            return np.zeros((0, BLOCK_FRAMES, self.n_mels), dtype=np.float32)
        return np.concatenate(songs, axis=0)
