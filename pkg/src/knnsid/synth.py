"""Deterministic synthetic singers: harmonic voices with vibrato over pads and percussion.

Each singer is a fixed timbre (partial gains, spectral tilt, two resonances,
vibrato style, pitch register). Songs vary the melody, the accompaniment
and its level, so the only stable cue across a singer's songs is the voice.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .evaluation import DatasetManifest, SongRecord, split_random
from .features import AudioClip, write_wav

N_PARTIALS = 12
SAMPLE_RATE = 16000
LOW_REGIME = (43.0, 50.0)  # MIDI centers, roughly G2..D3
HIGH_REGIME = (60.0, 67.0)  # roughly C4..G4
PITCH_SPAN = 5  # semitones either side of the center
PEAK = 0.9


@dataclass(frozen=True, eq=False)
class SingerProfile:
    singer_id: int
    partial_gains: np.ndarray = field(repr=False)  # (12,) linear, >= 0
    tilt_db_per_octave: float = -6.0
    vibrato_rate: float = 5.5  # Hz
    vibrato_depth: float = 40.0  # cents
    pitch_range: tuple[int, int] = (57, 67)  # MIDI, inclusive
    resonances: tuple[float, float] = (600.0, 1800.0)  # Hz
    resonance_gain: float = 4.0
    breathiness: float = 0.02

    def __post_init__(self):
        if np.any(self.partial_gains < 0):
            raise ContractError("partial gains must be nonnegative")
        if not 3.0 <= self.vibrato_rate <= 9.0:
            raise ContractError(f"vibrato rate {self.vibrato_rate} outside [3, 9] Hz")
        if self.pitch_range[0] > self.pitch_range[1]:
            raise ContractError(f"empty pitch range {self.pitch_range}")

    @property
    def low_regime(self) -> bool:
        return np.mean(self.pitch_range) < np.mean([LOW_REGIME[1], HIGH_REGIME[0]])


@dataclass(frozen=True, eq=False)
class SongSpec:
    profile: SingerProfile
    duration: float = 6.0
    melody_seed: int = 0
    accompaniment_gain: float = 0.5
    noise_floor: float = 0.01
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.duration < 2.0:
            raise ContractError(f"song duration must be >= 2 s, got {self.duration}")
        if not 0.0 <= self.accompaniment_gain < 1.0:
            raise ContractError(f"accompaniment gain {self.accompaniment_gain} outside [0, 1)")
        if self.noise_floor < 0:
            raise ContractError("noise floor must be nonnegative")


def _midi_to_hz(m):
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=np.float64) - 69.0) / 12.0)


def make_profile(singer_index: int, master_seed: int, n_singers: int = 2) -> SingerProfile:
    """Singer ``singer_index`` of ``n_singers``; the first half sing in the low register."""
    if singer_index < 0:
        raise ContractError("singer_index must be >= 0")
    rng = np.random.default_rng([master_seed, singer_index, 0x5106])
    low = singer_index < n_singers / 2
    lo, hi = LOW_REGIME if low else HIGH_REGIME
    center = int(round(rng.uniform(lo, hi)))
    tilt = rng.uniform(-10.0, -3.0)
    k = np.arange(1, N_PARTIALS + 1)
    gains = 10.0 ** (tilt * np.log2(k) / 20.0) * rng.uniform(0.15, 1.0, N_PARTIALS)
    f1 = rng.uniform(350.0, 900.0) if low else rng.uniform(500.0, 1100.0)
    f2 = rng.uniform(1200.0, 3000.0)
    return SingerProfile(
        singer_id=singer_index,
        partial_gains=gains,
        tilt_db_per_octave=float(tilt),
        vibrato_rate=float(rng.uniform(3.5, 8.0)),
        vibrato_depth=float(rng.uniform(15.0, 70.0)),
        pitch_range=(center - PITCH_SPAN, center + PITCH_SPAN),
        resonances=(float(f1), float(f2)),
        resonance_gain=float(rng.uniform(2.0, 6.0)),
        breathiness=float(rng.uniform(0.0, 0.05)),
    )


def _melody(rng, profile: SingerProfile, n: int, sr: int):
    """Per-sample MIDI pitch and a 0/1-ish amplitude envelope (notes with short rests)."""
    pitch = np.zeros(n)
    env = np.zeros(n)
    t = 0
    ramp = int(0.02 * sr)
    lo, hi = profile.pitch_range
    while t < n:
        length = int(rng.uniform(0.2, 0.6) * sr)
        rest = int(rng.uniform(0.0, 0.08) * sr) if rng.random() < 0.3 else 0
        note = rng.integers(lo, hi + 1)
        end = min(n, t + length)
        pitch[t:end] = note
        seg = np.ones(end - t)
        r = min(ramp, (end - t) // 2)
        if r > 0:
            seg[:r] = np.linspace(0.0, 1.0, r)
            seg[-r:] = np.linspace(1.0, 0.0, r)
        env[t:end] = seg
        if end < n:
            pitch[end : min(n, end + rest)] = note
        t = end + rest
    return pitch, env


def _resonance(freqs, profile: SingerProfile):
    g = np.ones_like(freqs)
    for fc in profile.resonances:
        bw = 0.25 * fc
        g = g + profile.resonance_gain * np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    return g


def render_voice(spec: SongSpec):
    """Voice only, plus its per-sample fundamental in Hz."""
    p = spec.profile
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    rng = np.random.default_rng([spec.melody_seed, 0x701CE])
    pitch, env = _melody(rng, p, n, sr)
    t = np.arange(n) / sr
    vib = (p.vibrato_depth / 1200.0) * np.sin(2 * np.pi * p.vibrato_rate * t + rng.uniform(0, 2 * np.pi))
    f0 = _midi_to_hz(pitch) * 2.0**vib
    phase = 2 * np.pi * np.cumsum(f0) / sr
    voice = np.zeros(n)
    nyq_guard = 0.48 * sr
    for k in range(1, N_PARTIALS + 1):
        fk = k * f0
        amp = p.partial_gains[k - 1] * _resonance(fk, p) * (fk < nyq_guard)
        voice += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    voice *= env
    if p.breathiness > 0:
        voice += p.breathiness * np.std(voice) * rng.standard_normal(n) * env
    return voice, f0


def render_accompaniment(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Chord pad (changes every 2 s) plus decaying noise bursts on the beat."""
    t = np.arange(n) / sr
    pad = np.zeros(n)
    chord_len = int(2.0 * sr)
    n_harm = int(rng.integers(3, 8))
    for start in range(0, n, chord_len):
        end = min(n, start + chord_len)
        root = rng.integers(40, 60)
        intervals = (0, 4, 7) if rng.random() < 0.5 else (0, 3, 7)
        seg = np.zeros(end - start)
        for iv in intervals:
            f = _midi_to_hz(root + iv)
            for h in range(1, n_harm + 1):
                if h * f < 0.45 * sr:
                    seg += np.sin(2 * np.pi * h * f * t[start:end] + rng.uniform(0, 2 * np.pi)) / h
        fade = min(400, (end - start) // 2)
        seg[:fade] *= np.linspace(0, 1, fade)
        seg[-fade:] *= np.linspace(1, 0, fade)
        pad[start:end] = seg
    drums = np.zeros(n)
    beat = int(sr * 60.0 / rng.uniform(80, 140))
    decay = np.exp(-np.arange(int(0.08 * sr)) / (rng.uniform(0.01, 0.04) * sr))
    for start in range(int(rng.integers(0, beat)), n, beat):
        burst = rng.standard_normal(len(decay)) * decay
        end = min(n, start + len(burst))
        drums[start:end] += burst[: end - start]
    pad /= np.sqrt(np.mean(pad**2)) + 1e-12
    drums /= np.sqrt(np.mean(drums**2)) + 1e-12
    return pad + rng.uniform(0.3, 1.0) * drums


def render_song(spec: SongSpec) -> AudioClip:
    """Voice + gain * accompaniment + noise, peak-normalized to 0.9."""
    voice, _ = render_voice(spec)
    n = len(voice)
    rng = np.random.default_rng([spec.melody_seed, 0xACC0])
    mix = voice / (np.sqrt(np.mean(voice**2)) + 1e-12)
    if spec.accompaniment_gain > 0:
        mix = mix + spec.accompaniment_gain * render_accompaniment(n, spec.sample_rate, rng)
    if spec.noise_floor > 0:
        mix = mix + spec.noise_floor * rng.standard_normal(n)
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix = mix * (PEAK / peak)
    return AudioClip(mix, spec.sample_rate)


def _song_seed(master_seed: int, singer: int, song: int) -> int:
    return zlib.crc32(f"{master_seed}:{singer}:{song}".encode())


def song_spec(singer: int, song: int, n_singers: int, duration: float, master_seed: int) -> SongSpec:
    profile = make_profile(singer, master_seed, n_singers)
    seed = _song_seed(master_seed, singer, song)
    rng = np.random.default_rng([seed, 0x6A1])
    return SongSpec(
        profile=profile,
        duration=duration,
        melody_seed=seed,
        accompaniment_gain=float(rng.uniform(0.2, 0.8)),
        noise_floor=float(rng.uniform(0.005, 0.03)),
    )


def _render_to(args):
    spec, path = args
    write_wav(path, render_song(spec))


def generate_corpus(n_singers: int, songs_per_singer: int, duration: float, master_seed: int,
                    out_dir, jobs: int = 1) -> DatasetManifest:
    """Write WAVs plus ``manifest.jsonl`` (8:1:1 split) under ``out_dir``."""
    if n_singers < 2:
        raise ContractError("need at least 2 singers")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, work = [], []
    for i in range(n_singers):
        (out / f"singer_{i:02d}").mkdir(exist_ok=True)
        for j in range(songs_per_singer):
            rel = f"singer_{i:02d}/song_{j:03d}.wav"
            records.append(SongRecord(f"s{i:02d}_{j:03d}", rel, f"singer_{i:02d}"))
            work.append((song_spec(i, j, n_singers, duration, master_seed), out / rel))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            list(pool.map(_render_to, work))
    else:
        for w in work:
            _render_to(w)
    manifest = split_random(records, (8, 1, 1), seed=master_seed)
    manifest.root = out
    manifest.save(out / "manifest.jsonl")
    return manifest
