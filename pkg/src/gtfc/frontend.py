"""Audio frontend: log-mel filterbank features, energy VAD, MVN, chunking.

The pipeline mirrors a conventional speaker-recognition front end: 25 ms
Hamming windows every 10 ms, 64 triangular mel filters, a relative
energy gate for voice activity, per-dimension mean-variance normalization
over the voiced frames, and seeded random chunks for training.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

LOG_FLOOR = 1e-10
# VAD log-energies are computed on the 16-bit integer sample scale; the
# default threshold below is only meaningful on that scale.
PCM_SCALE = 32768.0


class EmptySignal(ValueError):
    """Signal shorter than one analysis window (or has no frames)."""


class ConfigError(ValueError):
    """Inconsistent frontend configuration."""


class TooFewFrames(ValueError):
    """Not enough frames to compute statistics."""


class UnsupportedWav(ValueError):
    """WAV file is not canonical PCM 16-bit mono."""


@dataclass
class FrontendConfig:
    """Feature extraction parameters.

    ``fft_size=None`` selects the smallest power of two that fits the
    window; ``mel_high_hz=None`` selects the Nyquist frequency.
    """

    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_mels: int = 64
    fft_size: Optional[int] = None
    mel_low_hz: float = 20.0
    mel_high_hz: Optional[float] = None
    vad_threshold: float = 5.5
    vad_mean_scale: float = 0.5
    chunk_min: int = 300
    chunk_max: int = 800

    def __post_init__(self):
        if self.chunk_min > self.chunk_max:
            raise ConfigError(f"chunk_min {self.chunk_min} > chunk_max {self.chunk_max}")
        if self.chunk_min < 1:
            raise ConfigError("chunk_min must be positive")

    def window_len(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.window_ms / 1000.0))

    def hop_len(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_ms / 1000.0))

    def resolved_fft_size(self, sample_rate: int) -> int:
        win = self.window_len(sample_rate)
        if self.fft_size is None:
            n = 1
            while n < win:
                n *= 2
            return n
        if self.fft_size < win:
            raise ConfigError(f"fft_size {self.fft_size} smaller than window {win}")
        return self.fft_size

    def mel_range(self, sample_rate: int) -> tuple:
        high = self.mel_high_hz if self.mel_high_hz is not None else sample_rate / 2.0
        if not (0 <= self.mel_low_hz < high <= sample_rate / 2.0):
            raise ConfigError(f"invalid mel range [{self.mel_low_hz}, {high}] at {sample_rate} Hz")
        return self.mel_low_hz, high


@dataclass
class UtteranceRecord:
    """Decoded audio with its frame-level features and VAD mask."""

    sample_rate: int
    samples: np.ndarray          # float in [-1, 1]
    features: np.ndarray         # (T, num_mels) log-mel energies
    vad_mask: np.ndarray         # (T,) bool


@dataclass
class ChunkResult:
    """A sampled training chunk. ``short`` marks utterances below chunk_min."""

    features: np.ndarray
    start: int
    length: int
    short: bool


def hz_to_mel(f):
    """Perceptual frequency warp: 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _frame_signal(samples: np.ndarray, window_len: int, hop_len: int) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise UnsupportedWav("expected a mono sample vector")
    n = samples.shape[0]
    if n < window_len:
        raise EmptySignal(f"{n} samples, need at least {window_len}")
    count = 1 + (n - window_len) // hop_len
    idx = np.arange(window_len)[None, :] + hop_len * np.arange(count)[:, None]
    return samples[idx]


def num_frames(num_samples: int, sample_rate: int, config: FrontendConfig) -> int:
    win = config.window_len(sample_rate)
    hop = config.hop_len(sample_rate)
    if num_samples < win:
        return 0
    return 1 + (num_samples - win) // hop


def frame_and_window(samples, sample_rate: int, config: FrontendConfig) -> np.ndarray:
    """Slice the signal into Hamming-windowed frames, dropping the tail.

    Frame t covers samples [t*hop, t*hop + window); the window is
    0.54 - 0.46*cos(2*pi*n/(N-1)).
    """
    win = config.window_len(sample_rate)
    hop = config.hop_len(sample_rate)
    frames = _frame_signal(samples, win, hop)
    return frames * np.hamming(win)


@functools.lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, fft_size: int, num_mels: int,
                   low_hz: float, high_hz: float) -> np.ndarray:
    """Triangular filters with unit peak, equally spaced on the mel scale."""
    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_mels + 2)
    bin_freqs = np.arange(fft_size // 2 + 1) * (sample_rate / fft_size)
    bin_mels = hz_to_mel(bin_freqs)
    bank = np.zeros((num_mels, fft_size // 2 + 1))
    for m in range(num_mels):
        left, center, right = mel_points[m], mel_points[m + 1], mel_points[m + 2]
        rising = (bin_mels - left) / (center - left)
        falling = (right - bin_mels) / (right - center)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def logmel(frames: np.ndarray, sample_rate: int, config: FrontendConfig) -> np.ndarray:
    """Log mel-filterbank energies per windowed frame: (T, num_mels)."""
    fft_size = config.resolved_fft_size(sample_rate)
    low, high = config.mel_range(sample_rate)
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    bank = mel_filterbank(sample_rate, fft_size, config.num_mels, low, high)
    return np.log(power @ bank.T + LOG_FLOOR)


def frame_log_energy(samples, sample_rate: int, config: FrontendConfig) -> np.ndarray:
    """Per-frame log energy of the raw (unwindowed) samples, 16-bit scale."""
    win = config.window_len(sample_rate)
    hop = config.hop_len(sample_rate)
    frames = _frame_signal(samples, win, hop) * PCM_SCALE
    energy = np.maximum((frames * frames).sum(axis=1), LOG_FLOOR)
    return np.log(energy)


def energy_vad(samples, sample_rate: int, config: FrontendConfig) -> np.ndarray:
    """Relative energy gate: voiced iff logE > threshold + scale * mean(logE)."""
    log_e = frame_log_energy(samples, sample_rate, config)
    if log_e.size == 0:
        raise EmptySignal("no frames for VAD")
    cut = config.vad_threshold + config.vad_mean_scale * log_e.mean()
    return log_e > cut


def mvn(features: np.ndarray, voiced_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-dimension mean-variance normalization.

    Statistics come from the voiced frames (when a mask with at least two
    voiced frames is given, otherwise from all frames) and are applied to
    every frame. Dimensions with zero variance normalize to zero.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 2:
        raise TooFewFrames(f"need >= 2 frames, got {features.shape[0]}")
    stat_rows = features
    if voiced_mask is not None and int(np.count_nonzero(voiced_mask)) >= 2:
        stat_rows = features[np.asarray(voiced_mask, dtype=bool)]
    mean = stat_rows.mean(axis=0)
    std = stat_rows.std(axis=0)
    return (features - mean) / (std + 1e-10)


def sample_chunk(features: np.ndarray, seed: int, config: FrontendConfig) -> ChunkResult:
    """Draw a random contiguous chunk of chunk_min..chunk_max frames.

    Length is uniform over [chunk_min, min(chunk_max, available)] and the
    start uniform over the valid range, both from a generator seeded with
    ``seed`` so repeated calls are identical. Utterances shorter than
    chunk_min come back whole with ``short=True``.
    """
    avail = features.shape[0]
    if avail < config.chunk_min:
        return ChunkResult(features, start=0, length=avail, short=True)
    rng = np.random.default_rng(seed)
    hi = min(config.chunk_max, avail)
    length = int(rng.integers(config.chunk_min, hi + 1))
    start = int(rng.integers(0, avail - length + 1))
    return ChunkResult(features[start:start + length], start=start, length=length, short=False)


# -- WAV input/output --------------------------------------------------------


def read_wav(path) -> tuple:
    """Read canonical RIFF/WAVE PCM 16-bit mono: (sample_rate, float samples)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise UnsupportedWav(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise UnsupportedWav(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getcomptype() != "NONE":
            raise UnsupportedWav(f"{path}: compressed WAV not supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return rate, pcm / PCM_SCALE


def write_wav(path, samples, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as PCM 16-bit mono."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    pcm = np.clip(scaled, -PCM_SCALE, PCM_SCALE - 1).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


# -- utterance pipeline ------------------------------------------------------


def extract_utterance(path, config: FrontendConfig) -> UtteranceRecord:
    """Decode one WAV and compute full-length features plus the VAD mask."""
    rate, samples = read_wav(path)
    frames = frame_and_window(samples, rate, config)
    feats = logmel(frames, rate, config)
    mask = energy_vad(samples, rate, config)
    return UtteranceRecord(sample_rate=rate, samples=samples, features=feats, vad_mask=mask)


def model_features(record: UtteranceRecord) -> np.ndarray:
    """Voiced, mean-variance normalized features ready for the embedder."""
    mask = record.vad_mask
    if int(np.count_nonzero(mask)) < 2:
        raise TooFewFrames("fewer than 2 voiced frames")
    return mvn(record.features, mask)[mask]


# -- manifest ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    path: str
    num_frames: int


def write_manifest(path, entries) -> None:
    """One utterance per line: utt_id, speaker_id, path, frames (tab-separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.utt_id}\t{e.speaker_id}\t{e.path}\t{e.num_frames}\n")


def read_manifest(path) -> list:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, speaker_id, feat_path, frames = line.split("\t")
            entries.append(ManifestEntry(utt_id, speaker_id, feat_path, int(frames)))
    return entries


def speaker_of(utt_id: str) -> str:
    """Speaker naming rule: the part of the utterance id before the first '_'."""
    return utt_id.split("_")[0]
