"""Synthetic multi-speaker corpus for desk-scale experiments.

Each speaker is a random spectral-envelope generator: a private codebook
of formant-like envelopes (Gaussian bumps over frequency). An utterance
is a sequence of noise-excited segments, each shaped by one envelope
drawn from the speaker's codebook with small jitter, plus broadband
additive noise. Speakers therefore differ in where spectral energy sits
and how it moves over time, which survives per-utterance feature
normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .frontend import hz_to_mel, mel_to_hz, write_wav
from .metrics import NONTARGET, TARGET, write_trial_list

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class SynthConfig:
    speakers: int = 8
    train_utts: int = 40
    eval_utts: int = 10
    trials: int = 400
    duration_lo: float = 3.2
    duration_hi: float = 4.0
    phones_per_speaker: int = 4
    peaks_per_phone: int = 3
    sample_rate: int = SAMPLE_RATE


def speaker_id(index: int) -> str:
    return f"spk{index:02d}"


def utt_id(speaker: int, split: str, index: int) -> str:
    tag = "t" if split == "train" else "e"
    return f"{speaker_id(speaker)}_{tag}{index:03d}"


def phone_bank(seed: int, speaker: int, config: SynthConfig) -> List[Tuple]:
    """The speaker's codebook of (centers_hz, widths_hz, gains) envelopes.

    Peak centers are drawn uniformly on the mel scale so low and high
    frequencies are equally likely homes for a speaker's energy.
    """
    rng = np.random.default_rng([seed, 1000 + speaker])
    lo, hi = hz_to_mel(300.0), hz_to_mel(7000.0)
    bank = []
    for _ in range(config.phones_per_speaker):
        centers = mel_to_hz(rng.uniform(lo, hi, size=config.peaks_per_phone))
        widths = rng.uniform(80.0, 400.0, size=config.peaks_per_phone)
        gains = np.exp(rng.uniform(np.log(0.5), np.log(2.0),
                                   size=config.peaks_per_phone))
        bank.append((centers, widths, gains))
    return bank


def envelope(freqs: np.ndarray, centers, widths, gains) -> np.ndarray:
    """Sum of Gaussian bumps over frequency plus a small broadband floor."""
    env = np.full(freqs.shape, 0.02)
    for c, w, g in zip(centers, widths, gains):
        env = env + g * np.exp(-0.5 * ((freqs - c) / w) ** 2)
    return env


def synth_utterance(seed: int, speaker: int, split: str, index: int,
                    config: SynthConfig) -> np.ndarray:
    """One utterance as float samples in [-1, 1]."""
    split_tag = 0 if split == "train" else 1
    rng = np.random.default_rng([seed, speaker, split_tag, index])
    bank = phone_bank(seed, speaker, config)
    sr = config.sample_rate
    total = int(round(rng.uniform(config.duration_lo, config.duration_hi) * sr))
    segments = []
    produced = 0
    while produced < total:
        seg_len = min(int(rng.uniform(0.12, 0.30) * sr), total - produced)
        centers, widths, gains = bank[int(rng.integers(len(bank)))]
        jitter = 1.0 + 0.03 * rng.standard_normal(centers.shape)
        freqs = np.fft.rfftfreq(seg_len, 1.0 / sr)
        spectrum = np.fft.rfft(rng.standard_normal(seg_len))
        seg = np.fft.irfft(spectrum * envelope(freqs, centers * jitter, widths, gains),
                           n=seg_len)
        segments.append(seg * rng.uniform(0.7, 1.3))
        produced += seg_len
    x = np.concatenate(segments)
    x = x / (np.abs(x).max() + 1e-12)
    x = x + 0.02 * rng.standard_normal(total)
    x = x * 0.25 * (1.0 + 0.3 * rng.uniform(-1.0, 1.0))
    peak = np.abs(x).max()
    if peak > 0.99:
        x = 0.99 * x / peak
    return x


def make_trials(seed: int, config: SynthConfig) -> List[Tuple]:
    """Sample unique eval trials, half target and half nontarget."""
    rng = np.random.default_rng([seed, 77])
    utts = {j: [utt_id(j, "eval", i) for i in range(config.eval_utts)]
            for j in range(config.speakers)}
    target_pairs = [(utts[j][a], utts[j][b])
                    for j in range(config.speakers)
                    for a in range(config.eval_utts)
                    for b in range(a + 1, config.eval_utts)]
    non_pairs = [(ua, ub)
                 for ja in range(config.speakers)
                 for jb in range(ja + 1, config.speakers)
                 for ua in utts[ja] for ub in utts[jb]]
    n_target = config.trials // 2
    n_non = config.trials - n_target
    if n_target > len(target_pairs) or n_non > len(non_pairs):
        raise ValueError(f"cannot draw {config.trials} unique trials from "
                         f"{len(target_pairs)} target and {len(non_pairs)} "
                         f"nontarget pairs")
    rows = []
    for i in rng.choice(len(target_pairs), size=n_target, replace=False):
        rows.append((TARGET,) + target_pairs[int(i)])
    for i in rng.choice(len(non_pairs), size=n_non, replace=False):
        rows.append((NONTARGET,) + non_pairs[int(i)])
    return rows


def build_corpus(out_dir, seed: int, config: SynthConfig) -> dict:
    """Write train/ and eval/ WAV trees plus trials.txt; returns counts."""
    out = Path(out_dir)
    counts = {"train": 0, "eval": 0}
    for split, n_utts in (("train", config.train_utts), ("eval", config.eval_utts)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for j in range(config.speakers):
            for i in range(n_utts):
                samples = synth_utterance(seed, j, split, i, config)
                write_wav(split_dir / f"{utt_id(j, split, i)}.wav",
                          samples, config.sample_rate)
                counts[split] += 1
    rows = make_trials(seed, config)
    write_trial_list(out / "trials.txt", rows)
    counts["trials"] = len(rows)
    return counts
