"""Synthetic speech-like corpus for desk-scale runs.

No licensed speech data ships with the package, so tests and demos use
pseudo-utterances: voiced syllables (glottal pulse train through a cascade
of formant resonators, with pitch glides), fricative noise bursts and
pauses.  Spectral tilt, syllable rate and silent gaps are close enough to
speech for STOI, the IBM and the SSN generator to behave sensibly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import DEFAULT_SAMPLE_RATE
from .wavio import write_wav

# (F1, F2, F3) in Hz
VOWELS = np.array([
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (570, 840, 2410),
    (300, 870, 2240),
    (660, 1720, 2410),
    (490, 1350, 1690),
    (390, 1990, 2550),
])
BANDWIDTHS = (90.0, 110.0, 170.0, 250.0, 300.0)
HIGHER_FORMANTS = (3300.0, 3750.0)
FORMANT_GAINS = (1.0, 0.7, 0.4, 0.25, 0.15)


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    a = [1.0, -2 * r * np.cos(2 * np.pi * freq / sr), r * r]
    return sps.lfilter([1 - r], a, x)


def _voiced(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    f0 = rng.uniform(95, 230)
    glide = rng.uniform(-0.25, 0.25)
    f0_track = f0 * (1 + glide * np.linspace(0, 1, n)) * (1 + 0.01 * rng.standard_normal(n).cumsum() / np.sqrt(n))
    phase = np.cumsum(f0_track / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    # one-pole low-pass gives the glottal roll-off
    src = sps.lfilter([1.0], [1.0, -0.8], pulses)
    # aspiration noise fills the gaps between harmonics
    src += 0.05 * sps.lfilter([1.0], [1.0, -0.8], rng.standard_normal(n))
    formants = np.concatenate([VOWELS[rng.integers(len(VOWELS))], HIGHER_FORMANTS])
    formants = formants * rng.uniform(0.9, 1.15)
    out = np.zeros(n)
    for fr, bw, g in zip(formants, BANDWIDTHS, FORMANT_GAINS):
        out += g * _resonator(src, fr, bw, sr)
    return out


def _fricative(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    lo = rng.uniform(2500, 4500)
    b, a = sps.butter(2, [lo / (sr / 2), min(7500, lo + 3000) / (sr / 2)], btype="band")
    return sps.lfilter(b, a, rng.standard_normal(n))


def _envelope(n: int, sr: int) -> np.ndarray:
    ramp = min(n // 2, int(0.02 * sr))
    env = np.ones(n)
    if ramp > 0:
        win = np.hanning(2 * ramp)
        env[:ramp] = win[:ramp]
        env[-ramp:] = win[ramp:]
    return env


def synth_utterance(duration: float, seed: int, sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """A pseudo-speech utterance of ``duration`` seconds, RMS 0.05 over active parts."""
    rng = np.random.default_rng(seed)
    n_total = int(round(duration * sr))
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    while pos < n_total:
        if rng.random() < 0.35:
            n = int(rng.uniform(0.04, 0.12) * sr)
            seg = 0.15 * _fricative(n, sr, rng)
            seg *= _envelope(n, sr) * rng.uniform(0.3, 0.8)
            end = min(pos + n, n_total)
            out[pos:end] += seg[: end - pos]
            pos = end
        n = int(rng.uniform(0.12, 0.32) * sr)
        seg = _voiced(n, sr, rng)
        seg = seg / (np.std(seg) + 1e-12) * rng.uniform(0.5, 1.0)
        seg *= _envelope(n, sr)
        end = min(pos + n, n_total)
        out[pos:end] += seg[: end - pos]
        pos = end + int(rng.uniform(0.03, 0.12) * sr)
        if rng.random() < 0.15:
            pos += int(rng.uniform(0.2, 0.4) * sr)
    active = np.abs(out) > 1e-6
    rms = np.sqrt(np.mean(out[active] ** 2)) if active.any() else 1.0
    return out * (0.05 / rms)


def write_corpus(out_dir, count: int, seed: int = 0, sr: int = DEFAULT_SAMPLE_RATE,
                 min_duration: float = 2.5, max_duration: float = 4.0) -> list[Path]:
    """Write ``count`` mono 16-bit utterances ``utt_0000.wav`` ... to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        dur = rng.uniform(min_duration, max_duration)
        x = synth_utterance(dur, int(rng.integers(2**31)), sr)
        p = out_dir / f"utt_{i:04d}.wav"
        write_wav(p, x, sr, subtype="pcm16")
        paths.append(p)
    return paths
