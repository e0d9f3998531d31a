"""Binaural scene synthesis.

A synthetic spherical-head model stands in for measured HRIRs: the
interaural time difference follows Woodworth's formula and the far ear gets
a first-order low-pass head shadow.  Measured sets can be loaded from a
directory of WAV pairs instead (:func:`load_hrir_dir`).

Azimuth convention: 0 deg is straight ahead, positive angles are to the
listener's left, values are taken modulo 360.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import DEFAULT_SAMPLE_RATE, BinauralWaveform
from .wavio import read_mono, write_wav

log = logging.getLogger(__name__)

NOISE_TYPES = ("wgn", "ssn", "external")
NOISE_GRID_STEP = 5  # degrees between diffuse-field sources


@dataclass(frozen=True)
class HeadModelConfig:
    head_radius: float = 0.0875
    speed_of_sound: float = 343.0
    shadow_cutoff: float = 2000.0
    ir_length: int = 128
    base_delay: int = 20

    def __post_init__(self):
        if min(self.head_radius, self.speed_of_sound, self.shadow_cutoff) <= 0:
            raise ValueError("head model parameters must be positive")


def woodworth_itd(lateral: float, cfg: HeadModelConfig = HeadModelConfig()) -> float:
    """Interaural delay in seconds for a lateral angle in radians (0 = median plane)."""
    a = abs(lateral)
    return cfg.head_radius / cfg.speed_of_sound * (a + np.sin(a))


def lateral_angle(azimuth_deg: float) -> float:
    """Angle from the median plane in radians, positive to the left, in [-pi/2, pi/2]."""
    return float(np.arcsin(np.clip(np.sin(np.deg2rad(azimuth_deg)), -1.0, 1.0)))


def fractional_delay(delay: float, length: int, taps: int = 32) -> np.ndarray:
    """Windowed-sinc impulse delayed by ``delay`` samples."""
    h = np.zeros(length)
    centre = int(np.floor(delay))
    n = np.arange(centre - taps // 2 + 1, centre + taps // 2 + 1)
    n = n[(n >= 0) & (n < length)]
    t = n - delay
    win = np.kaiser(taps + 1, 8.0)
    # kaiser sampled on a continuous grid spanning +/- taps/2
    w = np.interp(t, np.linspace(-taps / 2, taps / 2, taps + 1), win)
    h[n] = np.sinc(t) * w
    return h


def synth_hrir(azimuth: float, cfg: HeadModelConfig = HeadModelConfig(),
               sr: int = DEFAULT_SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Left/right impulse responses of the spherical-head model."""
    theta = lateral_angle(azimuth)
    itd = woodworth_itd(theta, cfg) * sr
    near = fractional_delay(cfg.base_delay, cfg.ir_length)
    far = fractional_delay(cfg.base_delay + itd, cfg.ir_length)
    b, a = sps.butter(1, cfg.shadow_cutoff / (sr / 2))
    shade = abs(np.sin(theta))
    far = (1 - shade) * far + shade * sps.lfilter(b, a, far)
    if theta >= 0:
        return near, far
    return far, near


@dataclass
class HrirSet:
    azimuths: np.ndarray
    left: np.ndarray  # (n_azimuths, ir_length)
    right: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    distances: dict = field(default_factory=dict)

    def __post_init__(self):
        self.azimuths = np.asarray(self.azimuths, dtype=float) % 360
        order = np.argsort(self.azimuths)
        self.azimuths = self.azimuths[order]
        self.left = np.asarray(self.left, dtype=float)[order]
        self.right = np.asarray(self.right, dtype=float)[order]
        if self.left.shape != self.right.shape or self.left.shape[0] != len(self.azimuths):
            raise ValueError("each azimuth needs a left and right IR of equal length")

    def nearest(self, azimuth: float) -> int:
        d = np.abs((self.azimuths - azimuth + 180) % 360 - 180)
        return int(np.argmin(d))

    def pair(self, azimuth: float) -> tuple[np.ndarray, np.ndarray]:
        i = self.nearest(azimuth)
        return self.left[i], self.right[i]

    def covers_full_circle(self, step: int = NOISE_GRID_STEP) -> bool:
        grid = np.arange(0, 360, step)
        return all(np.min(np.abs((self.azimuths - g + 180) % 360 - 180)) < 1e-6 for g in grid)


def synth_hrir_set(cfg: HeadModelConfig = HeadModelConfig(), sr: int = DEFAULT_SAMPLE_RATE,
                   step: int = NOISE_GRID_STEP) -> HrirSet:
    azimuths = np.arange(0, 360, step)
    pairs = [synth_hrir(az, cfg, sr) for az in azimuths]
    return HrirSet(azimuths, [p[0] for p in pairs], [p[1] for p in pairs], sr)


_AZ_FILE = re.compile(r"az(-?\d+)_([LR])\.wav$", re.IGNORECASE)


def load_hrir_dir(path) -> HrirSet:
    """Load HRIR pairs from a directory.

    Uses ``index.json`` (``{"sample_rate": sr, "azimuths": {"85": {"left": ..., "right": ...}}}``)
    when present, otherwise files named ``azNNN_L.wav`` / ``azNNN_R.wav``.
    """
    root = Path(path)
    index = root / "index.json"
    files: dict[float, dict[str, Path]] = {}
    distances = {}
    sr = None
    if index.exists():
        meta = json.loads(index.read_text())
        sr = meta.get("sample_rate")
        for az, entry in meta["azimuths"].items():
            files[float(az)] = {"left": root / entry["left"], "right": root / entry["right"]}
            if "distance" in entry:
                distances[float(az)] = entry["distance"]
    else:
        for f in sorted(root.glob("*.wav")):
            m = _AZ_FILE.search(f.name)
            if m:
                side = "left" if m.group(2).upper() == "L" else "right"
                files.setdefault(float(m.group(1)), {})[side] = f
    if not files:
        raise FileNotFoundError(f"no HRIR files found in {root}")
    azimuths, left, right = [], [], []
    for az in sorted(files):
        entry = files[az]
        if set(entry) != {"left", "right"}:
            raise ValueError(f"azimuth {az}: need both left and right files")
        hl, rl = read_mono(entry["left"])
        hr, rr = read_mono(entry["right"])
        if sr is not None and (rl != sr or rr != sr):
            raise ValueError(f"azimuth {az}: rate mismatch with index ({rl}, {rr} vs {sr})")
        sr = sr or rl
        n = max(len(hl), len(hr))
        azimuths.append(az)
        left.append(np.pad(hl, (0, n - len(hl))))
        right.append(np.pad(hr, (0, n - len(hr))))
    n = max(len(h) for h in left)
    left = [np.pad(h, (0, n - len(h))) for h in left]
    right = [np.pad(h, (0, n - len(h))) for h in right]
    return HrirSet(np.array(azimuths), left, right, int(sr), distances)


def save_hrir_dir(hrirs: HrirSet, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for az, hl, hr in zip(hrirs.azimuths, hrirs.left, hrirs.right):
        name = f"az{int(round(az)):03d}"
        write_wav(root / f"{name}_L.wav", hl, hrirs.sample_rate)
        write_wav(root / f"{name}_R.wav", hr, hrirs.sample_rate)
        entries[str(int(round(az)))] = {"left": f"{name}_L.wav", "right": f"{name}_R.wav"}
    (root / "index.json").write_text(
        json.dumps({"sample_rate": hrirs.sample_rate, "azimuths": entries}, indent=1)
    )


def _convolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return sps.fftconvolve(x, h)[: len(x)]


def spatialize(mono, azimuth: float, hrirs: HrirSet, sr: int | None = None) -> BinauralWaveform:
    """Place a mono signal at ``azimuth`` using the nearest IR pair."""
    mono = np.asarray(mono, dtype=float)
    if mono.size == 0:
        raise ValueError("empty signal")
    if sr is not None and sr != hrirs.sample_rate:
        raise ValueError(f"signal rate {sr} != HRIR rate {hrirs.sample_rate}")
    hl, hr = hrirs.pair(azimuth)
    return BinauralWaveform(_convolve(mono, hl), _convolve(mono, hr), hrirs.sample_rate)


def speech_spectrum(references, sr: int = DEFAULT_SAMPLE_RATE, nperseg: int = 512):
    """Average long-term power spectrum ``(freqs, psd)`` of a set of waveforms."""
    references = [np.asarray(r, dtype=float) for r in references]
    if not references:
        raise ValueError("empty reference set")
    psds = []
    for r in references:
        f, p = sps.welch(r, fs=sr, nperseg=min(nperseg, len(r)))
        if len(f) != nperseg // 2 + 1:
            f, p = sps.welch(np.pad(r, (0, nperseg - len(r))), fs=sr, nperseg=nperseg)
        psds.append(p)
    return f, np.mean(psds, axis=0)


def shaped_noise(freqs: np.ndarray, psd: np.ndarray, n: int, rng: np.random.Generator,
                 sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """White Gaussian noise whose long-term spectrum follows ``psd``, scaled to its power."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    fk = np.fft.rfftfreq(n, 1 / sr)
    spec *= np.sqrt(np.interp(fk, freqs, psd))
    out = np.fft.irfft(spec, n)
    # one-sided welch density integrates to the signal power
    target = np.trapezoid(psd, freqs)
    return out * np.sqrt(target / max(np.mean(out**2), 1e-30))


def speech_shaped_noise(references, duration: float, seed: int,
                        sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Noise matching the average long-term spectrum of ``references``."""
    f, psd = speech_spectrum(references, sr)
    return shaped_noise(f, psd, int(round(duration * sr)), np.random.default_rng(seed), sr)


def _source_signal(noise_type: str, n: int, rng: np.random.Generator, sr: int,
                   ssn_spectrum=None, external=None) -> np.ndarray:
    if noise_type == "wgn":
        return rng.standard_normal(n)
    if noise_type == "ssn":
        if ssn_spectrum is None:
            raise ValueError("ssn noise needs a reference spectrum")
        return shaped_noise(*ssn_spectrum, n, rng, sr)
    if noise_type == "external":
        if external is None or len(external) < n:
            raise ValueError("external noise needs a recording at least as long as the scene")
        start = int(rng.integers(0, len(external) - n + 1))
        seg = np.asarray(external[start:start + n], dtype=float)
        return seg / max(np.std(seg), 1e-12)
    raise ValueError(f"unknown noise type {noise_type!r}")


def isotropic_noise(duration: float, noise_type: str, hrirs: HrirSet, seed: int,
                    ssn_spectrum=None, external=None,
                    step: int = NOISE_GRID_STEP) -> BinauralWaveform:
    """Diffuse noise from equal-power, independent sources every ``step`` degrees.

    Each source signal comes from its own child generator of ``seed``.  The
    sum is divided by ``sqrt(n_sources)`` so per-ear power stays near the
    single-source power.
    """
    if not hrirs.covers_full_circle(step):
        raise ValueError(f"HRIR set must cover 0..360 deg every {step} deg")
    sr = hrirs.sample_rate
    n = int(round(duration * sr))
    grid = np.arange(0, 360, step)
    children = np.random.SeedSequence(seed).spawn(len(grid))
    left = np.zeros(n)
    right = np.zeros(n)
    for az, child in zip(grid, children):
        src = _source_signal(noise_type, n, np.random.default_rng(child), sr, ssn_spectrum, external)
        hl, hr = hrirs.pair(az)
        left += _convolve(src, hl)
        right += _convolve(src, hr)
    scale = 1 / np.sqrt(len(grid))
    return BinauralWaveform(left * scale, right * scale, sr)


def ring_coherence(freqs, spacing: float, speed_of_sound: float = 343.0) -> np.ndarray:
    """Magnitude-squared coherence of a 2-D diffuse field, ``J0(2 pi f d / c)^2``."""
    from scipy.special import j0

    return j0(2 * np.pi * np.asarray(freqs) * spacing / speed_of_sound) ** 2


def mix_at_snr(speech: BinauralWaveform, noise: BinauralWaveform, target_avg_snr: float):
    """Scale ``noise`` so the mean of the per-ear SNRs equals ``target_avg_snr``.

    Returns ``(noisy, snr_left, snr_right)``; the speech is left unscaled.
    """
    if len(speech) != len(noise) or speech.sample_rate != noise.sample_rate:
        raise ValueError("speech and noise must share length and sample rate")
    ps = np.array([np.sum(speech.left**2), np.sum(speech.right**2)])
    pn = np.array([np.sum(noise.left**2), np.sum(noise.right**2)])
    if np.any(ps <= 0):
        raise ValueError("silent speech channel")
    if np.any(pn <= 0):
        raise ValueError("silent noise channel")
    base = 10 * np.log10(ps / pn)
    gain = 10 ** ((base.mean() - target_avg_snr) / 20)
    snr_l, snr_r = base - 20 * np.log10(gain)
    return speech + noise.scaled(gain), float(snr_l), float(snr_r)
