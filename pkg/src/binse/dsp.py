"""Time-frequency analysis and synthesis.

All transforms are implemented with torch so that the enhancement path
(mask -> ISTFT -> time-domain loss) stays differentiable.  Public functions
accept numpy arrays as well; numpy in gives numpy out.

Spectrograms are complex arrays shaped ``(..., n_bins, n_frames)`` with
``n_bins = fft_length // 2 + 1``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import signal as sps

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    fft_length: int = 512
    window_length: int = 400
    hop_length: int = 100
    window: str = "sqrt_hann"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length <= self.fft_length:
            raise ValueError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.window_length}) "
                f"<= fft ({self.fft_length})"
            )
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")

    @property
    def n_bins(self) -> int:
        return self.fft_length // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        """Frames needed so that every sample is covered by at least one frame."""
        if n_samples <= self.window_length:
            return 1
        return 1 + math.ceil((n_samples - self.window_length) / self.hop_length)

    def to_dict(self) -> dict:
        return {
            "fft_length": self.fft_length,
            "window_length": self.window_length,
            "hop_length": self.hop_length,
            "window": self.window,
        }


def _sqrt_hann(n: int) -> np.ndarray:
    # half-sample shifted Hann, so no tap is zero and edge samples stay invertible
    return np.sin(np.pi * (np.arange(n) + 0.5) / n)


def _rect(n: int) -> np.ndarray:
    return np.ones(n)


_WINDOWS = {"sqrt_hann": _sqrt_hann, "rect": _rect}


def window(cfg: StftConfig, dtype=torch.float64, device=None) -> torch.Tensor:
    return torch.as_tensor(_WINDOWS[cfg.window](cfg.window_length), dtype=dtype, device=device)


@dataclass
class BinauralWaveform:
    """Left/right ear signals at a common sample rate."""

    left: np.ndarray
    right: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.ndim != 1 or self.left.shape != self.right.shape:
            raise ValueError(
                f"left/right must be 1-D and equally long, got {self.left.shape} and {self.right.shape}"
            )
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise ValueError("non-finite samples")

    def __len__(self) -> int:
        return self.left.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def stacked(self) -> np.ndarray:
        """``(2, n)`` array, left first."""
        return np.stack([self.left, self.right])

    @classmethod
    def from_stacked(cls, x, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "BinauralWaveform":
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[0] != 2:
            raise ValueError(f"expected a (2, n) array, got {x.shape}")
        return cls(x[0], x[1], sample_rate)

    def scaled(self, gain: float) -> "BinauralWaveform":
        return BinauralWaveform(self.left * gain, self.right * gain, self.sample_rate)

    def __add__(self, other: "BinauralWaveform") -> "BinauralWaveform":
        if other.sample_rate != self.sample_rate or len(other) != len(self):
            raise ValueError("cannot add waveforms with different rates or lengths")
        return BinauralWaveform(self.left + other.left, self.right + other.right, self.sample_rate)


def numpy_compat(fn):
    """Let a torch function take numpy arrays; numpy in, numpy out."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        used_numpy = False
        conv = []
        for a in args:
            if isinstance(a, np.ndarray):
                used_numpy = True
                a = torch.from_numpy(a)
            conv.append(a)
        for k, v in list(kwargs.items()):
            if isinstance(v, np.ndarray):
                used_numpy = True
                kwargs[k] = torch.from_numpy(v)
        out = fn(*conv, **kwargs)
        if not used_numpy:
            return out
        if isinstance(out, tuple):
            return tuple(o.detach().numpy() if isinstance(o, torch.Tensor) else o for o in out)
        return out.detach().numpy() if isinstance(out, torch.Tensor) else out

    return wrapper


@numpy_compat
def stft(x: torch.Tensor, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """One-sided STFT of ``x`` (..., n_samples).

    Frame ``l`` covers samples ``[l*hop, l*hop + window_length)``; the last
    partial frame is zero padded.  The windowed frame is zero padded to
    ``fft_length`` before the FFT.
    """
    if x.shape[-1] == 0:
        raise ValueError("empty signal")
    if torch.isnan(x).any():
        raise ValueError("NaN in input signal")
    if not x.is_floating_point():
        x = x.double()
    n = x.shape[-1]
    n_frames = cfg.n_frames(n)
    padded_len = (n_frames - 1) * cfg.hop_length + cfg.window_length
    x = F.pad(x, (0, padded_len - n))
    frames = x.unfold(-1, cfg.window_length, cfg.hop_length)  # (..., T, W)
    frames = frames * window(cfg, x.dtype, x.device)
    spec = torch.fft.rfft(frames, n=cfg.fft_length, dim=-1)  # (..., T, K)
    return spec.transpose(-1, -2)


@numpy_compat
def istft(spec: torch.Tensor, cfg: StftConfig = StftConfig(), length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft` by weighted overlap-add.

    The output is normalised by the summed squared window so analysis and
    synthesis with the same window reconstruct exactly.  ``length`` trims or
    zero pads the result.
    """
    if spec.shape[-2] != cfg.n_bins:
        raise ValueError(f"spectrogram has {spec.shape[-2]} bins, config expects {cfg.n_bins}")
    lead = spec.shape[:-2]
    n_frames = spec.shape[-1]
    frames = torch.fft.irfft(spec.transpose(-1, -2), n=cfg.fft_length, dim=-1)
    frames = frames[..., : cfg.window_length]
    win = window(cfg, frames.dtype, frames.device)
    frames = frames * win
    total = (n_frames - 1) * cfg.hop_length + cfg.window_length

    flat = frames.reshape(-1, n_frames, cfg.window_length).transpose(1, 2)  # (B, W, T)
    out = F.fold(flat, output_size=(1, total), kernel_size=(1, cfg.window_length),
                 stride=(1, cfg.hop_length)).reshape(*lead, total)
    wsq = (win**2).reshape(1, -1, 1).expand(1, -1, n_frames)
    norm = F.fold(wsq, output_size=(1, total), kernel_size=(1, cfg.window_length),
                  stride=(1, cfg.hop_length)).reshape(total)
    out = out / norm.clamp_min(1e-10)
    if length is not None:
        if length > total:
            out = F.pad(out, (0, length - total))
        else:
            out = out[..., :length]
    return out


@numpy_compat
def apply_mask(spec: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Enhanced spectrogram ``mask * spec`` written out in real/imag parts."""
    if spec.shape != mask.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} != spectrogram shape {tuple(spec.shape)}")
    yr, yi = spec.real, spec.imag
    mr, mi = mask.real, mask.imag
    return torch.complex(mr * yr - mi * yi, mr * yi + mi * yr)


@numpy_compat
def ideal_crm(noisy: torch.Tensor, clean: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Complex ratio mask turning ``noisy`` into ``clean``.

    The denominator ``|noisy|^2`` is floored at ``eps`` so silent bins give a
    bounded mask.
    """
    if noisy.shape != clean.shape:
        raise ValueError(f"shape mismatch {tuple(noisy.shape)} vs {tuple(clean.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    yr, yi = noisy.real, noisy.imag
    sr, si = clean.real, clean.imag
    den = (yr**2 + yi**2).clamp_min(eps)
    return torch.complex((yr * sr + yi * si) / den, (yr * si - yi * sr) / den)


def _resample_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    h = sps.firwin(2 * 10 * max_rate + 1, 1.0 / max_rate, window=("kaiser", 5.0))
    # every polyphase branch gets unit DC gain, so constants map to constants exactly
    for p in range(up):
        h[p::up] /= h[p::up].sum()
    return h


@functools.lru_cache(maxsize=16)
def _cached_filter(up: int, down: int) -> np.ndarray:
    return _resample_filter(up, down)


@numpy_compat
def resample(x: torch.Tensor, from_hz: int, to_hz: int) -> torch.Tensor:
    """Band-limited polyphase rate conversion along the last axis.

    Output length is ``ceil(n * to_hz / from_hz)``.  Edges are extended by
    replication, which keeps a constant signal constant.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sample rates must be positive")
    if from_hz == to_hz:
        return x
    g = math.gcd(int(from_hz), int(to_hz))
    up, down = int(to_hz) // g, int(from_hz) // g
    if not x.is_floating_point():
        x = x.double()
    h = torch.as_tensor(_cached_filter(up, down), dtype=x.dtype, device=x.device)
    half = (h.numel() - 1) // 2
    lead = x.shape[:-1]
    n = x.shape[-1]
    n_out = -(-n * up // down)

    ext = half // up + 2
    xf = F.pad(x.reshape(-1, 1, n), (ext, ext), mode="replicate").reshape(-1, n + 2 * ext)
    # output k is sum_j h[j] u[k*down + offset - j] over the zero-stuffed u; only every
    # up-th tap meets a sample, so gather those taps (one polyphase branch per output)
    taps = -(-h.numel() // up)
    hpad = F.pad(h, (0, taps * up - h.numel()))
    k = torch.arange(n_out, device=x.device)
    base = ext * up - half + k * down + h.numel() - 1
    m0, phase = base // up, base % up
    t = torch.arange(taps, device=x.device)
    coef = hpad[phase[:, None] + up * t[None, :]]
    idx = m0[:, None] - t[None, :]
    lo = max(0, -int(idx.min()))
    hi = max(0, int(idx.max()) - (xf.shape[-1] - 1))
    xz = F.pad(xf, (lo, hi))
    y = (xz[:, idx + lo] * coef).sum(-1)
    return y.reshape(*lead, n_out)
