"""Short-time objective intelligibility in torch.

``mode="eval"`` reproduces the standard measure (Taal et al.): resample to
10 kHz, drop frames more than 40 dB below the loudest clean frame, 15
third-octave bands from 150 Hz, 384 ms segments, clipped normalised
correlation.  ``mode="smooth"`` is the training variant: no silence
removal and a tanh soft clip instead of the hard one, so the score is
differentiable in the processed signal.
"""
from __future__ import annotations

import functools

import numpy as np
import torch

from .dsp import DEFAULT_SAMPLE_RATE, resample

FS = 10000
N_FRAME = 256
NFFT = 512
NUM_BANDS = 15
MIN_FREQ = 150
N_SEGMENT = 30
BETA = -15.0
DYN_RANGE = 40.0
EPS = np.finfo(float).eps
CLIP = 10 ** (-BETA / 20)


@functools.lru_cache(maxsize=1)
def third_octave_matrix() -> np.ndarray:
    """``(15, 257)`` 0/1 matrix grouping FFT bins into third-octave bands."""
    f = np.linspace(0, FS, NFFT + 1)[: NFFT // 2 + 1]
    k = np.arange(NUM_BANDS, dtype=float)
    lo = MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
    hi = MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((NUM_BANDS, len(f)))
    for i in range(NUM_BANDS):
        a = np.argmin((f - lo[i]) ** 2)
        b = np.argmin((f - hi[i]) ** 2)
        obm[i, a:b] = 1
    return obm


def _hann(n: int, like: torch.Tensor) -> torch.Tensor:
    # matlab-style hanning: no zero end points
    return torch.as_tensor(np.hanning(n + 2)[1:-1], dtype=like.dtype, device=like.device)


def _frame_count(n: int, size: int = N_FRAME, hop: int = N_FRAME // 2) -> int:
    return max(0, -(-(n - size) // hop))


def _frames(x: torch.Tensor, size: int, hop: int) -> torch.Tensor:
    """Windowed frames starting at 0, hop, ... < len - size (reference framing)."""
    n = x.shape[-1]
    count = _frame_count(n, size, hop)
    if count == 0:
        return x.new_zeros(*x.shape[:-1], 0, size)
    frames = x[..., : (count - 1) * hop + size].unfold(-1, size, hop)
    return frames * _hann(size, x)


def _overlap_add(frames: torch.Tensor, hop: int) -> torch.Tensor:
    count, size = frames.shape
    out = frames.new_zeros((count - 1) * hop + size)
    for i in range(count):
        out[i * hop: i * hop + size] += frames[i]
    return out


def remove_silent_frames(x: torch.Tensor, y: torch.Tensor, dyn_range: float = DYN_RANGE,
                         size: int = N_FRAME, hop: int = N_FRAME // 2):
    """Drop frames whose clean energy is more than ``dyn_range`` dB below the loudest."""
    xf = _frames(x, size, hop)
    yf = _frames(y, size, hop)
    energy = 20 * torch.log10(torch.linalg.norm(xf, dim=-1) + EPS)
    keep = (energy.max() - dyn_range - energy) < 0
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x: torch.Tensor) -> torch.Tensor:
    spec = torch.fft.rfft(_frames(x, N_FRAME, N_FRAME // 2), n=NFFT, dim=-1)
    power = spec.real**2 + spec.imag**2  # (..., T, K)
    obm = torch.as_tensor(third_octave_matrix(), dtype=power.dtype, device=power.device)
    # floor keeps sqrt differentiable in all-zero bands
    return torch.sqrt((power @ obm.T).clamp_min(1e-30)).transpose(-1, -2)  # (..., J, T)


def _norm(v: torch.Tensor) -> torch.Tensor:
    return torch.sqrt((v**2).sum(-1, keepdim=True) + 1e-30)


def _segment_correlation(x_tob: torch.Tensor, y_tob: torch.Tensor, smooth: bool) -> torch.Tensor:
    xs = x_tob.unfold(-1, N_SEGMENT, 1)  # (..., J, M, N)
    ys = y_tob.unfold(-1, N_SEGMENT, 1)
    y_norm = ys * (_norm(xs) / (_norm(ys) + EPS))
    bound = xs * (1 + CLIP)
    if smooth:
        b = bound.clamp_min(1e-12)
        y_prime = b * torch.tanh(y_norm / b)
    else:
        y_prime = torch.minimum(y_norm, bound)
    y_prime = y_prime - y_prime.mean(-1, keepdim=True)
    xs = xs - xs.mean(-1, keepdim=True)
    y_prime = y_prime / (_norm(y_prime) + EPS)
    xs = xs / (_norm(xs) + EPS)
    return (y_prime * xs).sum(-1).mean(dim=(-1, -2))


def stoi(clean, processed, sr: int = DEFAULT_SAMPLE_RATE, mode: str = "eval"):
    """STOI of ``processed`` against ``clean`` along the last axis.

    Tensors give a tensor of the leading shape; numpy or lists give a float
    (or an array for batched input).
    """
    if mode not in ("eval", "smooth"):
        raise ValueError(f"mode must be 'eval' or 'smooth', got {mode!r}")
    as_numpy = not isinstance(clean, torch.Tensor)
    x = torch.as_tensor(clean, dtype=torch.float64) if as_numpy else clean
    y = torch.as_tensor(processed, dtype=x.dtype) if not isinstance(processed, torch.Tensor) else processed
    if x.shape != y.shape:
        raise ValueError(f"clean and processed differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if sr != FS:
        x = resample(x, sr, FS)
        y = resample(y, sr, FS)
    if mode == "eval":
        flat_x = x.reshape(-1, x.shape[-1])
        flat_y = y.reshape(-1, y.shape[-1])
        scores = []
        for xi, yi in zip(flat_x, flat_y):
            xi, yi = remove_silent_frames(xi, yi)
            count = _frame_count(xi.shape[-1])
            if count < N_SEGMENT:
                raise ValueError(
                    f"need at least {N_SEGMENT} frames (384 ms) of speech after silence removal, "
                    f"got {count}"
                )
            xt, yt = _band_envelopes(xi), _band_envelopes(yi)
            scores.append(_segment_correlation(xt, yt, smooth=False))
        out = torch.stack(scores).reshape(x.shape[:-1])
    else:
        count = _frame_count(x.shape[-1])
        if count < N_SEGMENT:
            raise ValueError(f"signal too short for STOI: {count} frames < {N_SEGMENT}")
        xt, yt = _band_envelopes(x), _band_envelopes(y)
        out = _segment_correlation(xt, yt, smooth=True)
    if as_numpy:
        out = out.detach().numpy()
        return float(out) if out.ndim == 0 else out
    return out
