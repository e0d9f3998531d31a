"""WAV reading and writing (16-bit PCM or 32-bit float, mono or stereo)."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import BinauralWaveform


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return ``(samples, rate)``; samples are float64 in [-1, 1], shape (n,) or (channels, n)."""
    rate, data = wavfile.read(os.fspath(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.T
    return data, int(rate)


def write_wav(path, samples, rate: int, subtype: str = "float") -> None:
    """Write mono (n,) or multichannel (channels, n) audio.

    ``subtype`` is ``"float"`` (32-bit float) or ``"pcm16"``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x.T
    if subtype == "pcm16":
        out = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    elif subtype == "float":
        out = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(os.fspath(path), int(rate), out)


def read_mono(path) -> tuple[np.ndarray, int]:
    x, rate = read_wav(path)
    if x.ndim == 2:
        x = x.mean(axis=0)
    return x, rate


def read_binaural(path) -> BinauralWaveform:
    x, rate = read_wav(path)
    if x.ndim != 2 or x.shape[0] != 2:
        raise ValueError(f"{path}: expected a 2-channel (stereo) file")
    return BinauralWaveform(x[0], x[1], rate)


def write_binaural(path, w: BinauralWaveform, subtype: str = "float") -> None:
    write_wav(path, w.stacked(), w.sample_rate, subtype)
