"""Interaural cue maps and the speech-activity mask that gates cue losses.

Inputs are complex spectrograms shaped ``(..., K, L)`` (torch or numpy).
"""
from __future__ import annotations

import math

import torch

from .dsp import numpy_compat

ENERGY_FLOOR = 1e-12
MAGNITUDE_FLOOR = 1e-6
DEFAULT_THRESHOLD_DB = 20.0


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"left/right spectrogram shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def power(spec: torch.Tensor) -> torch.Tensor:
    return spec.real**2 + spec.imag**2


@numpy_compat
def energy_db(spec: torch.Tensor) -> torch.Tensor:
    """``10 log10 |S|^2`` with ``|S|^2`` floored at 1e-12 (-120 dB)."""
    return 10 * torch.log10(power(spec).clamp_min(ENERGY_FLOOR))


@numpy_compat
def ibm(energy: torch.Tensor, threshold_db: float = DEFAULT_THRESHOLD_DB) -> torch.Tensor:
    """1 where a bin is within ``threshold_db`` of its frequency row's maximum over time."""
    if threshold_db <= 0:
        raise ValueError("threshold must be positive")
    row_max = energy.amax(dim=-1, keepdim=True)
    return (energy > row_max - threshold_db).to(energy.dtype)


@numpy_compat
def joint_ibm(left: torch.Tensor, right: torch.Tensor,
              threshold_db: float = DEFAULT_THRESHOLD_DB) -> torch.Tensor:
    """Bins active in both ears (elementwise product of the per-ear masks)."""
    _check_pair(left, right)
    return ibm(energy_db(left), threshold_db) * ibm(energy_db(right), threshold_db)


def magnitude(spec: torch.Tensor, floor: float = MAGNITUDE_FLOOR) -> torch.Tensor:
    # clamp before sqrt so the gradient is zero, not NaN, on silent bins
    return torch.sqrt(power(spec).clamp_min(floor**2))


@numpy_compat
def ild_map(left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
    """``20 log10(|S_L| / |S_R|)`` in dB, magnitudes floored at 1e-6."""
    _check_pair(left, right)
    return 20 * torch.log10(magnitude(left) / magnitude(right))


@numpy_compat
def ipd_map(left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
    """Phase of ``S_L conj(S_R)`` in (-pi, pi]; zero where either ear is silent."""
    _check_pair(left, right)
    cross = left * right.conj()
    re, im = cross.real, cross.imag
    silent = (re**2 + im**2) < 1e-30
    re = torch.where(silent, torch.ones_like(re), re)
    im = torch.where(silent, torch.zeros_like(im), im)
    phase = torch.atan2(im, re)
    return torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)


def wrap(phase: torch.Tensor) -> torch.Tensor:
    """Map angles to (-pi, pi]."""
    out = phase - 2 * math.pi * torch.floor((phase + math.pi) / (2 * math.pi))
    return torch.where(out <= -math.pi, out + 2 * math.pi, out)
