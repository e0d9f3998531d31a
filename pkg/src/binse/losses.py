"""Composite training objective.

    total = alpha * L_snr + beta * L_stoi + gamma * L_ild + kappa * L_ipd

SNR and STOI terms act on time-domain signals (after the ISTFT); the ILD
and IPD terms act on TF bins selected by the clean-speech joint IBM.
Binaural waveforms are tensors shaped ``(..., 2, n)`` and binaural
spectrograms ``(..., 2, K, L)``, left ear first.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from . import cues
from .dsp import DEFAULT_SAMPLE_RATE, StftConfig, istft, stft
from .stoi import stoi

log = logging.getLogger(__name__)

SNR_CAP_DB = 50.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 1.0
    kappa: float = 10.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma, self.kappa)
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError(f"weights must be nonnegative with at least one positive, got {w}")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        """From ``"a,b,g,k"``."""
        parts = [float(p) for p in str(text).split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated weights, got {text!r}")
        return cls(*parts)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.kappa)


SNR_ONLY = LossWeights(1.0, 0.0, 0.0, 0.0)


@dataclass
class LossBreakdown:
    snr_term: torch.Tensor
    stoi_term: torch.Tensor
    ild_term: torch.Tensor
    ipd_term: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if hasattr(x, "stacked"):
        return torch.as_tensor(x.stacked())
    t = torch.as_tensor(np.asarray(x))
    return t if t.is_floating_point() or t.is_complex() else t.double()


def snr(clean, estimate, cap: float = SNR_CAP_DB) -> torch.Tensor:
    """``10 log10(|s|^2 / |s_hat - s|^2)`` along the last axis, limited to +/- ``cap`` dB."""
    s = _as_tensor(clean)
    e = _as_tensor(estimate) - s
    ss = (s**2).sum(-1)
    if torch.any(ss <= 0):
        raise ValueError("silent reference signal")
    ee = (e**2).sum(-1)
    ratio = ss / torch.maximum(ee, ss * 10 ** (-cap / 10))
    return (10 * torch.log10(ratio)).clamp_min(-cap)


def snr_loss(clean, enhanced, cap: float = SNR_CAP_DB) -> torch.Tensor:
    """Negative mean of the two ears' SNRs, averaged over any batch dims."""
    return -snr(clean, enhanced, cap).mean()


def stoi_loss(clean, enhanced, sr: int = DEFAULT_SAMPLE_RATE) -> torch.Tensor:
    """Negative mean per-ear smooth STOI."""
    return -stoi(_as_tensor(clean), _as_tensor(enhanced), sr, mode="smooth").mean()


def _masked_mean(err: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    n = mask.sum(dim=(-1, -2))
    if torch.any(n == 0):
        log.warning("empty speech-activity mask in %d item(s); cue loss counted as 0",
                    int((n == 0).sum()))
    per_item = (mask * err).sum(dim=(-1, -2)) / n.clamp_min(1)
    return per_item.mean()


def _check(clean_spec: torch.Tensor, enh_spec: torch.Tensor) -> None:
    if clean_spec.shape != enh_spec.shape or clean_spec.shape[-3] != 2:
        raise ValueError(
            f"need matching (..., 2, K, L) pairs, got {tuple(clean_spec.shape)} and {tuple(enh_spec.shape)}"
        )


def ild_error(clean_spec: torch.Tensor, enh_spec: torch.Tensor) -> torch.Tensor:
    """Per-bin ``|ILD_clean - ILD_enhanced|`` in dB."""
    _check(clean_spec, enh_spec)
    return (cues.ild_map(clean_spec[..., 0, :, :], clean_spec[..., 1, :, :])
            - cues.ild_map(enh_spec[..., 0, :, :], enh_spec[..., 1, :, :])).abs()


def ipd_error(clean_spec: torch.Tensor, enh_spec: torch.Tensor) -> torch.Tensor:
    """Per-bin IPD difference in radians, wrapped to [0, pi]."""
    _check(clean_spec, enh_spec)
    d = (cues.ipd_map(clean_spec[..., 0, :, :], clean_spec[..., 1, :, :])
         - cues.ipd_map(enh_spec[..., 0, :, :], enh_spec[..., 1, :, :]))
    # d - 2 pi round(d / 2 pi) lies in [-pi, pi]
    return (d - 2 * math.pi * torch.round(d / (2 * math.pi))).abs()


def ild_loss(clean_spec, enh_spec, mask=None,
             threshold_db: float = cues.DEFAULT_THRESHOLD_DB) -> torch.Tensor:
    """Mean ILD error over speech-active bins (clean joint IBM when ``mask`` is None)."""
    clean_spec, enh_spec = _as_tensor(clean_spec), _as_tensor(enh_spec)
    if mask is None:
        mask = cues.joint_ibm(clean_spec[..., 0, :, :], clean_spec[..., 1, :, :], threshold_db)
    return _masked_mean(ild_error(clean_spec, enh_spec), _as_tensor(mask))


def ipd_loss(clean_spec, enh_spec, mask=None,
             threshold_db: float = cues.DEFAULT_THRESHOLD_DB) -> torch.Tensor:
    """Mean wrapped IPD error in radians over speech-active bins."""
    clean_spec, enh_spec = _as_tensor(clean_spec), _as_tensor(enh_spec)
    if mask is None:
        mask = cues.joint_ibm(clean_spec[..., 0, :, :], clean_spec[..., 1, :, :], threshold_db)
    return _masked_mean(ipd_error(clean_spec, enh_spec), _as_tensor(mask))


def composite_loss(clean, enh_spec: torch.Tensor, weights: LossWeights = LossWeights(),
                   cfg: StftConfig = StftConfig(), sr: int = DEFAULT_SAMPLE_RATE,
                   threshold_db: float = cues.DEFAULT_THRESHOLD_DB) -> LossBreakdown:
    """All four terms and their weighted sum.

    ``clean`` is the clean binaural waveform ``(..., 2, n)``; ``enh_spec`` the
    enhanced spectrogram ``(..., 2, K, L)`` (mask times noisy).  Terms with a
    zero weight are still computed for logging, without gradient.
    """
    clean = _as_tensor(clean)
    n = clean.shape[-1]
    clean_spec = stft(clean, cfg)
    enhanced = istft(enh_spec, cfg, n)
    mask = cues.joint_ibm(clean_spec[..., 0, :, :], clean_spec[..., 1, :, :], threshold_db)

    def term(weight, fn):
        if weight == 0:
            with torch.no_grad():
                return fn()
        return fn()

    snr_t = term(weights.alpha, lambda: snr_loss(clean, enhanced))
    stoi_t = term(weights.beta, lambda: stoi_loss(clean, enhanced, sr))
    ild_t = term(weights.gamma, lambda: ild_loss(clean_spec, enh_spec, mask))
    ipd_t = term(weights.kappa, lambda: ipd_loss(clean_spec, enh_spec, mask))
    total = (weights.alpha * snr_t + weights.beta * stoi_t
             + weights.gamma * ild_t + weights.kappa * ipd_t)
    return LossBreakdown(snr_t, stoi_t, ild_t, ipd_t, total)
