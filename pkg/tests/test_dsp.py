import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from binse.dsp import (BinauralWaveform, StftConfig, apply_mask, ideal_crm, istft, resample,
                       stft, window)

CFG = StftConfig()


def naive_stft(x, cfg=CFG):
    """Direct DFT sums over explicitly windowed frames."""
    w = np.sin(np.pi * (np.arange(cfg.window_length) + 0.5) / cfg.window_length)
    n_frames = cfg.n_frames(len(x))
    padded = np.zeros((n_frames - 1) * cfg.hop_length + cfg.window_length)
    padded[: len(x)] = x
    k = np.arange(cfg.n_bins)[:, None]
    n = np.arange(cfg.window_length)[None, :]
    basis = np.exp(-2j * np.pi * k * n / cfg.fft_length)
    out = np.empty((cfg.n_bins, n_frames), dtype=complex)
    for t in range(n_frames):
        seg = padded[t * cfg.hop_length: t * cfg.hop_length + cfg.window_length] * w
        out[:, t] = basis @ seg
    return out


def test_window_is_sqrt_hann_and_power_complementary():
    w = window(CFG).numpy()
    assert np.all(w > 0)
    np.testing.assert_allclose(w**2, np.sin(np.pi * (np.arange(400) + 0.5) / 400) ** 2)
    # squared window overlap-adds to a constant at hop 100
    ola = sum(np.roll(np.pad(w**2, (0, 400)), s)[:800] for s in range(0, 800, 100))
    assert np.ptp(ola[400:800]) < 1e-12


def test_stft_matches_direct_dft(rng):
    x = rng.standard_normal(1234)
    np.testing.assert_allclose(stft(x), naive_stft(x), atol=1e-10)


def test_frame_count_and_shape():
    assert CFG.n_bins == 257
    assert CFG.n_frames(32000) == 317
    assert CFG.n_frames(400) == 1
    assert CFG.n_frames(401) == 2
    assert stft(np.zeros(32000)).shape == (257, 317)


def test_tone_peaks_at_expected_bin():
    t = np.arange(16000) / 16000
    spec = np.abs(stft(np.sin(2 * np.pi * 1000 * t)))
    # 1 kHz * 512 / 16 kHz = bin 32
    assert np.all(np.argmax(spec[:, 2:-2], axis=0) == 32)


@pytest.mark.parametrize("n", [400, 401, 999, 16000, 32000, 32017])
def test_perfect_reconstruction_lengths(rng, n):
    x = rng.standard_normal(n)
    y = istft(stft(x), length=n)
    assert np.max(np.abs(y - x)) < 1e-10


def test_batched_and_float32(rng):
    x = torch.as_tensor(rng.standard_normal((3, 2, 5000)), dtype=torch.float32)
    spec = stft(x)
    assert spec.shape == (3, 2, 257, CFG.n_frames(5000)) and spec.dtype == torch.complex64
    assert torch.max(torch.abs(istft(spec, length=5000) - x)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(n=st.integers(min_value=401, max_value=4000), seed=st.integers(0, 2**31 - 1),
       hop=st.sampled_from([50, 100, 200]))
def test_reconstruction_property(n, seed, hop):
    cfg = StftConfig(hop_length=hop)
    x = np.random.default_rng(seed).standard_normal(n)
    assert np.max(np.abs(istft(stft(x, cfg), cfg, n) - x)) < 1e-9


def test_stft_errors():
    with pytest.raises(ValueError):
        stft(np.zeros(0))
    with pytest.raises(ValueError):
        stft(np.array([1.0, np.nan] * 300))
    with pytest.raises(ValueError):
        istft(np.zeros((100, 10), dtype=complex))
    with pytest.raises(ValueError):
        StftConfig(hop_length=500)
    with pytest.raises(ValueError):
        StftConfig(window="kaiser")


def test_apply_mask_is_complex_product(rng):
    y = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
    m = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
    np.testing.assert_allclose(apply_mask(y, m), m * y, rtol=1e-14)
    with pytest.raises(ValueError):
        apply_mask(y, m[:, :5])


def test_ideal_crm_round_trip(rng):
    y = rng.standard_normal((8, 9)) + 1j * rng.standard_normal((8, 9))
    s = rng.standard_normal((8, 9)) + 1j * rng.standard_normal((8, 9))
    m = ideal_crm(y, s)
    np.testing.assert_allclose(m, s / y, rtol=1e-12)
    np.testing.assert_allclose(apply_mask(y, m), s, rtol=1e-12)


def test_ideal_crm_bounded_on_silent_bins():
    y = np.zeros((2, 2), dtype=complex)
    s = np.ones((2, 2), dtype=complex)
    assert np.all(np.isfinite(ideal_crm(y, s)))
    with pytest.raises(ValueError):
        ideal_crm(y, s, eps=0)


@pytest.mark.parametrize("src,dst,f0", [(16000, 10000, 1000.0), (16000, 8000, 500.0),
                                        (8000, 16000, 1250.0), (44100, 16000, 3000.0)])
def test_resample_keeps_tone_frequency(src, dst, f0):
    t = np.arange(src) / src
    y = resample(np.sin(2 * np.pi * f0 * t), src, dst)
    assert len(y) == math.ceil(src * dst / src)
    mid = y[len(y) // 4: 3 * len(y) // 4]
    spec = np.abs(np.fft.rfft(mid * np.hanning(len(mid)), 8 * len(mid)))
    peak = np.argmax(spec) * dst / (8 * len(mid))
    assert abs(peak - f0) < 2.0
    # amplitude survives the anti-alias filter
    assert abs(np.sqrt(np.mean(mid**2)) - 1 / np.sqrt(2)) < 0.005


def test_resample_constant_and_interior_against_scipy(rng):
    np.testing.assert_allclose(resample(np.full(999, 0.3), 16000, 10000), 0.3, atol=1e-14)
    x = sps.lfilter(*sps.butter(4, 0.3), rng.standard_normal(8000))
    ours = resample(x, 16000, 10000)
    ref = sps.resample_poly(x, 5, 8)
    assert np.max(np.abs(ours[200:-200] - ref[200:-200])) < 1e-3


def test_resample_removes_content_above_new_nyquist():
    t = np.arange(16000) / 16000
    y = resample(np.sin(2 * np.pi * 6500 * t), 16000, 10000)
    assert np.max(np.abs(y[500:-500])) < 0.01


def test_binaural_waveform_validation():
    w = BinauralWaveform(np.zeros(10), np.ones(10))
    assert w.duration == 10 / 16000
    assert w.stacked().shape == (2, 10)
    assert np.all((w + w.scaled(2)).right == 3)
    with pytest.raises(ValueError):
        BinauralWaveform(np.zeros(10), np.zeros(9))
    with pytest.raises(ValueError):
        BinauralWaveform(np.zeros(3), np.array([0, np.inf, 0]))
    with pytest.raises(ValueError):
        BinauralWaveform.from_stacked(np.zeros((3, 4)))
