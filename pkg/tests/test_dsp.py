import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contrastive_audio import dsp
from contrastive_audio.exceptions import ClipTooShort, InvalidRange
from contrastive_audio.signal_io import AudioClip


def dft_frames(x, win, hop, nfft):
    """Direct O(N^2) DFT of every Hann-windowed frame (one-sided)."""
    n = np.arange(win)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / win)
    k = np.arange(nfft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * n[None, :] / nfft)
    frames = []
    t = 0
    while t + win <= len(x):
        frames.append(basis @ (w * x[t:t + win]))
        t += hop
    return np.array(frames)


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(0)
    cfg = dsp.StftConfig()
    for _ in range(3):
        x = rng.standard_normal(1024)
        got = dsp.stft(x, cfg)
        want = dft_frames(x, cfg.win_length, cfg.hop_length, cfg.fft_size)
        assert got.shape == want.shape
        err = np.max(np.abs(got - want)) / np.max(np.abs(want))
        assert err <= 1e-6


def test_stft_frame_count():
    spec = dsp.stft(np.zeros(16000))
    assert spec.shape == ((16000 - 400) // 160 + 1, 257) == (98, 257)


def test_stft_dc():
    spec = np.abs(dsp.stft(np.ones(4000)))
    assert np.all(np.argmax(spec, axis=1) == 0)
    # with fft_size == window length the periodic Hann leaks into bin 1 only
    cfg = dsp.StftConfig(window_ms=32.0, hop_ms=10.0, fft_size=512)
    spec = np.abs(dsp.stft(np.ones(4000), cfg))
    assert np.max(spec[:, 2:]) <= 1e-10 * np.min(spec[:, 0])


def test_stft_too_short():
    with pytest.raises(ClipTooShort):
        dsp.stft(np.zeros(399))


def test_stft_linearity():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 3000))
    a, b = 0.7, -2.3
    lhs = dsp.stft(a * x + b * y)
    rhs = a * dsp.stft(x) + b * dsp.stft(y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


def test_windowed_parseval():
    rng = np.random.default_rng(2)
    cfg = dsp.StftConfig()
    x = rng.standard_normal(2000)
    one_sided = dsp.stft(x, cfg)
    n = cfg.fft_size
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.win_length) / cfg.win_length)
    for t, spec in enumerate(one_sided):
        # rebuild the two-sided spectrum from the one-sided half
        full = np.concatenate([spec, np.conj(spec[1:-1][::-1])])
        assert full.size == n
        seg = x[t * cfg.hop_length:t * cfg.hop_length + cfg.win_length]
        lhs = np.sum(np.abs(full) ** 2)
        rhs = n * np.sum((w * seg) ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_stft_config_validation():
    with pytest.raises(ValueError):
        dsp.StftConfig(fft_size=500)
    with pytest.raises(ValueError):
        dsp.StftConfig(fft_size=256)


def test_single_filter():
    fb = dsp.mel_filterbank(n_mels=1, fmin=0, fmax=8000)
    assert fb.shape == (1, 257)
    bins = np.arange(257) * 16000 / 512
    support = bins[fb[0] > 0]
    assert support.min() > 0 and support.max() < 8000
    assert fb[0, 0] == 0 and fb[0, -1] == 0
    center = dsp.mel_to_hz(dsp.hz_to_mel(8000) / 2)
    # weight at the nearest bin to the center is within one bin's slope of 1
    assert fb[0].max() == pytest.approx(1.0, abs=31.25 / (8000 - center))
    assert fb[0].max() <= 1.0


def test_filterbank_properties():
    fb = dsp.mel_filterbank()
    assert fb.shape == (64, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)
    assert np.all(fb.max(axis=1) <= 1.0)
    support = [np.flatnonzero(row) for row in fb]
    for a, b in zip(support, support[1:]):
        assert b.min() <= a.max()  # adjacent filters share at least a bin
    centers = dsp.filter_centers(64, 0, 8000)
    assert np.all(np.diff(centers) > 0)


def test_filter_centers_from_formula():
    top = 2595 * math.log10(1 + 8000 / 700)
    assert top == pytest.approx(2840.0, abs=0.1)
    spacing = top / 65
    expected = [700 * (10 ** ((k + 1) * spacing / 2595) - 1) for k in range(64)]
    np.testing.assert_allclose(dsp.filter_centers(64, 0, 8000), expected, rtol=1e-12)


def test_filterbank_invalid_range():
    with pytest.raises(InvalidRange):
        dsp.mel_filterbank(fmin=4000, fmax=3000)
    with pytest.raises(InvalidRange):
        dsp.mel_filterbank(fmax=9000)


def test_log_mel_silence():
    mel = dsp.log_mel(AudioClip(np.zeros(16000), 16000))
    assert mel.shape == (96, 64)
    assert np.all(mel == math.log(1e-10))


def test_log_mel_shape_one_second():
    rng = np.random.default_rng(0)
    assert dsp.log_mel(rng.standard_normal(16000)).shape == (96, 64)
    assert dsp.MelConfig().min_samples == 15600
    dsp.log_mel(np.zeros(15600))
    with pytest.raises(ClipTooShort):
        dsp.log_mel(np.zeros(15599))


def test_log_mel_sine_peak():
    t = np.arange(16000) / 16000
    mel = dsp.log_mel(0.5 * np.sin(2 * np.pi * 440 * t))
    centers = dsp.filter_centers(64, 0, 8000)
    assert np.argmax(mel.mean(axis=0)) == np.argmin(np.abs(centers - 440))


def test_log_mel_deterministic():
    x = np.random.default_rng(5).standard_normal(16000)
    assert dsp.log_mel(x).tobytes() == dsp.log_mel(x.copy()).tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 15600, elements=st.floats(-1e6, 1e6)))
def test_log_mel_always_finite(x):
    assert np.all(np.isfinite(dsp.log_mel(x)))


def test_mels_blob_round_trip(tmp_path):
    mel = np.random.default_rng(0).standard_normal((96, 64))
    dsp.write_mels(tmp_path / "a.mels", mel)
    raw = (tmp_path / "a.mels").read_bytes()
    assert raw[:4] == b"MELS" and len(raw) == 16 + 96 * 64 * 4
    np.testing.assert_array_equal(dsp.read_mels(tmp_path / "a.mels"), mel.astype(np.float32))
