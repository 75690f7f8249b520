import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dass.features import (
    TOY_FBANK,
    FbankConfig,
    denormalize,
    fbank,
    hz_to_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    normalize,
    read_wav,
    silence_value,
    write_wav,
)


def test_frame_count_10s_16k():
    cfg = FbankConfig()
    assert cfg.window == 400 and cfg.hop == 160
    assert fbank(np.zeros(160000), cfg).shape == (998, 128)
    assert cfg.frames_for_seconds(10) == 998


def test_toy_frame_count():
    assert TOY_FBANK.frames_for_seconds(10) == 199
    assert TOY_FBANK.frames_for_seconds(50) == 999


def test_zero_waveform_constant():
    cfg = FbankConfig(mean=-3.0, std=2.5)
    f = fbank(np.zeros(4000), cfg)
    assert np.all(f == f.flat[0])
    assert f.flat[0] == pytest.approx((np.log(1e-10) + 3.0) / 2.5, rel=1e-6)
    assert f.flat[0] == silence_value(cfg)


# below ~400 Hz the filters are narrower than one FFT bin and quantization decides
@pytest.mark.parametrize("freq", [440.0, 1000.0, 2500.0, 5000.0])
def test_tone_peaks_at_nearest_center(freq):
    cfg = FbankConfig()
    t = np.arange(16000) / 16000
    f = fbank(np.sin(2 * np.pi * freq * t), cfg)
    centers = mel_center_frequencies(cfg)
    expected = int(np.argmin(np.abs(centers - freq)))
    assert np.all(f.argmax(axis=1) == expected)


def test_shift_covariance():
    cfg = FbankConfig()
    x = np.random.default_rng(0).normal(size=16000)
    a = fbank(x[cfg.hop:], cfg)
    b = fbank(x, cfg)
    n = min(len(a), len(b) - 1)
    np.testing.assert_allclose(a[:n], b[1:n + 1], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(0.1, 10))
def test_normalize_roundtrip(mean, std):
    cfg = FbankConfig(mean=mean, std=std)
    x = np.random.default_rng(1).normal(size=(5, 7)) * 10
    np.testing.assert_allclose(denormalize(normalize(x, cfg), cfg), x, atol=1e-12, rtol=0)


def test_mel_scale_inverse():
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)


def test_filterbank_shape_and_peaks():
    cfg = FbankConfig(mel_bins=40)
    fb = mel_filterbank(cfg)
    assert fb.shape == (40, cfg.fft_size // 2 + 1)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) > 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        FbankConfig(hop_ms=30, window_ms=25)
    with pytest.raises(ValueError):
        FbankConfig(mel_bins=0)
    with pytest.raises(ValueError):
        fbank(np.zeros(0))


def test_wav_roundtrip(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 100, 8000))
    write_wav(tmp_path / "a.wav", x, 8000)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == 8000
    np.testing.assert_allclose(y, x, atol=1 / 32768 + 1e-12)
