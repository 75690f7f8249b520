"""Log-mel filterbank features, normalization and WAV I/O."""
from __future__ import annotations

import wave
from dataclasses import asdict, dataclass, replace

import numpy as np


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 128
    n_fft: int | None = None
    f_min: float = 20.0
    f_max: float | None = None
    log_floor: float = 1e-10
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.mel_bins < 1:
            raise ValueError("mel_bins must be >= 1")
        if self.hop_ms <= 0 or self.window_ms <= 0 or self.hop_ms > self.window_ms:
            raise ValueError("need 0 < hop_ms <= window_ms")
        if self.std <= 0:
            raise ValueError("std must be positive")

    @property
    def window(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        if self.n_fft is not None:
            return self.n_fft
        return 1 << (self.window - 1).bit_length()

    @property
    def upper_frequency(self) -> float:
        return self.f_max if self.f_max is not None else self.sample_rate / 2.0

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window:
            return 1
        return 1 + (num_samples - self.window) // self.hop

    def frames_for_seconds(self, seconds: float) -> int:
        return self.num_frames(int(round(seconds * self.sample_rate)))

    def with_stats(self, mean: float, std: float) -> "FbankConfig":
        return replace(self, mean=float(mean), std=float(std))

    def to_dict(self) -> dict:
        return asdict(self)


# desk-scale setting used by the toy experiments: 199 frames x 16 mels per 10 s.
# The higher floor keeps window sidelobes of quiet events out of distant bins.
TOY_FBANK = FbankConfig(sample_rate=8000, window_ms=100.0, hop_ms=50.0, mel_bins=16,
                        f_min=50.0, log_floor=1e-3)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FbankConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_frequency),
                                  cfg.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Unnormalized triangular filters on the mel scale, ``(mel_bins, n_fft//2+1)``."""
    mel_edges = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_frequency), cfg.mel_bins + 2)
    bin_mel = hz_to_mel(np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate))
    lo, mid, hi = mel_edges[:-2, None], mel_edges[1:-1, None], mel_edges[2:, None]
    up = (bin_mel[None, :] - lo) / (mid - lo)
    down = (hi - bin_mel[None, :]) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def power_frames(waveform, cfg: FbankConfig) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D array")
    if x.size < cfg.window:
        x = np.pad(x, (0, cfg.window - x.size))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window)[:: cfg.hop]
    spec = np.fft.rfft(frames * np.hanning(cfg.window), n=cfg.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(waveform, cfg: FbankConfig) -> np.ndarray:
    """Un-normalized ``log(mel power + floor)``, shape ``(frames, mel_bins)``."""
    mel = power_frames(waveform, cfg) @ mel_filterbank(cfg).T
    return np.log(mel + cfg.log_floor)


def normalize(features, cfg: FbankConfig):
    return (np.asarray(features) - cfg.mean) / cfg.std


def denormalize(features, cfg: FbankConfig):
    return np.asarray(features) * cfg.std + cfg.mean


def fbank(waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """Normalized log-mel features, float32 ``(frames, mel_bins)``."""
    return normalize(log_mel(waveform, cfg), cfg).astype(np.float32)


def silence_value(cfg: FbankConfig) -> float:
    """Normalized value of a frame with zero power."""
    return float(np.float32((np.log(cfg.log_floor) - cfg.mean) / cfg.std))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM; returns float samples in [-1, 1) and the rate."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32768.0, rate


def write_wav(path, waveform, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
