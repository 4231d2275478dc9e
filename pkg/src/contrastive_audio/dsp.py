"""STFT, mel filterbank and log-mel spectrogram frontend.

Defaults: 25 ms Hann window, 10 ms hop, 512-point FFT, 64 mel bands and
96 frames at 16 kHz, i.e. one network input per 1 s segment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .exceptions import ClipTooShort, ConfigError, InvalidRange

__all__ = [
    "StftConfig",
    "MelConfig",
    "hz_to_mel",
    "mel_to_hz",
    "stft",
    "mel_filterbank",
    "log_mel",
    "log_mel_batch",
    "LOG_FLOOR",
    "filter_centers",
    "n_frames_for",
    "segment_starts",
    "write_mels",
    "read_mels",
]

LOG_FLOOR = 1e-10


def _is_pow2(n):
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    sample_rate: int = 16000

    def __post_init__(self):
        if not _is_pow2(self.fft_size):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.win_length > self.fft_size:
            raise ConfigError(f"fft_size {self.fft_size} shorter than window "
                              f"({self.win_length} samples)")
        if self.hop_length < 1:
            raise ConfigError("hop must be at least one sample")

    @property
    def win_length(self):
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self):
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelConfig:
    stft: StftConfig = StftConfig()
    n_mels: int = 64
    n_frames: int = 96
    fmin: float = 0.0
    fmax: float | None = None

    @property
    def sample_rate(self):
        return self.stft.sample_rate

    @property
    def fmax_hz(self):
        return self.sample_rate / 2 if self.fmax is None else self.fmax

    @property
    def min_samples(self):
        """Shortest input that yields ``n_frames`` STFT frames."""
        return self.stft.win_length + (self.n_frames - 1) * self.stft.hop_length


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _hann(n):
    # periodic Hann; read-only so the cached array can be shared
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def _frames(x, win, hop):
    n = (x.size - win) // hop + 1
    view = np.lib.stride_tricks.sliding_window_view(x, win)
    return view[: (n - 1) * hop + 1 : hop]


def stft(clip, cfg=StftConfig()):
    """One-sided complex STFT, shape ``(frames, fft_size // 2 + 1)``.

    Frame ``t`` covers samples ``[t*hop, t*hop + win)``, Hann-windowed and
    zero-padded to ``fft_size``.
    """
    x = clip.samples if hasattr(clip, "samples") else np.asarray(clip, dtype=np.float64)
    win, hop = cfg.win_length, cfg.hop_length
    if x.size < win:
        raise ClipTooShort(f"clip has {x.size} samples, window needs {win}")
    frames = _frames(x, win, hop) * _hann(win)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=-1)


def mel_filterbank(n_mels=64, fmin=0.0, fmax=None, sample_rate=16000, fft_size=512):
    """Triangular filters with centers uniformly spaced on the mel scale.

    Returns an ``(n_mels, fft_size // 2 + 1)`` matrix; each triangle rises from
    the previous center to its own (weight 1 at the center) and falls to the
    next one. No area normalization is applied.
    """
    if fmax is None:
        fmax = sample_rate / 2
    if n_mels < 1:
        raise InvalidRange(f"n_mels must be >= 1, got {n_mels}")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise InvalidRange(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got fmin={fmin}, fmax={fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    edges[0], edges[-1] = fmin, fmax  # exact band edges despite mel round trip
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # narrow low-frequency filters can fall between FFT bins; give each the
    # nearest bin so no row is empty
    for k in np.flatnonzero(~np.any(weights > 0, axis=1)):
        weights[k, np.argmin(np.abs(bin_hz - center[k, 0]))] = 1.0
    return weights


def filter_centers(n_mels=64, fmin=0.0, fmax=8000.0):
    """Center frequency in Hz of every mel filter."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


@lru_cache(maxsize=8)
def _cached_filterbank(cfg):
    fb = mel_filterbank(cfg.n_mels, cfg.fmin, cfg.fmax_hz, cfg.sample_rate, cfg.stft.fft_size)
    fb.setflags(write=False)
    return fb


def log_mel(clip, cfg=MelConfig()):
    """Natural-log mel energies, shape ``(n_frames, n_mels)``.

    Power spectrum -> filterbank -> ``log(max(p, 1e-10))``; only the first
    ``n_frames`` frames are kept.
    """
    x = clip.samples if hasattr(clip, "samples") else np.asarray(clip, dtype=np.float64)
    if hasattr(clip, "sample_rate") and clip.sample_rate != cfg.sample_rate:
        raise ConfigError(f"clip sample rate {clip.sample_rate} != frontend rate {cfg.sample_rate}")
    if x.size < cfg.min_samples:
        raise ClipTooShort(f"clip has {x.size} samples; {cfg.n_frames} frames need {cfg.min_samples}")
    x = x[: cfg.min_samples]
    spec = stft(x, cfg.stft)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ _cached_filterbank(cfg).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def log_mel_batch(segments, cfg=MelConfig()):
    """Stack ``log_mel`` over a sequence of clips or equal-length arrays."""
    return np.stack([log_mel(s, cfg) for s in segments])


# --------------------------------------------------------------- MELS blobs

_MELS_MAGIC = b"MELS"
_MELS_VERSION = 1


def write_mels(path, mel):
    """Write a spectrogram as a MELS blob (float32 little-endian, row-major)."""
    mel = np.asarray(mel)
    frames, n_mels = mel.shape
    header = _MELS_MAGIC + struct.pack("<III", _MELS_VERSION, frames, n_mels)
    Path(path).write_bytes(header + mel.astype("<f4").tobytes())


def read_mels(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MELS_MAGIC:
        raise ValueError(f"{path}: not a MELS blob")
    version, frames, n_mels = struct.unpack("<III", raw[4:16])
    if version != _MELS_VERSION:
        raise ValueError(f"{path}: MELS version {version}, expected {_MELS_VERSION}")
    if len(raw) != 16 + 4 * frames * n_mels:
        raise ValueError(f"{path}: MELS payload size mismatch")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(frames, n_mels).astype(np.float64)


def n_frames_for(n_samples, cfg=StftConfig()):
    return (n_samples - cfg.win_length) // cfg.hop_length + 1 if n_samples >= cfg.win_length else 0


def segment_starts(n_samples, seg_len):
    """Starts of all non-overlapping full-length segments."""
    return list(range(0, n_samples - seg_len + 1, seg_len))

