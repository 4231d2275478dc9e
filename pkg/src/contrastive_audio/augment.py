"""Waveform and spectrogram augmentations plus the anchor/positive pair sampler.

Anchor path:   raw clip -> white noise on a random 1 s chunk -> random 1 s
               segment -> log-mel.
Positive path: raw clip -> [time stretch x1.1 / x0.9] -> random 1 s segment
               -> [RIR filter] -> log-mel -> [time/freq mask].

Blocks in brackets are toggled by :class:`AugmentConfig`. Negatives are not
materialized: the positive of row ``j`` is a negative for anchor ``i != j``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import dsp
from .exceptions import (
    BatchTooSmall,
    ClipTooShort,
    ConfigError,
    InvalidRt60,
    SampleRateMismatch,
)
from .signal_io import AudioClip, load_wav

__all__ = [
    "Rir",
    "AugmentConfig",
    "PairBatch",
    "STRATEGIES",
    "strategy_config",
    "augment_for",
    "add_chunk_noise",
    "time_stretch",
    "resample_linear",
    "rir_filter",
    "convolve_truncated",
    "synth_rir",
    "synth_rir_bank",
    "load_rir_bank",
    "time_freq_mask",
    "make_pairs",
    "make_pair",
]

SILENT_POWER = 1e-12
SILENT_NOISE_POWER = 1e-4


@dataclass(frozen=True, eq=False)
class Rir:
    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0:
            raise ValueError("RIR taps must be a nonempty 1-D array")
        if not np.all(np.isfinite(taps)):
            raise ValueError("RIR taps must be finite")
        if not np.sum(taps ** 2) > 0:
            raise ValueError("RIR has zero energy")
        object.__setattr__(self, "taps", taps)


@dataclass(frozen=True)
class AugmentConfig:
    """Which augmentation blocks feed the positive branch, and their knobs.

    All three flags off is the noise-only baseline.
    """

    time_stretch: bool = False
    rir: bool = False
    mask: bool = False
    stretch_factor: float = 0.1
    stretch_prob: float = 0.5
    noise_snr_db_range: tuple = (5.0, 20.0)
    mask_t_max: int = 24
    mask_f_max: int = 12
    chunk_s: float = 1.0
    segment_s: float = 1.0
    rir_bank: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not 0 < self.stretch_factor < 1:
            raise ConfigError(f"stretch_factor must be in (0, 1), got {self.stretch_factor}")
        if not 0 <= self.stretch_prob <= 1:
            raise ConfigError(f"stretch_prob must be in [0, 1], got {self.stretch_prob}")
        lo, hi = self.noise_snr_db_range
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ConfigError(f"bad noise_snr_db_range {self.noise_snr_db_range}")
        if not 0 <= self.mask_t_max <= 96 or not 0 <= self.mask_f_max <= 64:
            raise ConfigError("mask_t_max must be in [0, 96] and mask_f_max in [0, 64]")
        object.__setattr__(self, "noise_snr_db_range", (float(lo), float(hi)))
        object.__setattr__(self, "rir_bank", tuple(self.rir_bank))

    @property
    def strategy(self):
        for name, flags in STRATEGIES.items():
            if flags == (self.time_stretch, self.rir, self.mask):
                return name
        return "custom"

    def to_dict(self):
        return {
            "time_stretch": self.time_stretch,
            "rir": self.rir,
            "mask": self.mask,
            "stretch_factor": self.stretch_factor,
            "stretch_prob": self.stretch_prob,
            "noise_snr_db_range": list(self.noise_snr_db_range),
            "mask_t_max": self.mask_t_max,
            "mask_f_max": self.mask_f_max,
            "chunk_s": self.chunk_s,
            "segment_s": self.segment_s,
            "n_rirs": len(self.rir_bank),
        }

    @classmethod
    def from_dict(cls, d, rir_bank=()):
        d = {k: v for k, v in d.items() if k != "n_rirs"}
        d["noise_snr_db_range"] = tuple(d["noise_snr_db_range"])
        return cls(rir_bank=tuple(rir_bank), **d)


# strategy name -> (time_stretch, rir, mask); one row per ablation-table line
STRATEGIES = {
    "noise": (False, False, False),
    "stretch": (True, False, False),
    "rir": (False, True, False),
    "mask": (False, False, True),
    "stretch+mask": (True, False, True),
}


def strategy_config(name, **overrides):
    try:
        stretch, rir, mask = STRATEGIES[name]
    except KeyError:
        raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    return AugmentConfig(time_stretch=stretch, rir=rir, mask=mask, **overrides)


@dataclass(frozen=True, eq=False)
class PairBatch:
    anchors: np.ndarray
    positives: np.ndarray

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise ValueError(f"anchor shape {self.anchors.shape} != positive shape {self.positives.shape}")

    @property
    def batch_size(self):
        return self.anchors.shape[0]


# ------------------------------------------------------------------- transforms


def add_chunk_noise(clip, snr_db, rng, chunk_s=1.0):
    """Add white Gaussian noise at ``snr_db`` to one uniformly placed chunk.

    Samples outside the chunk are returned untouched. A chunk whose power is
    below 1e-12 receives noise at power 1e-4 instead.
    """
    n = int(round(chunk_s * clip.sample_rate))
    if n > len(clip) or n < 1:
        raise ClipTooShort(f"chunk of {n} samples does not fit a {len(clip)}-sample clip")
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    start = int(rng.integers(0, len(clip) - n + 1))
    out = clip.samples.copy()
    chunk = out[start:start + n]
    power = float(np.mean(chunk ** 2))
    noise_power = power / 10.0 ** (snr_db / 10.0) if power >= SILENT_POWER else SILENT_NOISE_POWER
    noise = rng.standard_normal(n)
    # rescale to the exact target power so the realized SNR matches
    noise *= math.sqrt(noise_power / np.mean(noise ** 2))
    out[start:start + n] = chunk + noise
    return AudioClip(out, clip.sample_rate)


def resample_linear(samples, factor):
    """Speed up by ``factor`` with linear interpolation; length ``round(N / factor)``."""
    n = samples.size
    m = int(round(n / factor))
    pos = np.minimum(np.arange(m) * factor, n - 1)
    return np.interp(pos, np.arange(n), samples)


def time_stretch(clip, rng, factor=0.1, prob=0.5):
    """Resample the whole clip to speed ``1 + factor`` with probability ``prob``, else ``1 - factor``."""
    speed = 1.0 + factor if rng.random() < prob else 1.0 - factor
    return AudioClip(resample_linear(clip.samples, speed), clip.sample_rate)


def convolve_truncated(x, taps):
    """Full linear convolution truncated to ``len(x)`` (FFT based)."""
    return fftconvolve(x, taps, mode="full")[: x.size]


def rir_filter(segment, rir):
    """Convolve with a room impulse response, then restore the input RMS."""
    if rir.sample_rate != segment.sample_rate:
        raise SampleRateMismatch(f"RIR at {rir.sample_rate} Hz, segment at {segment.sample_rate} Hz")
    x = segment.samples
    y = convolve_truncated(x, rir.taps)
    rms_in = math.sqrt(float(np.mean(x ** 2)))
    rms_out = math.sqrt(float(np.mean(y ** 2)))
    if rms_out > 0:
        y = y * (rms_in / rms_out)
    return AudioClip(y, segment.sample_rate)


def synth_rir(rt60_s, sample_rate, rng):
    """Exponentially decaying Gaussian noise with a 60 dB decay time of ``rt60_s``."""
    if not 0.05 < rt60_s <= 1.0:
        raise InvalidRt60(f"rt60_s must be in (0.05, 1.0], got {rt60_s}")
    n = math.ceil(rt60_s * sample_rate)
    env = np.exp(-6.908 * np.arange(n) / (rt60_s * sample_rate))
    return Rir(rng.standard_normal(n) * env, sample_rate)


def synth_rir_bank(n, sample_rate, seed, rt60_range=(0.1, 0.6)):
    rng = np.random.default_rng(seed)
    return tuple(synth_rir(float(rng.uniform(*rt60_range)), sample_rate, rng) for _ in range(n))


def load_rir_bank(directory, sample_rate=None):
    """Every ``*.wav`` in ``directory`` (sorted by name) as an :class:`Rir`."""
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise ConfigError(f"RIR bank {directory} contains no WAV files")
    bank = []
    for p in paths:
        clip = load_wav(p)
        if sample_rate is not None and clip.sample_rate != sample_rate:
            raise SampleRateMismatch(f"{p}: {clip.sample_rate} Hz, expected {sample_rate} Hz")
        bank.append(Rir(clip.samples, clip.sample_rate))
    return tuple(bank)


def time_freq_mask(mel, mask_t_max, mask_f_max, rng):
    """One time band and one frequency band set to the spectrogram's global mean.

    Widths are drawn from ``{0..max}`` and starts uniformly among valid offsets.
    """
    frames, n_mels = mel.shape
    if not 0 <= mask_t_max <= frames or not 0 <= mask_f_max <= n_mels:
        raise ValueError(f"mask widths ({mask_t_max}, {mask_f_max}) exceed shape {mel.shape}")
    out = mel.copy()
    fill = mel.mean()
    t = int(rng.integers(0, mask_t_max + 1))
    t0 = int(rng.integers(0, frames - t + 1))
    f = int(rng.integers(0, mask_f_max + 1))
    f0 = int(rng.integers(0, n_mels - f + 1))
    out[t0:t0 + t, :] = fill
    out[:, f0:f0 + f] = fill
    return out


# ------------------------------------------------------------------ pair sampler


def _random_segment(samples, seg_len, rng):
    if samples.size < seg_len:
        raise ClipTooShort(f"clip of {samples.size} samples shorter than a {seg_len}-sample segment")
    start = int(rng.integers(0, samples.size - seg_len + 1))
    return samples[start:start + seg_len]


def _stretched_segment(samples, seg_len, cfg, rng):
    # Same values and RNG draws as time_stretch() followed by _random_segment(),
    # but only the selected segment is interpolated.
    speed = 1.0 + cfg.stretch_factor if rng.random() < cfg.stretch_prob else 1.0 - cfg.stretch_factor
    n = samples.size
    m = int(round(n / speed))
    if m < seg_len:
        raise ClipTooShort(f"stretched clip of {m} samples shorter than a {seg_len}-sample segment")
    start = int(rng.integers(0, m - seg_len + 1))
    pos = np.minimum(np.arange(start, start + seg_len) * speed, n - 1)
    return np.interp(pos, np.arange(n), samples)


def make_pair(clip, cfg, rng, mel_cfg=dsp.MelConfig()):
    """Anchor and positive log-mel spectrograms for one clip."""
    sr = clip.sample_rate
    seg_len = int(round(cfg.segment_s * sr))
    if len(clip) < 2 * seg_len:
        raise ClipTooShort(f"clip is {clip.duration_s:.3f}s; pairs need at least {2 * cfg.segment_s}s")

    snr = rng.uniform(*cfg.noise_snr_db_range)
    noisy = add_chunk_noise(clip, snr, rng, cfg.chunk_s)
    anchor = dsp.log_mel(_random_segment(noisy.samples, seg_len, rng), mel_cfg)

    if cfg.time_stretch:
        segment = AudioClip(_stretched_segment(clip.samples, seg_len, cfg, rng), sr)
    else:
        segment = AudioClip(_random_segment(clip.samples, seg_len, rng), sr)
    if cfg.rir:
        if not cfg.rir_bank:
            raise ConfigError("rir augmentation enabled but the RIR bank is empty")
        segment = rir_filter(segment, cfg.rir_bank[int(rng.integers(len(cfg.rir_bank)))])
    positive = dsp.log_mel(segment.samples, mel_cfg)
    if cfg.mask:
        positive = time_freq_mask(positive, cfg.mask_t_max, cfg.mask_f_max, rng)
    return anchor, positive


def row_rngs(rng, n):
    """Independent per-row generators derived from one draw of ``rng``."""
    base = int(rng.integers(0, 2 ** 63))
    return [np.random.default_rng([base, i]) for i in range(n)]


def make_pairs(batch, cfg, rng, mel_cfg=dsp.MelConfig(), threads=1):
    """Build a :class:`PairBatch` from ``B >= 2`` clips.

    Each row gets its own generator seeded from ``(draw, row)``, so the result
    does not depend on ``threads``.
    """
    batch = list(batch)
    if len(batch) < 2:
        raise BatchTooSmall(f"need at least 2 clips per batch, got {len(batch)}")
    if cfg.rir and not cfg.rir_bank:
        raise ConfigError("rir augmentation enabled but the RIR bank is empty")
    rngs = row_rngs(rng, len(batch))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda a: make_pair(a[0], cfg, a[1], mel_cfg), zip(batch, rngs)))
    else:
        rows = [make_pair(c, cfg, r, mel_cfg) for c, r in zip(batch, rngs)]
    return PairBatch(np.stack([a for a, _ in rows]), np.stack([p for _, p in rows]))


def with_bank(cfg, bank):
    return replace(cfg, rir_bank=tuple(bank))


def augment_for(strategy, rir_dir=None, seed=0, sample_rate=16000, n_synth=32, **overrides):
    """Strategy config with an RIR bank attached when the strategy needs one.

    Uses the WAVs in ``rir_dir`` when given, otherwise ``n_synth`` synthetic
    responses seeded by ``seed``.
    """
    cfg = strategy_config(strategy, **overrides)
    if not cfg.rir:
        return cfg
    if rir_dir is not None:
        return with_bank(cfg, load_rir_bank(rir_dir, sample_rate))
    return with_bank(cfg, synth_rir_bank(n_synth, sample_rate, seed))
