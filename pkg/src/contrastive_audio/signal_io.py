"""WAV reading/writing, the synthetic texture corpus and JSON-lines manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import (
    ConfigError,
    MalformedWav,
    MissingFile,
    ParseError,
    UnsupportedFormat,
)

__all__ = [
    "AudioClip",
    "ManifestEntry",
    "CorpusSpec",
    "load_wav",
    "write_wav",
    "wav_info",
    "generate_synthetic_corpus",
    "read_manifest",
    "write_manifest",
    "SPLITS",
]

SPLITS = ("pretrain", "train", "test")

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("AudioClip samples must be a nonempty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate

    def segment(self, start, length):
        return AudioClip(self.samples[start:start + length], self.sample_rate)


# --------------------------------------------------------------------------- WAV


def _parse_header(raw, path):
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = pos + 8
        if chunk_id == b"fmt ":
            if size < 16 or body + size > len(raw):
                raise MalformedWav(f"{path}: truncated fmt chunk")
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", raw[body:body + 16])
            if tag == _EXTENSIBLE and size >= 26:
                (tag,) = struct.unpack("<H", raw[body + 24:body + 26])
            fmt = (tag, channels, rate, align, bits)
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedWav(f"{path}: data chunk before fmt chunk")
            if body + size > len(raw):
                raise MalformedWav(f"{path}: truncated data chunk "
                                   f"({len(raw) - body} of {size} bytes)")
            return fmt, body, size
        pos = body + size + (size & 1)
    raise MalformedWav(f"{path}: missing fmt or data chunk")


def _check_format(fmt, path):
    tag, channels, rate, align, bits = fmt
    if channels != 1:
        raise UnsupportedFormat(f"{path}: expected 1 channel, found {channels}")
    if rate <= 0:
        raise MalformedWav(f"{path}: sample rate {rate}")
    if (tag, bits) == (_PCM, 16):
        return np.dtype("<i2")
    if (tag, bits) == (_IEEE_FLOAT, 32):
        return np.dtype("<f4")
    raise UnsupportedFormat(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")


def load_wav(path):
    """Read a mono PCM16 or float32 WAV file, scaled to [-1, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(f"{path}: no such file") from None
    fmt, offset, size = _parse_header(raw, path)
    dtype = _check_format(fmt, path)
    if size % dtype.itemsize:
        raise MalformedWav(f"{path}: data size {size} not a multiple of {dtype.itemsize}")
    data = np.frombuffer(raw, dtype=dtype, count=size // dtype.itemsize, offset=offset)
    if data.size == 0:
        raise MalformedWav(f"{path}: no samples")
    if dtype.kind == "i":
        samples = data.astype(np.float64) / 32768.0
    else:
        samples = data.astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise MalformedWav(f"{path}: non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, fmt[2])


def wav_info(path):
    """Return ``(n_samples, sample_rate)`` without decoding the samples."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(f"{path}: no such file") from None
    fmt, _, size = _parse_header(raw, path)
    dtype = _check_format(fmt, path)
    return size // dtype.itemsize, fmt[2]


def write_wav(path, clip):
    """Write ``clip`` as mono float32 little-endian WAV."""
    data = np.clip(clip.samples, -1.0, 1.0).astype("<f4").tobytes()
    header = b"".join([
        b"RIFF", struct.pack("<I", 4 + 8 + 16 + 8 + len(data)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, _IEEE_FLOAT, 1, clip.sample_rate,
                             clip.sample_rate * 4, 4, 32),
        b"data", struct.pack("<I", len(data)),
    ])
    Path(path).write_bytes(header + data)


# ---------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int | None
    split: str
    duration_s: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if self.split == "pretrain" and self.label is not None:
            raise ValueError("pretrain entries must not carry a label")
        if self.split != "pretrain" and self.label is None:
            raise ValueError(f"{self.split} entry requires a label")
        if self.label is not None and (isinstance(self.label, bool) or
                                       not isinstance(self.label, int) or self.label < 0):
            raise ValueError(f"label must be a nonnegative int, got {self.label!r}")

    def to_json(self):
        record = {"path": self.path, "split": self.split, "duration_s": self.duration_s}
        if self.label is not None:
            record["label"] = self.label
        return json.dumps(record, sort_keys=True)


def write_manifest(path, entries):
    lines = [e.to_json() + "\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path, check_files=True):
    """Parse a JSON-lines manifest.

    Relative clip paths are resolved against the manifest's directory and
    returned as absolute paths. With ``check_files`` every referenced WAV must
    exist and its header duration must agree with ``duration_s`` to 1 ms.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path}: manifest not found")
    root = path.resolve().parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise ParseError("entry must be a JSON object", lineno)
        unknown = set(record) - {"path", "label", "split", "duration_s"}
        if unknown:
            raise ParseError(f"unknown fields {sorted(unknown)}", lineno)
        try:
            clip_path = record["path"]
            if not isinstance(clip_path, str):
                raise ValueError("path must be a string")
            duration = record["duration_s"]
            if isinstance(duration, bool) or not isinstance(duration, (int, float)):
                raise ValueError("duration_s must be a number")
            entry = ManifestEntry(
                path=str(root / clip_path),
                label=record.get("label"),
                split=record["split"],
                duration_s=float(duration),
            )
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if check_files:
            n, sr = wav_info(entry.path)
            if abs(n / sr - entry.duration_s) > 1e-3:
                raise ParseError(f"{entry.path}: duration {n / sr:.4f}s does not match "
                                 f"manifest {entry.duration_s:.4f}s", lineno)
        entries.append(entry)
    return entries


# ------------------------------------------------------------- synthetic corpus


@dataclass(frozen=True)
class CorpusSpec:
    n_classes: int = 4
    clips_per_class: int = 30
    clip_seconds: float = 10.0
    sample_rate: int = 16000
    seed: int = 0
    segment_seconds: float = 1.0
    pretrain_fraction: float = 0.5
    train_fraction: float = 0.25

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.clips_per_class < 1:
            raise ConfigError("clips_per_class must be >= 1")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.clip_seconds < 2 * self.segment_seconds:
            raise ConfigError(f"clip_seconds ({self.clip_seconds}) must be at least twice "
                              f"the segment length ({self.segment_seconds})")
        if not (0 <= self.pretrain_fraction and 0 <= self.train_fraction
                and self.pretrain_fraction + self.train_fraction <= 1):
            raise ConfigError("split fractions must be nonnegative and sum to <= 1")


def _split_counts(spec):
    n = spec.clips_per_class
    n_pre = int(round(n * spec.pretrain_fraction))
    n_train = int(round(n * spec.train_fraction))
    n_train = min(n_train, n - n_pre)
    return n_pre, n_train, n - n_pre - n_train


def synth_texture(label, n_samples, sample_rate, rng):
    """One clip of class ``label``: AM-modulated harmonic stack plus noise.

    Fundamental 200*(label+1) Hz (+/-1% per-clip detune) with two overtones,
    amplitude modulated at a class-specific rate. Overtones above Nyquist are
    dropped.
    """
    t = np.arange(n_samples) / sample_rate
    f0 = 200.0 * (label + 1) * (1.0 + rng.uniform(-0.01, 0.01))
    x = np.zeros(n_samples)
    for h, amp in enumerate((1.0, 0.5, 0.25), start=1):
        if h * f0 < sample_rate / 2:
            amp *= rng.uniform(0.7, 1.0)
            x += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    am_rate = 1.0 + 1.5 * label
    depth = rng.uniform(0.3, 0.6)
    x *= 1.0 + depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    x /= np.max(np.abs(x))
    x += rng.uniform(0.01, 0.05) * rng.standard_normal(n_samples)
    return 0.5 * x / np.max(np.abs(x))


def generate_synthetic_corpus(spec, out_dir):
    """Write a labeled synthetic corpus and its manifest under ``out_dir``.

    Clip ``i`` of class ``k`` is generated from its own RNG stream seeded by
    ``(spec.seed, k, i)``, so the corpus is a pure function of ``spec``.
    Returns ``(manifest_path, entries)``.
    """
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    try:
        clip_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {clip_dir}: {exc}") from exc
    n_samples = int(round(spec.clip_seconds * spec.sample_rate))
    n_pre, n_train, _ = _split_counts(spec)
    entries = []
    for k in range(spec.n_classes):
        for i in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, k, i])
            clip = AudioClip(synth_texture(k, n_samples, spec.sample_rate, rng), spec.sample_rate)
            rel = f"clips/class{k:02d}_{i:04d}.wav"
            write_wav(out_dir / rel, clip)
            split = "pretrain" if i < n_pre else "train" if i < n_pre + n_train else "test"
            entries.append(ManifestEntry(
                path=rel,
                label=None if split == "pretrain" else k,
                split=split,
                duration_s=n_samples / spec.sample_rate,
            ))
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, entries)
    (out_dir / "corpus_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return manifest_path, entries
