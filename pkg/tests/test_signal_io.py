import json
import struct

import numpy as np
import pytest

from contrastive_audio.exceptions import MalformedWav, MissingFile, ParseError, UnsupportedFormat
from contrastive_audio.signal_io import (
    AudioClip,
    CorpusSpec,
    ManifestEntry,
    generate_synthetic_corpus,
    load_wav,
    read_manifest,
    write_manifest,
    write_wav,
)


def pcm16_wav(path, values, rate=16000, channels=1):
    data = np.asarray(values, dtype="<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, channels, rate, rate * 2 * channels,
                                    2 * channels, 16)
    header += b"data" + struct.pack("<I", len(data))
    path.write_bytes(header + data)


def test_pcm16_silence(tmp_path):
    pcm16_wav(tmp_path / "s.wav", np.zeros(16000))
    clip = load_wav(tmp_path / "s.wav")
    assert clip.sample_rate == 16000
    assert len(clip) == 16000
    assert not clip.samples.any()


def test_pcm16_full_scale(tmp_path):
    pcm16_wav(tmp_path / "s.wav", [32767, -32768, 0])
    clip = load_wav(tmp_path / "s.wav")
    assert clip.samples[0] == 32767 / 32768
    assert clip.samples[1] == -1.0


def test_float_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    for trial in range(5):
        x = rng.uniform(-1, 1, size=rng.integers(1, 5000))
        write_wav(tmp_path / "f.wav", AudioClip(x, 22050))
        back = load_wav(tmp_path / "f.wav")
        assert back.sample_rate == 22050
        assert np.max(np.abs(back.samples - x)) <= 2.0 ** -15


def test_rejects_stereo(tmp_path):
    pcm16_wav(tmp_path / "st.wav", np.zeros(20), channels=2)
    with pytest.raises(UnsupportedFormat, match="channel"):
        load_wav(tmp_path / "st.wav")


def test_rejects_8bit(tmp_path):
    data = bytes(10)
    raw = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    raw += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 8000, 1, 8)
    raw += b"data" + struct.pack("<I", len(data)) + data
    (tmp_path / "u8.wav").write_bytes(raw)
    with pytest.raises(UnsupportedFormat):
        load_wav(tmp_path / "u8.wav")


def test_truncated_and_garbage(tmp_path):
    pcm16_wav(tmp_path / "t.wav", np.zeros(100))
    raw = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(raw[:-10])
    with pytest.raises(MalformedWav, match="truncated"):
        load_wav(tmp_path / "t.wav")
    (tmp_path / "g.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(MalformedWav):
        load_wav(tmp_path / "g.wav")
    with pytest.raises(MissingFile):
        load_wav(tmp_path / "nope.wav")


def test_amplitudes_bounded(tmp_path):
    x = np.array([2.0, -3.0, 0.5], dtype="<f4")
    raw = b"RIFF" + struct.pack("<I", 36 + 12) + b"WAVE"
    raw += b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, 100, 400, 4, 32)
    raw += b"data" + struct.pack("<I", 12) + x.tobytes()
    (tmp_path / "loud.wav").write_bytes(raw)
    clip = load_wav(tmp_path / "loud.wav")
    assert clip.samples.max() <= 1 and clip.samples.min() >= -1


def small_spec(**kw):
    base = dict(n_classes=3, clips_per_class=4, clip_seconds=2.0, seed=7)
    base.update(kw)
    return CorpusSpec(**base)


def test_corpus_deterministic(tmp_path):
    spec = small_spec()
    m1, _ = generate_synthetic_corpus(spec, tmp_path / "a")
    m2, _ = generate_synthetic_corpus(spec, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    files_a = sorted((tmp_path / "a" / "clips").iterdir())
    files_b = sorted((tmp_path / "b" / "clips").iterdir())
    assert [f.name for f in files_a] == [f.name for f in files_b]
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes()


def test_corpus_seed_matters(tmp_path):
    generate_synthetic_corpus(small_spec(seed=1), tmp_path / "a")
    generate_synthetic_corpus(small_spec(seed=2), tmp_path / "b")
    a = (tmp_path / "a" / "clips" / "class00_0000.wav").read_bytes()
    b = (tmp_path / "b" / "clips" / "class00_0000.wav").read_bytes()
    assert a != b


def test_corpus_manifest(tmp_path):
    spec = small_spec(n_classes=4, clips_per_class=30, clip_seconds=2.0)
    path, entries = generate_synthetic_corpus(spec, tmp_path)
    assert len(entries) == 4 * 30
    parsed = read_manifest(path)
    assert len(parsed) == len(entries)
    for orig, back in zip(entries, parsed):
        assert back.path == str((tmp_path / orig.path).resolve())
        assert (back.label, back.split, back.duration_s) == (orig.label, orig.split, orig.duration_s)
        if back.split != "pretrain":
            assert 0 <= back.label < 4
        else:
            assert back.label is None
    assert {e.split for e in parsed} == {"pretrain", "train", "test"}


def test_class0_fft_peak(tmp_path):
    # oracle: magnitude spectrum of a 1 s segment has 1 Hz resolution
    spec = small_spec(clip_seconds=3.0)
    generate_synthetic_corpus(spec, tmp_path)
    for i in range(spec.clips_per_class):
        clip = load_wav(tmp_path / "clips" / f"class00_{i:04d}.wav")
        for start in (0, 8000, 16000, 32000):
            seg = clip.samples[start:start + 16000]
            mag = np.abs(np.fft.rfft(seg))
            freqs = np.fft.rfftfreq(16000, 1 / 16000)
            assert abs(freqs[np.argmax(mag[1:]) + 1] - 200.0) <= 5.0


def test_corpus_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(n_classes=1)
    with pytest.raises(ValueError):
        CorpusSpec(clip_seconds=1.5)


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert read_manifest(tmp_path / "m.jsonl") == []


def test_manifest_train_without_label(tmp_path):
    write_wav(tmp_path / "a.wav", AudioClip(np.zeros(100), 100))
    (tmp_path / "m.jsonl").write_text(
        json.dumps({"path": "a.wav", "split": "pretrain", "duration_s": 1.0}) + "\n"
        + json.dumps({"path": "a.wav", "split": "train", "duration_s": 1.0}) + "\n")
    with pytest.raises(ParseError, match="line 2"):
        read_manifest(tmp_path / "m.jsonl")


def test_manifest_errors(tmp_path):
    write_wav(tmp_path / "a.wav", AudioClip(np.zeros(100), 100))
    cases = {
        "{not json": "line 1",
        json.dumps({"path": "a.wav", "split": "eval", "duration_s": 1.0, "label": 0}): "split",
        json.dumps({"path": "a.wav", "split": "test", "duration_s": 2.0, "label": 0}): "duration",
        json.dumps({"split": "test", "duration_s": 1.0, "label": 0}): "path",
    }
    for line, msg in cases.items():
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(ParseError, match=msg):
            read_manifest(tmp_path / "m.jsonl")
    (tmp_path / "m.jsonl").write_text(
        json.dumps({"path": "gone.wav", "split": "test", "duration_s": 1.0, "label": 0}) + "\n")
    with pytest.raises(MissingFile):
        read_manifest(tmp_path / "m.jsonl")


def test_manifest_write_read(tmp_path):
    write_wav(tmp_path / "a.wav", AudioClip(np.zeros(50), 100))
    entries = [ManifestEntry("a.wav", None, "pretrain", 0.5), ManifestEntry("a.wav", 2, "test", 0.5)]
    write_manifest(tmp_path / "m.jsonl", entries)
    back = read_manifest(tmp_path / "m.jsonl")
    assert [(e.label, e.split) for e in back] == [(None, "pretrain"), (2, "test")]
