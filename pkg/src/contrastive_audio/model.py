"""Contrastive network: conv encoder, tanh projection head, bilinear score,
in-batch cross-entropy loss and a linear classifier head.

Parameters live as plain numpy arrays in :class:`ModelParams`; each forward
pass wraps them in fresh autodiff tensors, so one graph is built per step.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .exceptions import (
    BatchTooSmall,
    CorruptCheckpoint,
    NotSquare,
    ShapeMismatch,
    VersionMismatch,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Checkpoint",
    "init_params",
    "reset_classifier",
    "with_n_classes",
    "standardize",
    "encoder_forward",
    "project",
    "bilinear_similarity",
    "contrastive_loss",
    "classifier_forward",
    "pretrain_loss",
    "embed",
    "save_checkpoint",
    "load_checkpoint",
    "ENCODER",
    "PROJECTION",
    "BILINEAR",
    "CLASSIFIER",
]

STANDARDIZE_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture. ``channels`` gives one [conv3x3, relu, 2x2 mean-pool] block per entry."""

    input_frames: int = 96
    input_mels: int = 64
    channels: tuple = (8, 16, 32, 64)
    kernel: int = 3
    pool: int = 2
    proj_dim: int = 64
    n_classes: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a nonempty tuple of positive ints")
        if self.proj_dim < 1:
            raise ValueError("proj_dim must be >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        h, w = self.input_frames, self.input_mels
        for _ in self.channels:
            h, w = (h - self.kernel + 1) // self.pool, (w - self.kernel + 1) // self.pool
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_frames}x{self.input_mels} too small for "
                                 f"{len(self.channels)} encoder blocks")

    @property
    def h_dim(self):
        return self.channels[-1]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def param_shapes(self):
        shapes = {}
        c_in = 1
        for i, c in enumerate(self.channels):
            shapes[f"enc{i}.w"] = (c, c_in, self.kernel, self.kernel)
            shapes[f"enc{i}.b"] = (c,)
            c_in = c
        shapes["proj.w"] = (self.h_dim, self.proj_dim)
        shapes["proj.b"] = (self.proj_dim,)
        shapes["bilinear.W"] = (self.proj_dim, self.proj_dim)
        shapes["clf.w"] = (self.h_dim, self.n_classes)
        shapes["clf.b"] = (self.n_classes,)
        return shapes


def _group(prefix_test):
    def names(cfg):
        return [n for n in cfg.param_shapes() if prefix_test(n)]
    return names


ENCODER = _group(lambda n: n.startswith("enc"))
PROJECTION = _group(lambda n: n.startswith("proj."))
BILINEAR = _group(lambda n: n == "bilinear.W")
CLASSIFIER = _group(lambda n: n.startswith("clf."))


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def names(self):
        return list(self.arrays)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, trainable=()):
        """Wrap every array in a tensor; names in ``trainable`` require grad."""
        trainable = set(trainable)
        return {k: ad.Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.arrays.items()}

    def check(self):
        for name, shape in self.config.param_shapes().items():
            if name not in self.arrays:
                raise ShapeMismatch(f"missing parameter {name}")
            if self.arrays[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {self.arrays[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise ValueError(f"{name} contains non-finite values")


def init_params(config, rng):
    """He-uniform convs, fan-in uniform projection; bilinear W, classifier and biases zero.

    ``W = 0`` makes every similarity score 0, so the first contrastive loss is
    exactly ``ln(B)``.
    """
    dtype = np.dtype(config.dtype)
    arrays = {}
    for name, shape in config.param_shapes().items():
        if name.startswith("enc") and name.endswith(".w"):
            bound = math.sqrt(6.0 / int(np.prod(shape[1:])))
            arrays[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        elif name == "proj.w":
            bound = math.sqrt(3.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(config, arrays)


def reset_classifier(params):
    for name in CLASSIFIER(params.config):
        params[name] = np.zeros_like(params[name])


def with_n_classes(params, n_classes):
    """Copy of ``params`` with a zeroed classifier head sized for ``n_classes``."""
    config = replace(params.config, n_classes=int(n_classes))
    out = ModelParams(config, {k: v.copy() for k, v in params.arrays.items()})
    dtype = np.dtype(config.dtype)
    shapes = config.param_shapes()
    for name in CLASSIFIER(config):
        out[name] = np.zeros(shapes[name], dtype=dtype)
    return out


# --------------------------------------------------------------------- forward


def standardize(mels, dtype=np.float64):
    """Per-example zero mean / unit variance over each (frames, mels) map."""
    x = np.asarray(mels, dtype=np.float64)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    return ((x - mean) / (std + STANDARDIZE_EPS)).astype(dtype)


def encoder_forward(mels, p, config):
    """``h = f(x)``: (B, frames, mels) -> (B, h_dim).

    ``mels`` may be a raw array (standardized here) or an already-prepared
    tensor; ``p`` maps parameter names to tensors.
    """
    if not isinstance(mels, ad.Tensor):
        mels = np.asarray(mels)
        if mels.ndim != 3 or mels.shape[1:] != (config.input_frames, config.input_mels):
            raise ShapeMismatch(f"encoder input {mels.shape}, expected (B, {config.input_frames}, "
                                f"{config.input_mels})")
        mels = ad.Tensor(standardize(mels, np.dtype(config.dtype)))
    x = ad.reshape(mels, (mels.shape[0], 1) + mels.shape[1:])
    for i in range(len(config.channels)):
        x = ad.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"])
        x = ad.avg_pool2d(ad.relu(x), config.pool)
    return ad.global_mean_pool(x)


def project(h, w, b):
    """``z = tanh(h Wg + bg)``."""
    if h.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"project: H {h.shape} vs weights {w.shape}")
    return ad.tanh(ad.add(ad.matmul(h, w), b))


def bilinear_similarity(z, z_prime, w):
    """``S[i, j] = z_i^T W z'_j`` for all pairs, shape (B, B)."""
    z, z_prime, w = (ad._as_tensor(t) for t in (z, z_prime, w))
    if z.ndim != 2 or z.shape != z_prime.shape or w.shape != (z.shape[1], z.shape[1]):
        raise ShapeMismatch(f"bilinear_similarity: Z {z.shape}, Z' {z_prime.shape}, W {w.shape}")
    return ad.matmul(ad.matmul(z, w), ad.transpose(z_prime))


def contrastive_loss(s):
    """Mean over rows of the cross-entropy of row ``i`` against target column ``i``."""
    s = ad._as_tensor(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise NotSquare(f"similarity matrix must be square, got {s.shape}")
    if s.shape[0] < 2:
        raise BatchTooSmall(f"contrastive loss needs B >= 2, got {s.shape[0]}")
    return ad.scalar_mean(ad.softmax_cross_entropy(s, np.arange(s.shape[0])))


def classifier_forward(h, w, b):
    if h.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"classifier: H {h.shape} vs weights {w.shape}")
    return ad.add(ad.matmul(h, w), b)


def pretrain_loss(anchors, positives, p, config):
    """Contrastive loss of one pair batch. Anchor and positive share the encoder."""
    b = anchors.shape[0]
    h = encoder_forward(np.concatenate([anchors, positives]), p, config)
    z = project(h, p["proj.w"], p["proj.b"])
    z_a, z_p = _rows(z, 0, b), _rows(z, b, 2 * b)
    return contrastive_loss(bilinear_similarity(z_a, z_p, p["bilinear.W"]))


def _rows(t, start, stop):
    """Row slice as a differentiable op (needed to split the shared forward)."""
    def back(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)
    return ad._node(t.data[start:stop], (t,), back)


def embed(mels, params, layer="h", batch_size=64):
    """Inference-only embeddings (no graph kept)."""
    cfg = params.config
    p = params.tensors()
    out = []
    for i in range(0, len(mels), batch_size):
        h = encoder_forward(np.asarray(mels[i:i + batch_size]), p, cfg)
        if layer == "z":
            h = project(h, p["proj.w"], p["proj.b"])
        elif layer != "h":
            raise ValueError(f"layer must be 'h' or 'z', got {layer!r}")
        out.append(h.data)
    return np.concatenate(out) if out else np.zeros((0, cfg.h_dim if layer == "h" else cfg.proj_dim))


# ------------------------------------------------------------------ checkpoint

_MAGIC = b"ACLC"
_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    augment: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)

    @property
    def config(self):
        return self.params.config


def _sidecar(path):
    return Path(str(path) + ".json")


def save_checkpoint(ckpt, path):
    """Binary ACLC tensors at ``path`` plus a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(ckpt.params.arrays))]
    for name, arr in ckpt.params.arrays.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = {
        "format": "ACLC",
        "version": _VERSION,
        "model_config": ckpt.config.to_dict(),
        "augment_config": ckpt.augment,
        "metadata": ckpt.metadata,
        "tensors": {k: list(v.shape) for k, v in ckpt.params.arrays.items()},
    }
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic (not an ACLC checkpoint)")
    version, count = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, reader supports version {_VERSION}")
    pos = 12
    arrays = {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CorruptCheckpoint(f"{path}: truncated at byte {pos} (needed {n} more)")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    try:
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    except UnicodeDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: bad tensor name ({exc})") from None
    if pos != len(raw):
        raise CorruptCheckpoint(f"{path}: {len(raw) - pos} trailing bytes")

    side_path = _sidecar(path)
    try:
        side = json.loads(side_path.read_text())
        config = ModelConfig.from_dict(side["model_config"])
    except FileNotFoundError:
        raise CorruptCheckpoint(f"{side_path}: sidecar missing") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{side_path}: unreadable sidecar ({exc})") from None
    if side.get("version") != version:
        raise VersionMismatch(f"{side_path}: sidecar version {side.get('version')}, binary version {version}")
    expected = config.param_shapes()
    if set(expected) != set(arrays):
        raise CorruptCheckpoint(f"{path}: tensor names {sorted(arrays)} do not match config")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CorruptCheckpoint(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
    if config.dtype == "float64":
        arrays = {k: v.astype(np.float64) for k, v in arrays.items()}
    return Checkpoint(ModelParams(config, arrays), side.get("augment_config", {}), side.get("metadata", {}))
