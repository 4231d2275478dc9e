"""scikit-learn style wrappers around pretraining and the two transfer modes.

``X`` is a sequence of clips: :class:`AudioClip` objects or 1-D sample arrays
at ``sample_rate``. Labels may be any hashable values; they are encoded to
``0..n_classes-1`` in sorted order like sklearn classifiers do.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import dsp
from .augment import augment_for
from .exceptions import ClipTooShort, ConfigError, LengthMismatch, MissingLabels
from .metrics import confusion_matrix, report
from .model import Checkpoint, ModelConfig, embed, load_checkpoint, with_n_classes
from .signal_io import AudioClip
from .train import TrainConfig, clip_logits, fit_downstream, pretrain_clips

__all__ = ["ContrastivePretrainer", "LinearProbeClassifier", "FinetuneClassifier", "check_clips", "check_labels"]


def check_clips(X, sample_rate=16000, min_seconds=1.0):
    """Validate ``X`` and return a list of mono :class:`AudioClip`."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    if isinstance(X, (AudioClip, np.ndarray)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of clips (AudioClip or 1-D arrays)")
    if len(X) == 0:
        raise ValueError("X is empty")
    clips = []
    for i, x in enumerate(X):
        if not isinstance(x, AudioClip):
            arr = np.asarray(x, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"clip {i}: expected 1-D samples, got shape {arr.shape}")
            x = AudioClip(arr, sample_rate)
        if x.sample_rate != sample_rate:
            raise ValueError(f"clip {i}: sample rate {x.sample_rate}, expected {sample_rate}")
        if x.duration_s < min_seconds:
            raise ClipTooShort(f"clip {i}: {x.duration_s:.3f}s is shorter than {min_seconds}s")
        clips.append(x)
    return clips


def check_labels(y, n_samples):
    """Encode ``y`` to integer codes. Returns ``(classes, codes)``."""
    if y is None:
        raise MissingLabels("y is required")
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise LengthMismatch(f"{n_samples} clips vs {len(y)} labels")
    classes, codes = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return classes, codes.astype(np.int64)


def _mel_config(sample_rate):
    return dsp.MelConfig(dsp.StftConfig(sample_rate=sample_rate))


class ContrastivePretrainer(TransformerMixin, BaseEstimator):
    """Contrastive pretraining on unlabeled clips; ``transform`` gives clip embeddings.

    The embedding of a clip is the mean encoder output ``h`` over its
    non-overlapping 1 s segments.
    """

    def __init__(self, strategy="stretch+mask", batch_size=16, steps=2000, lr=1e-3, seed=0,
                 channels=(8, 16, 32, 64), proj_dim=64, rir_dir=None, threads=1, sample_rate=16000):
        self.strategy = strategy
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.seed = seed
        self.channels = channels
        self.proj_dim = proj_dim
        self.rir_dir = rir_dir
        self.threads = threads
        self.sample_rate = sample_rate

    def fit(self, X, y=None):
        # y is accepted for pipeline compatibility and never read
        clips = check_clips(X, self.sample_rate, min_seconds=2.0)
        augment = augment_for(self.strategy, self.rir_dir, self.seed, self.sample_rate)
        cfg = TrainConfig(seed=self.seed, batch_size=self.batch_size, steps=self.steps, lr=self.lr,
                          augment=augment, threads=self.threads)
        mel_cfg = _mel_config(self.sample_rate)
        model_config = ModelConfig(channels=tuple(self.channels), proj_dim=self.proj_dim)
        self.checkpoint_ = pretrain_clips(clips, cfg, model_config, mel_cfg)
        self.history_ = [r["loss"] for r in self.checkpoint_.history]
        return self

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        return _clip_embeddings(self.checkpoint_.params, check_clips(X, self.sample_rate),
                                _mel_config(self.sample_rate))


def _clip_embeddings(params, clips, mel_cfg):
    seg = mel_cfg.sample_rate
    out = []
    for clip in clips:
        mels = [dsp.log_mel(clip.samples[s:s + seg], mel_cfg) for s in dsp.segment_starts(len(clip), seg)]
        out.append(embed(np.stack(mels), params).mean(axis=0))
    return np.stack(out).astype(np.float64)


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear classifier on a frozen encoder.

    ``checkpoint`` is a :class:`Checkpoint`, a path to one, or a
    :class:`ContrastivePretrainer`. An unfitted pretrainer is cloned and fitted
    on the (unlabeled) training clips first, stored as ``pretrainer_``.
    """

    _finetune = False

    def __init__(self, checkpoint=None, epochs=40, lr=1e-3, batch_size=16, seed=0, sample_rate=16000):
        self.checkpoint = checkpoint
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.sample_rate = sample_rate

    def _base_checkpoint(self, clips):
        ckpt = self.checkpoint
        if isinstance(ckpt, ContrastivePretrainer):
            if not hasattr(ckpt, "checkpoint_"):
                self.pretrainer_ = clone(ckpt).fit(clips)
                ckpt = self.pretrainer_
            ckpt = ckpt.checkpoint_
        elif isinstance(ckpt, (str, Path)):
            ckpt = load_checkpoint(ckpt)
        if not isinstance(ckpt, Checkpoint):
            raise ConfigError("checkpoint must be a Checkpoint, a checkpoint path or a ContrastivePretrainer")
        return ckpt

    def fit(self, X, y):
        clips = check_clips(X, self.sample_rate)
        self.classes_, codes = check_labels(y, len(clips))
        base = with_n_classes(self._base_checkpoint(clips).params, len(self.classes_))
        cfg = TrainConfig(seed=self.seed, mode="finetune" if self._finetune else "probe",
                          epochs=self.epochs, downstream_lr=self.lr, batch_size=self.batch_size)
        self.params_ = fit_downstream(base, clips, codes, cfg, finetune=self._finetune,
                                      mel_cfg=_mel_config(self.sample_rate))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return clip_logits(self.params_, check_clips(X, self.sample_rate), mel_cfg=_mel_config(self.sample_rate))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        # ties resolve to the lowest class index
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def report(self, X, y):
        """:class:`MetricsReport` and confusion counts on labeled clips."""
        y = np.asarray(y)
        labels = np.minimum(np.searchsorted(self.classes_, y), len(self.classes_) - 1)
        if not np.array_equal(self.classes_[labels], y):
            raise ValueError("y contains labels not seen during fit")
        preds = np.searchsorted(self.classes_, self.predict(X))
        cm = confusion_matrix(preds, labels, len(self.classes_))
        return report(cm), cm


class FinetuneClassifier(LinearProbeClassifier):
    """Encoder and a fresh linear head trained jointly."""

    _finetune = True
