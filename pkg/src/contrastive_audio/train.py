"""Self-supervised pretraining and the two transfer modes (frozen-encoder
linear probe, full finetune), plus clip-level evaluation.

Every random draw comes from a generator seeded by ``(seed, purpose, index)``,
so a run is a pure function of its inputs and seed; ``threads > 1`` only
changes how pair batches are scheduled, not their content.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .augment import AugmentConfig, make_pairs, rir_filter, time_freq_mask, time_stretch
from .exceptions import ConfigError, InsufficientData, MissingLabels, NonFiniteLoss, SampleRateMismatch
from .metrics import confusion_matrix, report
from .model import (
    BILINEAR,
    CLASSIFIER,
    ENCODER,
    PROJECTION,
    Checkpoint,
    ModelConfig,
    classifier_forward,
    embed,
    encoder_forward,
    init_params,
    pretrain_loss,
    reset_classifier,
    save_checkpoint,
)
from .optim import Adam
from .signal_io import AudioClip, load_wav

__all__ = [
    "TrainConfig",
    "load_split",
    "pretrain",
    "pretrain_clips",
    "linear_probe",
    "finetune",
    "fit_downstream",
    "clip_logits",
    "evaluate",
    "evaluate_clips",
    "random_checkpoint",
]

logger = logging.getLogger(__name__)

_INIT, _PAIRS, _DOWNSTREAM, _PERTURB = 0, 1, 2, 3

MODES = ("pretrain", "probe", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    mode: str = "pretrain"
    batch_size: int = 16
    steps: int = 2000
    epochs: int = 40
    lr: float = 1e-3
    downstream_lr: float = 1e-3
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    threads: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "pretrain" and self.batch_size < 2:
            raise ConfigError(f"pretraining needs batch_size >= 2, got {self.batch_size}")
        if self.batch_size < 1 or self.steps < 0 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1; steps and epochs must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("seed", "mode", "batch_size", "steps", "epochs",
                                            "lr", "downstream_lr", "threads", "checkpoint_every")}
        d["augment"] = self.augment.to_dict()
        return d


def _rng(seed, purpose, index=0):
    return np.random.default_rng([int(seed), purpose, int(index)])


def load_split(entries, split, sample_rate=16000):
    """Load the clips of one split; labels are returned only for labeled splits."""
    chosen = [e for e in entries if e.split == split]
    clips = [load_wav(e.path) for e in chosen]
    for e, clip in zip(chosen, clips):
        if clip.sample_rate != sample_rate:
            raise SampleRateMismatch(f"{e.path}: {clip.sample_rate} Hz, expected {sample_rate} Hz")
    if split == "pretrain":
        return clips, None
    return clips, np.array([e.label for e in chosen], dtype=np.int64)


# ------------------------------------------------------------------ pretraining


def _pair_batch(clips, cfg, mel_cfg, step):
    rng = _rng(cfg.seed, _PAIRS, step)
    idx = rng.choice(len(clips), size=cfg.batch_size, replace=False)
    return make_pairs([clips[i] for i in idx], cfg.augment, rng, mel_cfg)


def _batches(clips, cfg, mel_cfg, start):
    if cfg.threads == 1:
        for step in range(start, cfg.steps):
            yield _pair_batch(clips, cfg, mel_cfg, step)
        return
    # bounded look-ahead: at most 2 * threads batches in flight
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        window = 2 * cfg.threads
        pending = [pool.submit(_pair_batch, clips, cfg, mel_cfg, s)
                   for s in range(start, min(cfg.steps, start + window))]
        for step in range(start, cfg.steps):
            batch = pending.pop(0).result()
            nxt = step + window
            if nxt < cfg.steps:
                pending.append(pool.submit(_pair_batch, clips, cfg, mel_cfg, nxt))
            yield batch


def pretrain_clips(clips, cfg, model_config=None, mel_cfg=dsp.MelConfig(), log_path=None,
                   checkpoint_path=None, on_step=None):
    """Contrastive pretraining on unlabeled clips. Returns a :class:`Checkpoint`.

    ``ckpt.history`` holds ``{step, loss, wall_ms}`` per step; the loss logged
    at step ``k`` is computed before update ``k`` is applied.
    """
    model_config = model_config or ModelConfig(input_frames=mel_cfg.n_frames, input_mels=mel_cfg.n_mels)
    if len(clips) < cfg.batch_size:
        raise InsufficientData(f"{len(clips)} pretraining clips; batch size {cfg.batch_size} needs at least that many")
    params = init_params(model_config, _rng(cfg.seed, _INIT))
    trainable = ENCODER(model_config) + PROJECTION(model_config) + BILINEAR(model_config)
    opt = Adam(cfg.lr)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    meta = {"mode": "pretrain", "seed": cfg.seed, "strategy": cfg.augment.strategy,
            "batch_size": cfg.batch_size}
    try:
        for step, batch in enumerate(_batches(clips, cfg, mel_cfg, 0)):
            t0 = time.perf_counter()
            tensors = params.tensors(trainable)
            loss = pretrain_loss(batch.anchors, batch.positives, tensors, model_config)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"step {step}: loss is {value}")
            grads = ad.backward(loss)
            opt.step(params.arrays, {t.name: g for t, g in grads.items()})
            record = {"step": step, "loss": value, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if on_step:
                on_step(record)
            if step % 100 == 0:
                logger.info("pretrain step %d loss %.4f", step, value)
            if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(Checkpoint(params, cfg.augment.to_dict(), {**meta, "step": step + 1}),
                                checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    ckpt = Checkpoint(params, cfg.augment.to_dict(), {**meta, "step": cfg.steps})
    ckpt.history = history
    return ckpt


def pretrain(entries, cfg, model_config=None, **kwargs):
    """Pretrain on the ``pretrain`` split of a manifest (labels are never read)."""
    clips, _ = load_split(entries, "pretrain")
    return pretrain_clips(clips, cfg, model_config, **kwargs)


def random_checkpoint(model_config, seed):
    """Non-pretrained model with the same initialization scheme as pretraining."""
    return Checkpoint(init_params(model_config, _rng(seed, _INIT)), {}, {"mode": "random", "seed": seed})


# ------------------------------------------------------------------- downstream


def _segment_len(mel_cfg):
    return mel_cfg.sample_rate  # 1 s


def _random_segment_mels(clips, rng, mel_cfg):
    seg = _segment_len(mel_cfg)
    out = []
    for clip in clips:
        if len(clip) < seg:
            raise InsufficientData(f"clip of {clip.duration_s:.3f}s is shorter than one segment")
        start = int(rng.integers(0, len(clip) - seg + 1))
        out.append(dsp.log_mel(clip.samples[start:start + seg], mel_cfg))
    return np.stack(out)


def _check_labels(labels, n_classes, what):
    if labels is None or len(labels) == 0:
        raise MissingLabels(f"no labeled {what} clips")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise MissingLabels(f"{what} labels outside [0, {n_classes})")


def fit_downstream(params, clips, labels, cfg, finetune=False, mel_cfg=dsp.MelConfig()):
    """Train a freshly zeroed classifier head on clean 1 s segments.

    With ``finetune=False`` only the head is updated and the encoder runs
    without a graph; the frozen tensors are verified bit-identical afterwards.
    With ``finetune=True`` encoder and head are trained jointly (the
    projection head and bilinear matrix are not on the downstream path).
    Returns a new :class:`ModelParams`; ``params`` is not modified.
    """
    model_config = params.config
    labels = np.asarray(labels, dtype=np.int64) if labels is not None else None
    _check_labels(labels, model_config.n_classes, "training")
    params = params.copy()
    reset_classifier(params)
    frozen = {k: v.copy() for k, v in params.arrays.items() if k not in CLASSIFIER(model_config)}
    trainable = CLASSIFIER(model_config) + (ENCODER(model_config) if finetune else [])
    opt = Adam(cfg.downstream_lr)
    for epoch in range(cfg.epochs):
        rng = _rng(cfg.seed, _DOWNSTREAM, epoch)
        mels = _random_segment_mels(clips, rng, mel_cfg)
        order = rng.permutation(len(clips))
        if not finetune:
            feats = embed(mels, params)
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            tensors = params.tensors(trainable)
            if finetune:
                h = encoder_forward(mels[idx], tensors, model_config)
            else:
                h = ad.Tensor(feats[idx])
            logits = classifier_forward(h, tensors["clf.w"], tensors["clf.b"])
            loss = ad.scalar_mean(ad.softmax_cross_entropy(logits, labels[idx]))
            if not math.isfinite(loss.item()):
                raise NonFiniteLoss(f"epoch {epoch}: downstream loss is {loss.item()}")
            grads = ad.backward(loss)
            opt.step(params.arrays, {t.name: g for t, g in grads.items()})
    if not finetune:
        for k, v in frozen.items():
            if not np.array_equal(v, params[k]) or v.dtype != params[k].dtype:
                raise RuntimeError(f"frozen tensor {k} changed during linear probing")
    return params


def _downstream(checkpoint, entries, cfg, finetune):
    clips, labels = load_split(entries, "train")
    _check_labels(labels, checkpoint.config.n_classes, "train")
    params = fit_downstream(checkpoint.params, clips, labels, cfg, finetune=finetune)
    meta = {**checkpoint.metadata, "mode": "finetune" if finetune else "probe",
            "downstream_seed": cfg.seed, "epochs": cfg.epochs,
            "pretrain_mode": checkpoint.metadata.get("mode")}
    return Checkpoint(params, checkpoint.augment, meta)


def linear_probe(checkpoint, entries, cfg):
    """Frozen encoder + linear classifier trained on the ``train`` split."""
    return _downstream(checkpoint, entries, cfg, finetune=False)


def finetune(checkpoint, entries, cfg):
    """Encoder and a fresh classifier trained jointly on the ``train`` split."""
    return _downstream(checkpoint, entries, cfg, finetune=True)


# ------------------------------------------------------------------- evaluation


def _perturb_clip(clip, augment, rng, mel_cfg):
    """Segment mels of a test clip under the positive-branch augmentations."""
    if augment.time_stretch:
        clip = time_stretch(clip, rng, augment.stretch_factor, augment.stretch_prob)
    seg = _segment_len(mel_cfg)
    mels = []
    for start in dsp.segment_starts(len(clip), seg):
        segment = AudioClip(clip.samples[start:start + seg], clip.sample_rate)
        if augment.rir:
            segment = rir_filter(segment, augment.rir_bank[int(rng.integers(len(augment.rir_bank)))])
        mel = dsp.log_mel(segment.samples, mel_cfg)
        if augment.mask:
            mel = time_freq_mask(mel, augment.mask_t_max, augment.mask_f_max, rng)
        mels.append(mel)
    return mels


def clip_logits(params, clips, perturb=None, perturb_seed=0, mel_cfg=dsp.MelConfig()):
    """Clip-level logits: mean of segment logits over all non-overlapping 1 s segments."""
    seg = _segment_len(mel_cfg)
    out = []
    for i, clip in enumerate(clips):
        if perturb is not None:
            mels = _perturb_clip(clip, perturb, _rng(perturb_seed, _PERTURB, i), mel_cfg)
        else:
            mels = [dsp.log_mel(clip.samples[s:s + seg], mel_cfg) for s in dsp.segment_starts(len(clip), seg)]
        if not mels:
            raise InsufficientData(f"test clip {i} is shorter than one segment")
        feats = embed(np.stack(mels), params)
        logits = feats @ params["clf.w"].astype(np.float64) + params["clf.b"]
        out.append(logits.mean(axis=0))
    return np.stack(out)


def evaluate_clips(params, clips, labels, perturb=None, perturb_seed=0):
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, params.config.n_classes, "test")
    logits = clip_logits(params, clips, perturb, perturb_seed)
    # argmax ties resolve to the lowest class index
    preds = np.argmax(logits, axis=1)
    cm = confusion_matrix(preds, labels, params.config.n_classes)
    return report(cm), cm


def evaluate(checkpoint, entries, perturb=None, perturb_seed=0):
    """Metrics on the ``test`` split. Returns ``(MetricsReport, confusion counts)``."""
    clips, labels = load_split(entries, "test")
    if labels is None or len(labels) == 0:
        raise MissingLabels("manifest has no labeled test clips")
    return evaluate_clips(checkpoint.params, clips, labels, perturb, perturb_seed)


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)


def write_history(path, history):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in history))
