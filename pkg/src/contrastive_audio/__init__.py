"""Contrastive self-supervised audio representation learning on log-mel
spectrograms, with a small numpy autodiff engine, linear-probe and finetune
transfer, and F1 / weighted-average-precision evaluation."""

from .augment import AugmentConfig, augment_for, make_pairs, strategy_config
from .dsp import MelConfig, StftConfig, log_mel, stft
from .estimators import ContrastivePretrainer, FinetuneClassifier, LinearProbeClassifier
from .metrics import MetricsReport, confusion_matrix, report
from .model import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .signal_io import AudioClip, CorpusSpec, generate_synthetic_corpus, load_wav, read_manifest
from .train import TrainConfig, evaluate, finetune, linear_probe, pretrain

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "AugmentConfig",
    "Checkpoint",
    "ContrastivePretrainer",
    "CorpusSpec",
    "FinetuneClassifier",
    "LinearProbeClassifier",
    "MelConfig",
    "MetricsReport",
    "ModelConfig",
    "StftConfig",
    "TrainConfig",
    "augment_for",
    "confusion_matrix",
    "evaluate",
    "finetune",
    "generate_synthetic_corpus",
    "linear_probe",
    "load_checkpoint",
    "load_wav",
    "log_mel",
    "make_pairs",
    "pretrain",
    "read_manifest",
    "report",
    "save_checkpoint",
    "stft",
    "strategy_config",
]
