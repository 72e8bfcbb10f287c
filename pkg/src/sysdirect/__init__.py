"""Detect system-directed speech with frame-based CNN/LSTM models and attention pooling."""

from .features import AudioClip, FeatureSequence, NormalizationStats, extract_log_mel
from .metrics import ScoredUtterance, det_curve, eer
from .models import VARIANTS, Model, ModelConfig, build, forward, load, save
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "FeatureSequence", "NormalizationStats", "extract_log_mel",
    "ScoredUtterance", "det_curve", "eer",
    "VARIANTS", "Model", "ModelConfig", "build", "forward", "load", "save",
    "TrainConfig", "train",
]
