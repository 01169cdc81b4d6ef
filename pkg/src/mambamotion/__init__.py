"""Selective state-space motion prediction for imitation learning, with baselines and evaluation."""

from .models import (BaselineConfig, LowPassFilter, MambaConfig, MambaModel, LSTMModel,
                     TransformerModel, build_model, load_checkpoint, save_checkpoint)
from .taskgen import TaskSpec, TrialLog, generate, make_dataset
from .trainer import TrainConfig, train

__all__ = [
    "BaselineConfig", "LowPassFilter", "MambaConfig", "MambaModel", "LSTMModel", "TransformerModel",
    "build_model", "load_checkpoint", "save_checkpoint", "TaskSpec", "TrialLog", "generate",
    "make_dataset", "TrainConfig", "train",
]
