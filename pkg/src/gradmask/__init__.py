"""Training classifiers with a masked input-gradient (GradMask) penalty."""

from .data import Dataset, Sample, SynthConfig, generate, read_dataset, write_dataset
from .loss import (PenaltyConfig, classification_loss, contrast_saliency, gradmask_loss, masked_penalty,
                   saliency_penalty, saliency_per_class)
from .metrics import RunResult, roc_auc, summarize_runs
from .model import Model, ModelConfig, forward, init_model
from .tensor import Tensor
from .trainer import SweepConfig, TrainConfig, sweep, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Model", "ModelConfig", "PenaltyConfig", "RunResult", "Sample", "SweepConfig", "SynthConfig",
    "Tensor", "TrainConfig", "classification_loss", "contrast_saliency", "forward", "generate", "gradmask_loss",
    "init_model", "masked_penalty", "read_dataset", "roc_auc", "saliency_penalty", "saliency_per_class",
    "summarize_runs", "sweep", "train", "write_dataset",
]
