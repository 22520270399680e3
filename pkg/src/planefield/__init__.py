"""Dynamic scene reconstruction with six-plane factorized 4D feature fields.

Everything runs on NumPy/SciPy with a small reverse-mode differentiation
engine (:mod:`planefield.diffgraph`).
"""

from ._validation import (CheckpointError, ContractViolation, DatasetError, NotFittedError,
                          NumericFault)
from .data import CameraModel, Dataset, MaskedFrame, SynthSpec, load_dataset, save_dataset, synth_scene
from .estimator import PlaneFieldEstimator
from .field import PlaneField
from .metrics import evaluate, psnr, ssim
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "CheckpointError", "ContractViolation", "Dataset", "DatasetError",
    "MaskedFrame", "NotFittedError", "NumericFault", "PlaneField", "PlaneFieldEstimator",
    "SynthSpec", "TrainConfig", "Trainer", "evaluate", "load_checkpoint", "load_dataset",
    "psnr", "save_checkpoint", "save_dataset", "ssim", "synth_scene",
]
