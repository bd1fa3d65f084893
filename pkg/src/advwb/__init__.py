"""Adversarial-robustness workbench: a small numpy CNN stack with soft
attention, l-inf PGD attacks, Grad-CAM and robustness curves."""

from .attacks import AttackConfig, EpsilonSchedule, attack_sweep, fgsm, pgd_linf
from .data_io import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .kernels import BACKEND
from .model import ModelConfig, build_model, load_model, predict, save_model
from .tensor import PrngState, Tensor, backward
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "BACKEND",
    "Dataset",
    "EpsilonSchedule",
    "ModelConfig",
    "PrngState",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "attack_sweep",
    "backward",
    "build_model",
    "fgsm",
    "generate_synthetic",
    "load_dataset",
    "load_model",
    "pgd_linf",
    "predict",
    "save_dataset",
    "save_model",
    "train",
]
