"""Clustering-guided contrastive fusion for multi-view representation learning."""

from .autodiff import ContractError, DomainError, Rng, Tensor
from .data import CorruptionSpec, MultiViewDataset, synth_gaussian_multiview
from .losses import LossBreakdown, LossConfig
from .model import CloVenModel, ModelConfig
from .train import RunRecord, TrainConfig, multi_seed, train_one

__version__ = "0.1.0"

__all__ = [
    "CloVenModel",
    "ContractError",
    "CorruptionSpec",
    "DomainError",
    "LossBreakdown",
    "LossConfig",
    "ModelConfig",
    "MultiViewDataset",
    "Rng",
    "RunRecord",
    "Tensor",
    "TrainConfig",
    "multi_seed",
    "synth_gaussian_multiview",
    "train_one",
]
