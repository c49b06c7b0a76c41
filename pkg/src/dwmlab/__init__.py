"""Diffusion world models for offline RL, at desk scale."""

from .agents import AgentConfig, train_offline_agent
from .dataset import OfflineDataset, load_dataset, make_dataset, save_dataset
from .dwm import DiffusionWorldModel, DwmConfig, sample_dwm, train_dwm
from .onestep import OneStepConfig, OneStepModel, train_onestep

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "DiffusionWorldModel",
    "DwmConfig",
    "OfflineDataset",
    "OneStepConfig",
    "OneStepModel",
    "load_dataset",
    "make_dataset",
    "sample_dwm",
    "save_dataset",
    "train_dwm",
    "train_offline_agent",
    "train_onestep",
]
