"""Trainers: PPO and DDPG over small tanh MLPs."""

from .ddpg import DdpgConfig, DdpgTrainer, ReplayBuffer, soft_update
from .ppo import PpoConfig, PpoTrainer, TrainingDivergenceError, gae, gae_advantages

__all__ = [
    "DdpgConfig",
    "DdpgTrainer",
    "PpoConfig",
    "PpoTrainer",
    "ReplayBuffer",
    "TrainingDivergenceError",
    "gae",
    "gae_advantages",
    "soft_update",
]
