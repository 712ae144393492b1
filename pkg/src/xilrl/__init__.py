"""Distributed PPO/DDPG training of an EGR-valve agent across MiL and HiL plant tiers."""

__version__ = "0.1.0"
