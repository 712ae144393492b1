"""DDPG: replay buffer, deterministic actor, Q critic, soft target updates.

The critic sees the state concatenated with the squashed action
``tanh(a)``, so its inputs stay in [-1, 1] like the observations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..agent import MlpParams, PolicySnapshot, gaussian_entropy, init_mlp, mlp_backward, mlp_forward
from ..core import EXPERIENCE_DTYPE, STATE_DIM
from .optim import make_optimizer
from .ppo import TrainingDivergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DdpgConfig:
    actor_lr: float = 5e-5
    critic_lr: float = 1e-4
    gamma: float = 0.95
    tau: float = 0.03
    train_batch: int = 300
    replay_trainings: int = 150
    experiences_per_cycle: int = 9200
    exploration_std: float = 0.1  # pre-squash Gaussian noise
    replay_capacity: int = 100_000
    policy_layers: int = 3
    policy_size: int = 16
    critic_layers: int = 2
    critic_size: int = 80
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must be in [0, 1]")
        if self.replay_capacity < self.train_batch:
            raise ValueError("replay capacity smaller than train batch")

    @property
    def policy_sizes(self) -> tuple[int, ...]:
        return (STATE_DIM,) + (self.policy_size,) * self.policy_layers + (1,)

    @property
    def critic_sizes(self) -> tuple[int, ...]:
        return (STATE_DIM + 1,) + (self.critic_size,) * self.critic_layers + (1,)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of packed experience records."""

    def __init__(self, capacity: int = 100_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data = np.zeros(capacity, dtype=EXPERIENCE_DTYPE)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, records: np.ndarray) -> None:
        records = records[-self.capacity :]
        n = len(records)
        end = self._next + n
        if end <= self.capacity:
            self._data[self._next : end] = records
        else:
            split = self.capacity - self._next
            self._data[self._next :] = records[:split]
            self._data[: n - split] = records[split:]
        self._next = end % self.capacity
        self._size = min(self.capacity, self._size + n)

    def contents(self) -> np.ndarray:
        """Stored records, oldest first."""
        if self._size < self.capacity:
            return self._data[: self._size].copy()
        return np.concatenate([self._data[self._next :], self._data[: self._next]])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self._size, size=n, replace=False)
        return self._data[idx]


def soft_update(live: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    if live.sizes != target.sizes:
        raise ValueError("live and target networks differ in shape")
    if tau == 0.0:
        return target
    if tau == 1.0:
        return live
    # incremental form keeps live == target an exact fixed point
    return target.with_flat(target.flat + tau * (live.flat - target.flat))


def _critic_input(states: np.ndarray, raw_actions: np.ndarray) -> np.ndarray:
    return np.concatenate([states, np.tanh(raw_actions)[:, None]], axis=1)


def ddpg_targets(batch: np.ndarray, target_actor: MlpParams, target_critic: MlpParams, gamma: float) -> np.ndarray:
    """y = r + gamma * (1 - terminal) * Q'(s', mu'(s'))."""
    next_states = batch["next_state"].astype(np.float64)
    mu = mlp_forward(target_actor, next_states)[0][:, 0]
    q = mlp_forward(target_critic, _critic_input(next_states, mu))[0][:, 0]
    live = 1.0 - batch["terminal"].astype(np.float64)
    return batch["reward"].astype(np.float64) + gamma * live * q


def critic_loss(
    states: np.ndarray, actions: np.ndarray, targets: np.ndarray, critic: MlpParams
) -> tuple[float, np.ndarray]:
    q, cache = mlp_forward(critic, _critic_input(states, actions))
    err = q[:, 0] - targets
    loss = float(np.mean(err**2))
    grad, _ = mlp_backward(critic, cache, (2.0 / len(err)) * err[:, None])
    return loss, grad


def actor_loss(states: np.ndarray, actor: MlpParams, critic: MlpParams) -> tuple[float, np.ndarray]:
    """-mean Q(s, mu(s)); gradient w.r.t. actor parameters only."""
    mu, actor_cache = mlp_forward(actor, states)
    squashed = np.tanh(mu[:, 0])
    q, critic_cache = mlp_forward(critic, np.concatenate([states, squashed[:, None]], axis=1))
    n = len(states)
    _, dinput = mlp_backward(critic, critic_cache, np.full((n, 1), -1.0 / n))
    dmu = dinput[:, -1] * (1.0 - squashed**2)
    grad, _ = mlp_backward(actor, actor_cache, dmu[:, None])
    return float(-q.mean()), grad


class DdpgTrainer:
    algorithm = "DDPG"

    def __init__(self, config: DdpgConfig = DdpgConfig(), seed: int = 0, actor: MlpParams | None = None):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.actor = (actor if actor is not None else init_mlp(config.policy_sizes, self.rng)).astype(np.float64)
        self.critic = init_mlp(config.critic_sizes, self.rng, final_scale=1.0)
        self.target_actor = self.actor
        self.target_critic = self.critic
        self.replay = ReplayBuffer(config.replay_capacity)
        self.log_std = math.log(config.exploration_std)
        self._actor_opt = make_optimizer(config.optimizer, self.actor.flat.size, config.actor_lr)
        self._critic_opt = make_optimizer(config.optimizer, self.critic.flat.size, config.critic_lr)

    @classmethod
    def from_snapshot(cls, snapshot: PolicySnapshot, config: DdpgConfig = DdpgConfig(), seed: int = 0) -> "DdpgTrainer":
        return cls(config, seed, actor=snapshot.actor64())

    @property
    def entropy(self) -> float:
        return gaussian_entropy(self.log_std)

    def snapshot(self, training_cycle: int = 0) -> PolicySnapshot:
        snap = PolicySnapshot("DDPG", self.actor, self.log_std, training_cycle)
        self.actor = snap.actor64()
        return snap

    def update(self, records: np.ndarray) -> dict:
        cfg = self.config
        self.replay.push(records)
        if len(self.replay) < cfg.train_batch:
            log.warning("replay buffer holds %d < %d experiences; skipping update", len(self.replay), cfg.train_batch)
            return {"skipped": 1.0, "entropy": self.entropy}
        c_sum = a_sum = 0.0
        for _ in range(cfg.replay_trainings):
            batch = self.replay.sample(cfg.train_batch, self.rng)
            states = batch["state"].astype(np.float64)
            actions = batch["action"].astype(np.float64)
            y = ddpg_targets(batch, self.target_actor, self.target_critic, cfg.gamma)
            c_loss, c_grad = critic_loss(states, actions, y, self.critic)
            self.critic = self.critic.with_flat(self._critic_opt.step(self.critic.flat, c_grad))
            a_loss, a_grad = actor_loss(states, self.actor, self.critic)
            self.actor = self.actor.with_flat(self._actor_opt.step(self.actor.flat, a_grad))
            if not (math.isfinite(c_loss) and math.isfinite(a_loss)):
                raise TrainingDivergenceError("non-finite DDPG loss")
            if not (np.all(np.isfinite(self.actor.flat)) and np.all(np.isfinite(self.critic.flat))):
                raise TrainingDivergenceError("non-finite parameters after DDPG step")
            self.target_actor = soft_update(self.actor, self.target_actor, cfg.tau)
            self.target_critic = soft_update(self.critic, self.target_critic, cfg.tau)
            c_sum += c_loss
            a_sum += a_loss
        n = cfg.replay_trainings
        return {
            "critic_loss": c_sum / max(n, 1),
            "actor_loss": a_sum / max(n, 1),
            "entropy": self.entropy,
            "replay_size": float(len(self.replay)),
        }
