"""PPO with clipped surrogate, fixed KL penalty, GAE and minibatch updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..agent import (
    INITIAL_LOG_STD,
    MlpParams,
    PolicySnapshot,
    gaussian_entropy,
    gaussian_log_prob,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from ..core import STATE_DIM
from .optim import make_optimizer


class TrainingDivergenceError(FloatingPointError):
    """Loss or parameters became non-finite during an update."""


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 1e-5
    gamma: float = 0.9
    clip: float = 0.2
    gae_lambda: float = 1.0
    kl_coeff: float = 0.2
    vf_coeff: float = 1.0
    experiences_per_cycle: int = 9200
    train_batch: int = 9200
    sgd_minibatch: int = 256
    sgd_steps: int = 32  # passes over the shuffled train batch
    policy_layers: int = 3
    policy_size: int = 16
    value_layers: int = 3
    value_size: int = 16
    initial_log_std: float = INITIAL_LOG_STD
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.sgd_minibatch > self.train_batch:
            raise ValueError("minibatch larger than train batch")

    @property
    def policy_sizes(self) -> tuple[int, ...]:
        return (STATE_DIM,) + (self.policy_size,) * self.policy_layers + (1,)

    @property
    def value_sizes(self) -> tuple[int, ...]:
        return (STATE_DIM,) + (self.value_size,) * self.value_layers + (1,)


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    next_values: np.ndarray,
    terminals: np.ndarray,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Generalized advantage estimates over concatenated episodes.

    Terminal steps bootstrap from 0 and cut the recursion.
    """
    n = len(rewards)
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * live * next_values[t] - values[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
    return adv


def value_of(critic: MlpParams, states: np.ndarray) -> np.ndarray:
    return mlp_forward(critic, states)[0][:, 0]


def gae_advantages(records: np.ndarray, critic: MlpParams, gamma: float, lam: float) -> np.ndarray:
    """GAE for packed experience records (one or more episodes)."""
    if len(records) == 0:
        raise ValueError("empty episode")
    states = records["state"].astype(np.float64)
    next_states = records["next_state"].astype(np.float64)
    return gae(
        records["reward"].astype(np.float64),
        value_of(critic, states),
        value_of(critic, next_states),
        records["terminal"].astype(bool),
        gamma,
        lam,
    )


@dataclass
class PpoBatch:
    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    old_log_probs: np.ndarray
    old_means: np.ndarray
    old_log_std: float

    def __len__(self):
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "PpoBatch":
        return PpoBatch(
            self.states[idx],
            self.actions[idx],
            self.advantages[idx],
            self.value_targets[idx],
            self.old_log_probs[idx],
            self.old_means[idx],
            self.old_log_std,
        )


@dataclass
class PpoGrads:
    actor: np.ndarray
    log_std: float
    critic: np.ndarray


def ppo_loss(
    batch: PpoBatch,
    actor: MlpParams,
    log_std: float,
    critic: MlpParams,
    config: PpoConfig,
) -> tuple[float, PpoGrads, dict]:
    """Clipped surrogate + KL penalty + value loss, with analytic gradients."""
    n = len(batch)
    eps, beta, c_vf = config.clip, config.kl_coeff, config.vf_coeff
    out, actor_cache = mlp_forward(actor, batch.states)
    mu = out[:, 0]
    logp = gaussian_log_prob(batch.actions, mu, log_std)
    ratio = np.exp(logp - batch.old_log_probs)
    adv = batch.advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    surrogate = np.minimum(unclipped_obj, clipped_obj)
    policy_loss = -surrogate.mean()

    var_new = math.exp(2.0 * log_std)
    var_old = math.exp(2.0 * batch.old_log_std)
    dmu_old = batch.old_means - mu
    kl = log_std - batch.old_log_std + (var_old + dmu_old**2) / (2.0 * var_new) - 0.5
    kl_mean = kl.mean()

    vout, critic_cache = mlp_forward(critic, batch.states)
    v = vout[:, 0]
    verr = v - batch.value_targets
    vf_loss = np.mean(verr**2)

    loss = policy_loss + beta * kl_mean + c_vf * vf_loss
    if not math.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite PPO loss {loss}")

    active = unclipped_obj <= clipped_obj
    dlogp = -np.where(active, adv * ratio, 0.0) / n
    z = (batch.actions - mu) / math.exp(log_std)
    dmu = dlogp * z / math.exp(log_std) + beta * (-dmu_old) / var_new / n
    dlog_std = float(np.sum(dlogp * (z * z - 1.0)) + beta * np.mean(1.0 - (var_old + dmu_old**2) / var_new))
    g_actor, _ = mlp_backward(actor, actor_cache, dmu[:, None])
    dv = (2.0 * c_vf / n) * verr
    g_critic, _ = mlp_backward(critic, critic_cache, dv[:, None])
    info = {
        "policy_loss": float(policy_loss),
        "vf_loss": float(vf_loss),
        "kl": float(kl_mean),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return float(loss), PpoGrads(g_actor, dlog_std, g_critic), info


class PpoTrainer:
    """Owns actor, log-std, critic and their optimizers."""

    algorithm = "PPO"

    def __init__(self, config: PpoConfig = PpoConfig(), seed: int = 0, actor: MlpParams | None = None, log_std: float | None = None):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.actor = actor if actor is not None else init_mlp(config.policy_sizes, self.rng)
        self.actor = self.actor.astype(np.float64)
        self.log_std = float(config.initial_log_std if log_std is None else log_std)
        self.critic = init_mlp(config.value_sizes, self.rng, final_scale=1.0)
        self._policy_opt = make_optimizer(config.optimizer, self.actor.flat.size + 1, config.learning_rate)
        self._critic_opt = make_optimizer(config.optimizer, self.critic.flat.size, config.learning_rate)

    @classmethod
    def from_snapshot(cls, snapshot: PolicySnapshot, config: PpoConfig = PpoConfig(), seed: int = 0) -> "PpoTrainer":
        return cls(config, seed, actor=snapshot.actor64(), log_std=snapshot.log_std)

    @property
    def entropy(self) -> float:
        return gaussian_entropy(self.log_std)

    def snapshot(self, training_cycle: int = 0) -> PolicySnapshot:
        """Current policy rounded to float32; the trainer adopts the rounded values."""
        snap = PolicySnapshot("PPO", self.actor, self.log_std, training_cycle)
        self.actor = snap.actor64()
        self.log_std = snap.log_std
        return snap

    def make_batch(self, records: np.ndarray) -> PpoBatch:
        cfg = self.config
        states = records["state"].astype(np.float64)
        actions = records["action"].astype(np.float64)
        values = value_of(self.critic, states)
        next_values = value_of(self.critic, records["next_state"].astype(np.float64))
        adv = gae(
            records["reward"].astype(np.float64),
            values,
            next_values,
            records["terminal"].astype(bool),
            cfg.gamma,
            cfg.gae_lambda,
        )
        targets = adv + values
        std = adv.std()
        norm_adv = (adv - adv.mean()) / (std + 1e-8)
        means = mlp_forward(self.actor, states)[0][:, 0]
        return PpoBatch(
            states=states,
            actions=actions,
            advantages=norm_adv,
            value_targets=targets,
            old_log_probs=gaussian_log_prob(actions, means, self.log_std),
            old_means=means,
            old_log_std=self.log_std,
        )

    def update(self, records: np.ndarray) -> dict:
        """One training cycle over ``records``; returns statistics."""
        cfg = self.config
        if len(records) == 0:
            return {"skipped": 1.0, "entropy": self.entropy}
        records = records[: cfg.train_batch]
        batch = self.make_batch(records)
        n = len(batch)
        mb = min(cfg.sgd_minibatch, n)
        n_mb = max(1, n // mb)
        stats = {"policy_loss": 0.0, "vf_loss": 0.0, "kl": 0.0, "clip_fraction": 0.0, "loss": 0.0}
        count = 0
        for _ in range(cfg.sgd_steps):
            perm = self.rng.permutation(n)
            for k in range(n_mb):
                sub = batch.take(perm[k * mb : (k + 1) * mb])
                loss, grads, info = ppo_loss(sub, self.actor, self.log_std, self.critic, cfg)
                policy_vec = np.concatenate([self.actor.flat, [self.log_std]])
                policy_vec = self._policy_opt.step(policy_vec, np.concatenate([grads.actor, [grads.log_std]]))
                critic_vec = self._critic_opt.step(self.critic.flat, grads.critic)
                if not (np.all(np.isfinite(policy_vec)) and np.all(np.isfinite(critic_vec))):
                    raise TrainingDivergenceError("non-finite parameters after PPO step")
                self.actor = self.actor.with_flat(policy_vec[:-1])
                self.log_std = float(policy_vec[-1])
                self.critic = self.critic.with_flat(critic_vec)
                stats["loss"] += loss
                for key, val in info.items():
                    stats[key] += val
                count += 1
        out = {k: v / count for k, v in stats.items()}
        out["entropy"] = self.entropy
        out["sgd_updates"] = float(count)
        return out
