"""Synthetic inputs shared by the unit and acceptance suites."""

from __future__ import annotations

import math

import numpy as np

from xilrl.agent import gaussian_log_prob, init_mlp, mlp_forward
from xilrl.algo.ddpg import actor_loss, critic_loss
from xilrl.algo.ppo import PpoBatch, PpoConfig, ppo_loss
from xilrl.core import EXPERIENCE_DTYPE, STATE_DIM


def synthetic_records(rng, n, episode_len=50):
    """Random but well-formed experience records, terminal at each episode end."""
    rec = np.zeros(n, dtype=EXPERIENCE_DTYPE)
    rec["state"] = rng.uniform(-1, 1, size=(n, STATE_DIM))
    rec["next_state"] = np.clip(rec["state"] + rng.normal(0, 0.05, size=(n, STATE_DIM)), -1, 1)
    rec["action"] = rng.normal(0, 0.5, size=n)
    rec["components"] = np.abs(rng.normal(0, 0.1, size=(n, rec["components"].shape[1])))
    rec["reward"] = -rec["components"].sum(axis=1)
    rec["terminal"][episode_len - 1 :: episode_len] = 1
    if n:
        rec["terminal"][-1] = 1
    return rec


def ppo_fixture(rng, n=12, hidden=3, state_dim=4, kink_margin=1e-2):
    """Small random PPO problem. Returns (batch, actor, log_std, critic, config).

    Draws are rejected while any probability ratio sits within ``kink_margin``
    of a clip boundary, where the surrogate has no derivative to check.
    """
    while True:
        fixture = _draw_ppo_fixture(rng, n, hidden, state_dim)
        batch, actor, log_std, _, config = fixture
        means = mlp_forward(actor, batch.states)[0][:, 0]
        ratio = np.exp(gaussian_log_prob(batch.actions, means, log_std) - batch.old_log_probs)
        edges = np.abs(ratio[:, None] - np.array([1.0 - config.clip, 1.0 + config.clip]))
        if edges.min() >= kink_margin:
            return fixture


def _draw_ppo_fixture(rng, n, hidden, state_dim):
    actor = init_mlp((state_dim, hidden, 1), rng, final_scale=1.0)
    critic = init_mlp((state_dim, hidden, 1), rng, final_scale=1.0)
    log_std = float(rng.uniform(-1.5, 0.0))
    states = rng.uniform(-1, 1, size=(n, state_dim))
    old_means = rng.normal(0, 0.3, size=n)
    old_log_std = float(rng.uniform(-1.5, 0.0))
    actions = old_means + math.exp(old_log_std) * rng.normal(size=n)
    old_logp = -0.5 * ((actions - old_means) / math.exp(old_log_std)) ** 2 - old_log_std - 0.5 * math.log(2 * math.pi)
    batch = PpoBatch(
        states=states,
        actions=actions,
        advantages=rng.normal(size=n),
        value_targets=rng.normal(size=n),
        old_log_probs=old_logp,
        old_means=old_means,
        old_log_std=old_log_std,
    )
    config = PpoConfig(train_batch=n, sgd_minibatch=n)
    return batch, actor, log_std, critic, config


def ppo_loss_of(flat, batch, actor, critic, config):
    """Total PPO loss as a function of [actor, log_std, critic] stacked flat."""
    na = actor.flat.size
    a = actor.with_flat(flat[:na])
    c = critic.with_flat(flat[na + 1 :])
    return ppo_loss(batch, a, float(flat[na]), c, config)[0]


def ppo_flat(actor, log_std, critic, grads=None):
    if grads is not None:
        return np.concatenate([grads.actor, [grads.log_std], grads.critic])
    return np.concatenate([actor.flat, [log_std], critic.flat])


def ddpg_fixture(rng, n=10, hidden=4, state_dim=4):
    """(states, actions, targets, actor, critic) for the DDPG losses."""
    actor = init_mlp((state_dim, hidden, 1), rng, final_scale=1.0)
    critic = init_mlp((state_dim + 1, hidden, 1), rng, final_scale=1.0)
    states = rng.uniform(-1, 1, size=(n, state_dim))
    actions = rng.normal(0, 0.7, size=n)
    targets = rng.normal(size=n)
    return states, actions, targets, actor, critic


def ddpg_gradients(rng, central_difference):
    """Analytic and numeric gradients for critic and actor losses of one fixture."""
    states, actions, targets, actor, critic = ddpg_fixture(rng)
    _, g_c = critic_loss(states, actions, targets, critic)
    num_c = central_difference(lambda f: critic_loss(states, actions, targets, critic.with_flat(f))[0], critic.flat)
    _, g_a = actor_loss(states, actor, critic)
    num_a = central_difference(lambda f: actor_loss(states, actor.with_flat(f), critic)[0], actor.flat)
    return (g_c, num_c), (g_a, num_a)


def framed(kind, payload, magic=b"XRL1"):
    """A frame built by hand from the wire layout, with a correct CRC."""
    import struct
    import zlib

    body = struct.pack("<BI", kind, len(payload)) + payload
    return magic + body + struct.pack("<I", zlib.crc32(body))


def fuzz_frames(rng, n, seeds):
    """``n`` hostile byte strings: noise, bit-flipped frames and CRC-valid garbage payloads."""
    out = []
    for i in range(n):
        mode = i % 3
        if mode == 0:
            out.append(rng.bytes(int(rng.integers(0, 64))))
        elif mode == 1:
            base = bytearray(seeds[int(rng.integers(len(seeds)))])
            for _ in range(int(rng.integers(1, 4))):
                base[int(rng.integers(len(base)))] ^= 1 << int(rng.integers(8))
            cut = int(rng.integers(0, len(base) + 1)) if rng.random() < 0.2 else len(base)
            out.append(bytes(base[:cut]))
        else:
            kind = int(rng.integers(0, 10))
            out.append(framed(kind, rng.bytes(int(rng.integers(0, 200)))))
    return out
