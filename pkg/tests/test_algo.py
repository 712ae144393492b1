import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixtures import ddpg_gradients, ppo_fixture, ppo_flat, ppo_loss_of, synthetic_records
from oracles import central_difference, gae_oracle, gaussian_kl_oracle, max_relative_error, returns_to_go_oracle
from xilrl.agent import MlpParams, init_mlp
from xilrl.algo import (
    DdpgConfig,
    DdpgTrainer,
    PpoConfig,
    PpoTrainer,
    ReplayBuffer,
    TrainingDivergenceError,
    gae,
    gae_advantages,
    soft_update,
)
from xilrl.algo.ddpg import critic_loss, ddpg_targets
from xilrl.algo.ppo import PpoBatch, ppo_loss
from xilrl.core import EXPERIENCE_DTYPE, STATE_DIM


class TestConfigs:
    def test_ppo_invariants(self):
        with pytest.raises(ValueError):
            PpoConfig(gamma=0.0)
        with pytest.raises(ValueError):
            PpoConfig(clip=0.0)
        with pytest.raises(ValueError):
            PpoConfig(train_batch=100, sgd_minibatch=256)

    def test_ddpg_invariants(self):
        with pytest.raises(ValueError):
            DdpgConfig(tau=1.5)
        with pytest.raises(ValueError):
            DdpgConfig(replay_capacity=100, train_batch=300)

    def test_network_shapes(self):
        assert PpoConfig().policy_sizes == (STATE_DIM, 16, 16, 16, 1)
        assert DdpgConfig().critic_sizes == (STATE_DIM + 1, 80, 80, 1)


class TestGae:
    def test_single_step(self):
        assert gae(np.array([1.5]), np.zeros(1), np.zeros(1), np.array([True]), 0.9, 1.0)[0] == 1.5

    def test_zero_critic_lambda_one_is_returns(self, rng):
        r = rng.normal(size=40)
        term = np.zeros(40, bool)
        term[-1] = True
        np.testing.assert_allclose(gae(r, np.zeros(40), np.zeros(40), term, 0.9, 1.0), returns_to_go_oracle(r, 0.9), atol=1e-12)

    def test_hand_unrolled(self):
        # deltas 0.86, 1.87, 2.7; gamma*lambda = 0.72
        adv = gae(np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.4, 0.3]), np.array([0.4, 0.3, 0.2]), np.array([False, False, True]), 0.9, 0.8)
        np.testing.assert_allclose(adv, [3.60608, 3.814, 2.7], atol=1e-12)

    @given(st.integers(1, 40), st.floats(0.1, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
    def test_matches_oracle(self, n, gamma, lam, seed):
        r = np.random.default_rng(seed)
        rewards, values, nxt = r.normal(size=(3, n))
        term = r.random(n) < 0.2
        np.testing.assert_allclose(gae(rewards, values, nxt, term, gamma, lam), gae_oracle(rewards, values, nxt, term, gamma, lam), atol=1e-9)

    def test_terminal_cuts_recursion(self):
        adv = gae(np.array([1.0, 100.0]), np.zeros(2), np.zeros(2), np.array([True, True]), 0.9, 1.0)
        assert adv[0] == 1.0

    def test_records_empty(self):
        with pytest.raises(ValueError):
            gae_advantages(np.zeros(0, dtype=EXPERIENCE_DTYPE), init_mlp((STATE_DIM, 1), np.random.default_rng(0)), 0.9, 1.0)


def one_sample_batch(ratio, adv):
    return PpoBatch(
        states=np.zeros((1, 2)),
        actions=np.array([0.0]),
        advantages=np.array([adv]),
        value_targets=np.zeros(1),
        old_log_probs=np.array([-math.log(ratio) - 0.5 * math.log(2 * math.pi)]),
        old_means=np.zeros(1),
        old_log_std=0.0,
    )


ZERO_ACTOR = MlpParams((2, 1), np.zeros(3))


class TestPpoLoss:
    def test_on_policy_first_step(self, rng):
        batch, actor, log_std, critic, cfg = ppo_fixture(rng)
        means = np.tanh(batch.states @ actor.weights[0] + actor.biases[0]) @ actor.weights[1] + actor.biases[1]
        z = (batch.actions - means[:, 0]) / math.exp(log_std)
        batch.old_log_probs = -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)
        cfg = PpoConfig(kl_coeff=0.0, vf_coeff=0.0, train_batch=12, sgd_minibatch=12)
        loss, _, _ = ppo_loss(batch, actor, log_std, critic, cfg)
        assert loss == pytest.approx(-batch.advantages.mean(), abs=1e-12)

    def test_clip_positive_advantage(self):
        cfg = PpoConfig(kl_coeff=0.0, vf_coeff=0.0)
        _, _, info = ppo_loss(one_sample_batch(2.0, 3.0), ZERO_ACTOR, 0.0, ZERO_ACTOR, cfg)
        assert info["policy_loss"] == pytest.approx(-1.2 * 3.0)
        assert info["clip_fraction"] == 1.0

    def test_clip_negative_advantage_is_pessimistic(self):
        cfg = PpoConfig(kl_coeff=0.0, vf_coeff=0.0)
        # min(2 * -3, 1.2 * -3) keeps the unclipped term
        _, _, info = ppo_loss(one_sample_batch(2.0, -3.0), ZERO_ACTOR, 0.0, ZERO_ACTOR, cfg)
        assert info["policy_loss"] == pytest.approx(6.0)

    def test_kl_term(self, rng):
        batch, actor, log_std, critic, cfg = ppo_fixture(rng)
        _, _, info = ppo_loss(batch, actor, log_std, critic, cfg)
        means = [float((np.tanh(s @ actor.weights[0] + actor.biases[0]) @ actor.weights[1] + actor.biases[1])[0]) for s in batch.states]
        expected = np.mean([gaussian_kl_oracle(m0, batch.old_log_std, m1, log_std) for m0, m1 in zip(batch.old_means, means)])
        assert info["kl"] == pytest.approx(expected, rel=1e-10)

    def test_five_parameter_gradients(self, rng):
        # actor (2, 1, 1) has exactly 5 parameters
        batch, _, log_std, critic, cfg = ppo_fixture(rng, state_dim=2, hidden=1)
        actor = init_mlp((2, 1, 1), rng, final_scale=1.0)
        assert actor.flat.size == 5
        _, grads, _ = ppo_loss(batch, actor, log_std, critic, cfg)
        num = central_difference(lambda f: ppo_loss_of(f, batch, actor, critic, cfg), ppo_flat(actor, log_std, critic))
        assert max_relative_error(ppo_flat(None, None, None, grads), num) < 1e-4

    @given(st.integers(0, 2**32 - 1))
    def test_random_fixture_gradients(self, seed):
        r = np.random.default_rng(seed)
        batch, actor, log_std, critic, cfg = ppo_fixture(r)
        _, grads, _ = ppo_loss(batch, actor, log_std, critic, cfg)
        num = central_difference(lambda f: ppo_loss_of(f, batch, actor, critic, cfg), ppo_flat(actor, log_std, critic))
        assert max_relative_error(ppo_flat(None, None, None, grads), num) < 1e-4

    def test_non_finite_loss(self, rng):
        batch, actor, log_std, critic, cfg = ppo_fixture(rng)
        batch.value_targets[0] = np.inf
        with pytest.raises(TrainingDivergenceError):
            ppo_loss(batch, actor, log_std, critic, cfg)


SMALL_PPO = PpoConfig(train_batch=512, experiences_per_cycle=512, sgd_minibatch=256, sgd_steps=32)


class TestPpoTrainer:
    def test_zero_learning_rate_is_identity(self, rng):
        trainer = PpoTrainer(PpoConfig(learning_rate=0.0, train_batch=512, sgd_minibatch=256, sgd_steps=2), seed=1)
        before = (trainer.actor, trainer.log_std, trainer.critic)
        trainer.update(synthetic_records(rng, 512))
        assert (trainer.actor, trainer.log_std, trainer.critic) == before

    def test_deterministic(self, rng):
        records = synthetic_records(rng, 512)
        a, b = PpoTrainer(SMALL_PPO, seed=4), PpoTrainer(SMALL_PPO, seed=4)
        a.update(records)
        b.update(records)
        assert a.actor == b.actor and a.critic == b.critic and a.log_std == b.log_std

    def test_loss_decreases_on_frozen_batch(self, rng):
        records = synthetic_records(rng, 512)
        trainer = PpoTrainer(SMALL_PPO, seed=2)
        batch = trainer.make_batch(records)
        before = ppo_loss(batch, trainer.actor, trainer.log_std, trainer.critic, SMALL_PPO)[0]
        stats = trainer.update(records)
        after = ppo_loss(batch, trainer.actor, trainer.log_std, trainer.critic, SMALL_PPO)[0]
        assert after <= before
        assert stats["sgd_updates"] == 32 * 2

    def test_advantages_normalized(self, rng):
        batch = PpoTrainer(SMALL_PPO, seed=0).make_batch(synthetic_records(rng, 512))
        assert abs(batch.advantages.mean()) < 1e-10
        assert batch.advantages.std() == pytest.approx(1.0, rel=1e-6)

    def test_initial_entropy(self):
        assert PpoTrainer().entropy == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 0.25))

    def test_snapshot_adopts_float32(self):
        trainer = PpoTrainer(seed=3)
        snap = trainer.snapshot(7)
        assert trainer.actor == snap.actor64() and snap.training_cycle == 7

    def test_empty_cycle_skipped(self):
        assert PpoTrainer().update(np.zeros(0, dtype=EXPERIENCE_DTYPE))["skipped"] == 1.0


def linear(sizes, flat):
    return MlpParams(sizes, np.asarray(flat, dtype=np.float64))


def records_of(rewards, terminals):
    rec = np.zeros(len(rewards), dtype=EXPERIENCE_DTYPE)
    rec["reward"] = rewards
    rec["terminal"] = terminals
    return rec


class TestDdpg:
    def test_terminal_target_is_reward(self, rng):
        actor = init_mlp((STATE_DIM, 8, 1), rng, final_scale=1.0)
        critic = init_mlp((STATE_DIM + 1, 8, 1), rng, final_scale=1.0)
        y = ddpg_targets(records_of([-0.7], [1]), actor, critic, 0.95)
        assert y[0] == pytest.approx(-0.7)

    def test_zero_targets(self):
        actor = linear((STATE_DIM, 1), np.zeros(STATE_DIM + 1))
        critic = linear((STATE_DIM + 1, 1), np.zeros(STATE_DIM + 2))
        y = ddpg_targets(records_of([0.25, -1.0], [0, 0]), actor, critic, 0.95)
        np.testing.assert_allclose(y, [0.25, -1.0], atol=1e-7)

    def test_two_sample_hand_values(self):
        # mu'(s') = 0.5 everywhere; Q'(s', a) = tanh(a) + 2
        actor = linear((STATE_DIM, 1), [0.0] * STATE_DIM + [0.5])
        critic = linear((STATE_DIM + 1, 1), [0.0] * STATE_DIM + [1.0, 2.0])
        y = ddpg_targets(records_of([1.0, -0.5], [0, 1]), actor, critic, 0.95)
        np.testing.assert_allclose(y, [1.0 + 0.95 * (2.0 + math.tanh(0.5)), -0.5], rtol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    def test_gradients(self, seed):
        (gc, nc), (ga, na) = ddpg_gradients(np.random.default_rng(seed), central_difference)
        assert max_relative_error(gc, nc) < 1e-4
        assert max_relative_error(ga, na) < 1e-4

    def test_frozen_networks(self, rng):
        cfg = DdpgConfig(actor_lr=0.0, critic_lr=0.0, tau=0.0, replay_trainings=3)
        t = DdpgTrainer(cfg, seed=0)
        before = (t.actor, t.critic, t.target_actor, t.target_critic)
        t.update(synthetic_records(rng, 400))
        assert (t.actor, t.critic, t.target_actor, t.target_critic) == before

    def test_full_copy_with_tau_one(self, rng):
        t = DdpgTrainer(DdpgConfig(tau=1.0, replay_trainings=1), seed=0)
        t.update(synthetic_records(rng, 400))
        assert t.target_actor == t.actor and t.target_critic == t.critic

    def test_underfull_replay_skips(self, rng, caplog):
        t = DdpgTrainer(seed=0)
        before = t.actor
        stats = t.update(synthetic_records(rng, 100))
        assert stats["skipped"] == 1.0 and t.actor == before
        assert "skipping" in caplog.text

    def test_critic_loss_decreases(self, rng):
        t = DdpgTrainer(DdpgConfig(tau=0.0), seed=5)
        records = synthetic_records(rng, 3000)
        states = records["state"].astype(np.float64)
        actions = records["action"].astype(np.float64)
        y = ddpg_targets(records, t.target_actor, t.target_critic, 0.95)
        before = critic_loss(states, actions, y, t.critic)[0]
        t.update(records)  # 150 trainings, targets frozen by tau = 0
        after = critic_loss(states, actions, y, t.critic)[0]
        assert after < before

    def test_exploration_std(self):
        assert math.exp(DdpgTrainer().snapshot().log_std) == pytest.approx(0.1, rel=1e-6)


class TestSoftUpdate:
    def test_scalar(self):
        out = soft_update(linear((1, 1), [1.0, 1.0]), linear((1, 1), [0.0, 0.0]), 0.03)
        np.testing.assert_allclose(out.flat, [0.03, 0.03])

    def test_fixed_point(self, rng):
        net = init_mlp((3, 4, 1), rng)
        assert soft_update(net, net, 0.03) == net

    def test_zero_tau(self, rng):
        live, target = init_mlp((3, 4, 1), rng), init_mlp((3, 4, 1), rng)
        assert soft_update(live, target, 0.0) == target

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            soft_update(init_mlp((3, 4, 1), rng), init_mlp((3, 5, 1), rng), 0.5)


class TestReplay:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(5)
        buf.push(records_of(np.arange(3.0), [0] * 3))
        buf.push(records_of(np.arange(3.0, 7.0), [0] * 4))
        assert len(buf) == 5
        np.testing.assert_array_equal(buf.contents()["reward"], [2, 3, 4, 5, 6])

    def test_oversized_push(self):
        buf = ReplayBuffer(4)
        buf.push(records_of(np.arange(10.0), [0] * 10))
        np.testing.assert_array_equal(buf.contents()["reward"], [6, 7, 8, 9])

    def test_sample_without_replacement(self, rng):
        buf = ReplayBuffer(50)
        buf.push(records_of(np.arange(50.0), [0] * 50))
        s = buf.sample(50, rng)["reward"]
        assert sorted(s) == list(range(50))

    def test_capacity(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)

    @given(st.lists(st.integers(0, 30), max_size=12), st.integers(1, 40))
    def test_matches_list_model(self, pushes, capacity):
        buf, model, k = ReplayBuffer(capacity), [], 0
        for n in pushes:
            vals = np.arange(k, k + n, dtype=np.float64)
            k += n
            buf.push(records_of(vals, [0] * n))
            model = (model + list(vals))[-capacity:]
        np.testing.assert_array_equal(buf.contents()["reward"], model)
