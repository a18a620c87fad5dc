import logging
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from robust_mapf.grid_env import Action, EnvConfig
from robust_mapf.policy_net import PolicyOutput, init_params
from robust_mapf.ppo_core import (
    TRAINING_SEED_BASE,
    Minibatch,
    PPOConfig,
    TrainingLog,
    UpdateHooks,
    compute_gae,
    iteration_seed,
    make_optimizer,
    ppo_loss,
    ppo_update,
    rollout,
    train_ppo,
)

_log = logging.getLogger(__name__)


def gae_oracle(rewards, values, dones, gamma, lam):
    """Direct double sum of discounted TD errors within the episode."""
    n = len(rewards)
    advantages = np.zeros(n)
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            next_value = 0.0 if dones[k] or k + 1 == n else values[k + 1]
            delta = rewards[k] + gamma * next_value - values[k]
            total += weight * delta
            if dones[k]:
                break
            weight *= gamma * lam
        advantages[t] = total
    return advantages


class TestComputeGae:
    def test_gae_whenSingleTerminalStep_thenAdvantageIsReward(self):
        # Act
        adv, ret = compute_gae([1.0], [0.0], [True], 0.95, 0.95)

        # Assert
        assert adv.tolist() == [1.0]
        assert ret.tolist() == [1.0]

    def test_gae_whenLambdaZero_thenTdError(self):
        # Arrange
        rewards = np.array([0.1, -0.2, 0.3, 1.0])
        values = np.array([0.5, 0.4, 0.2, 0.7])
        dones = np.array([False, False, False, True])

        # Act
        adv, _ = compute_gae(rewards, values, dones, 0.9, 0.0)

        # Assert
        next_values = np.array([0.4, 0.2, 0.7, 0.0])
        assert adv == pytest.approx(rewards + 0.9 * next_values - values)

    def test_gae_whenLengthMismatch_thenRaisesValueError(self):
        with pytest.raises(ValueError, match="length mismatch"):
            compute_gae([1.0, 0.0], [0.0], [True, False], 0.95, 0.95)


@pytest.mark.parametrize("seed", range(12))
def test_gae_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 11))
    rewards = rng.normal(size=n)
    values = rng.normal(size=n)
    dones = rng.random(n) < 0.25
    gamma, lam = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 1.0))

    adv, ret = compute_gae(rewards, values, dones, gamma, lam)

    assert adv == pytest.approx(gae_oracle(rewards, values, dones, gamma, lam), abs=1e-6)
    assert ret == pytest.approx(adv + values)


class TestPPOConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"gamma": 0.0}, {"gae_lambda": 1.5}, {"clip": 0.0}, {"epochs": 0}, {"lr": -1.0}, {"episodes_per_batch": 0}],
    )
    def test_config_whenInvalid_thenRaisesValueError(self, kwargs):
        with pytest.raises(ValueError):
            PPOConfig(**kwargs)

    def test_config_whenBetasList_thenStoredAsTuple(self):
        assert PPOConfig(adam_betas=[0.8, 0.9]).adam_betas == (0.8, 0.9)


class TestRollout:
    def test_rollout_whenSameSeed_thenIdenticalBatch(self, net, small_env):
        # Act
        a = rollout(net, small_env, seed=3, episodes=2)
        b = rollout(net, small_env, seed=3, episodes=2)

        # Assert
        assert torch.equal(a.obs, b.obs)
        assert torch.equal(a.actions, b.actions)
        assert torch.equal(a.advantages, b.advantages)
        assert a.env_steps == b.env_steps

    def test_rollout_whenZeroEpisodes_thenEmptyBatch(self, net, small_env):
        batch = rollout(net, small_env, seed=0, episodes=0)
        assert len(batch) == 0
        assert batch.obs.shape == (0, 3, 5, 5)
        assert batch.clean_success == 0.0

    def test_rollout_whenParallelJobs_thenSameAsSequential(self, net, small_env):
        # Act
        sequential = rollout(net, small_env, seed=5, episodes=3, jobs=1)
        parallel = rollout(net, small_env, seed=5, episodes=3, jobs=3)

        # Assert
        assert torch.equal(sequential.obs, parallel.obs)
        assert torch.equal(sequential.log_probs, parallel.log_probs)
        assert sequential.episode_success == parallel.episode_success

    def test_rollout_whenEpisodesRun_thenShapesAligned(self, net, small_env):
        # Act
        batch = rollout(net, small_env, seed=1, episodes=2)

        # Assert
        n = len(batch)
        assert n > 0
        for tensor in (batch.log_probs, batch.values, batch.rewards, batch.advantages, batch.returns):
            assert tensor.shape == (n,)
        assert batch.env_steps <= 2 * small_env.horizon
        assert torch.all(batch.log_probs <= 0)
        assert len(batch.episode_success) == 2

    def test_rollout_whenConfidentPolicyOnEmptyMap_thenOnlyWaits(self, confident_net):
        # Arrange
        env = EnvConfig(side=6, density=0.0, num_agents=1, horizon=5)

        # Act
        batch = rollout(confident_net, env, seed=0, episodes=1, greedy=True)

        # Assert
        assert batch.actions.tolist() == [0] * 5
        assert batch.rewards.tolist() == pytest.approx([-0.01] * 5)
        assert batch.episode_success == [0.0]


def test_iteration_seed_is_deterministic_and_distinct():
    assert iteration_seed(42, 0) == iteration_seed(42, 0)
    assert iteration_seed(42, 0) != iteration_seed(42, 1)
    assert TRAINING_SEED_BASE == 2**32


def make_minibatch(net, obs, actions, advantages, returns=None, log_ratio=0.0):
    with torch.no_grad():
        log_probs = net(obs).log_probs.gather(1, actions.unsqueeze(1)).squeeze(1)
    returns = torch.zeros(len(actions)) if returns is None else returns
    return Minibatch(obs, actions, log_probs - log_ratio, advantages, returns)


class TestPPOLoss:
    def test_loss_whenPolicyUnchanged_thenSurrogateZero(self, net):
        # Arrange
        obs = torch.rand(6, 3, 5, 5, generator=torch.Generator().manual_seed(0))
        minibatch = make_minibatch(net, obs, torch.arange(6) % 5, torch.linspace(-1, 1, 6))

        # Act
        _, diag = ppo_loss(net, minibatch, PPOConfig())

        # Assert
        assert diag["policy_loss"] == pytest.approx(0.0, abs=1e-6)
        assert diag["approx_kl"] == pytest.approx(0.0, abs=1e-6)
        assert diag["clip_fraction"] == 0.0

    def test_loss_whenAdvantagesEqual_thenSurrogateZero(self, net):
        # Arrange
        obs = torch.rand(4, 3, 5, 5, generator=torch.Generator().manual_seed(1))
        minibatch = make_minibatch(net, obs, torch.zeros(4, dtype=torch.int64), torch.full((4,), 2.5), log_ratio=-0.1)

        # Act
        _, diag = ppo_loss(net, minibatch, PPOConfig())

        # Assert
        assert diag["policy_loss"] == pytest.approx(0.0, abs=1e-6)

    def test_loss_whenRatioAboveClip_thenNoPolicyGradient(self, net):
        # Arrange: ratio 1.5 with positive advantage sits on the clipped branch
        obs = torch.rand(1, 3, 5, 5, generator=torch.Generator().manual_seed(2))
        minibatch = make_minibatch(net, obs, torch.tensor([3]), torch.tensor([1.0]), log_ratio=math.log(1.5))
        cfg = PPOConfig(normalize_advantages=False, value_coef=0.0, entropy_coef=0.0)

        # Act
        loss, diag = ppo_loss(net, minibatch, cfg)
        loss.backward()

        # Assert
        assert diag["clip_fraction"] == 1.0
        assert float(loss) == pytest.approx(-1.2, rel=1e-5)
        assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in net.parameters())

    def test_loss_whenEmpty_thenRaisesValueError(self, net):
        minibatch = Minibatch(
            torch.zeros(0, 3, 5, 5), torch.zeros(0, dtype=torch.int64),
            torch.zeros(0), torch.zeros(0), torch.zeros(0),
        )
        with pytest.raises(ValueError, match="empty"):
            ppo_loss(net, minibatch, PPOConfig())


class RecordingHooks(UpdateHooks):
    def __init__(self):
        self.prepared = 0
        self.iterations = []

    def begin_iteration(self, iteration, progress):
        self.iterations.append((iteration, progress))
        return {"kappa": 0.5, "marker": 1.0}

    def prepare(self, minibatch):
        self.prepared += 1
        return minibatch

    def regularizer(self, net, minibatch):
        return torch.zeros(()), {"extra": 0.0}


class TestPPOUpdate:
    def test_update_whenRun_thenCallsHooksPerMinibatch(self, net, small_env):
        # Arrange
        cfg = PPOConfig(epochs=2, minibatches=3, episodes_per_batch=2)
        batch = rollout(net, small_env, seed=0, episodes=2, cfg=cfg)
        hooks = RecordingHooks()

        # Act
        diag = ppo_update(net, make_optimizer(net, cfg), batch, cfg, np.random.default_rng(0), hooks)

        # Assert
        assert hooks.prepared == 6
        assert {"loss", "policy_loss", "value_loss", "entropy", "extra"} <= set(diag)

    def test_update_whenEmptyBatch_thenNoDiagnostics(self, net, small_env):
        cfg = PPOConfig()
        batch = rollout(net, small_env, seed=0, episodes=0)
        assert ppo_update(net, make_optimizer(net, cfg), batch, cfg, np.random.default_rng(0)) == {}


class TestTrainPPO:
    def test_train_whenIterations_thenOneRecordEach(self, small_env, tmp_path):
        # Arrange
        cfg = PPOConfig(episodes_per_batch=2, epochs=1, minibatches=2)
        log = TrainingLog(tmp_path / "train_log.jsonl")
        hooks = RecordingHooks()
        seen = []

        # Act
        records = train_ppo(
            init_params(0), small_env, cfg, seed=1, iterations=3, hooks=hooks, log=log,
            on_iteration=lambda i, _net, record: seen.append(i),
        )

        # Assert
        assert [r["iter"] for r in records] == [0, 1, 2]
        assert seen == [0, 1, 2]
        assert hooks.iterations == [(0, 0.0), (1, pytest.approx(1 / 3)), (2, pytest.approx(2 / 3))]
        assert all(r["kappa"] == 0.5 and r["marker"] == 1.0 for r in records)
        assert TrainingLog.read(tmp_path / "train_log.jsonl") == records
        assert records[-1]["env_steps"] > records[0]["env_steps"]

    def test_train_whenSameSeed_thenIdenticalParameters(self, small_env):
        # Arrange
        cfg = PPOConfig(episodes_per_batch=2, epochs=1, minibatches=2)
        a, b = init_params(0), init_params(0)

        # Act
        train_ppo(a, small_env, cfg, seed=9, iterations=2)
        train_ppo(b, small_env, cfg, seed=9, iterations=2)

        # Assert
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_train_whenStepBudget_thenStopsAfterBudget(self, net, small_env):
        cfg = PPOConfig(episodes_per_batch=1, epochs=1, minibatches=1)
        records = train_ppo(net, small_env, cfg, seed=0, env_step_budget=20)
        assert records[-1]["env_steps"] >= 20
        assert len(records) == 1 or records[-2]["env_steps"] < 20

    @pytest.mark.parametrize("kwargs", [{}, {"iterations": 2, "env_step_budget": 10}])
    def test_train_whenBudgetAmbiguous_thenRaisesValueError(self, net, small_env, kwargs):
        with pytest.raises(ValueError, match="exactly one"):
            train_ppo(net, small_env, PPOConfig(), seed=0, **kwargs)

    def test_train_whenBatchCollectsNoSteps_thenBudgetedRunRaises(self, net, small_env, monkeypatch):
        # Arrange
        import robust_mapf.ppo_core as ppo_core

        empty = rollout(net, small_env, seed=0, episodes=0)
        monkeypatch.setattr(ppo_core, "rollout", lambda *args, **kwargs: empty)

        # Act / Assert
        with pytest.raises(RuntimeError, match="no environment steps"):
            train_ppo(net, small_env, PPOConfig(episodes_per_batch=1), seed=0, env_step_budget=10)


class GoalSeekingNet(nn.Module):
    """One-hot policy stepping towards the goal-hint cell, rows first."""

    def forward(self, obs):
        hint = obs[:, 2].flatten(start_dim=1).argmax(dim=1)
        dr, dc = hint // 5 - 2, hint % 5 - 2
        action = torch.full_like(hint, int(Action.WAIT))
        action[dc > 0] = int(Action.RIGHT)
        action[dc < 0] = int(Action.LEFT)
        action[dr > 0] = int(Action.DOWN)
        action[dr < 0] = int(Action.UP)
        return PolicyOutput(F.one_hot(action, 5).float() * 20.0, obs.new_zeros(obs.shape[0]))


def test_rollout_of_goal_seeking_policy_walks_straight_to_goal():
    # Arrange
    env = EnvConfig(side=8, density=0.0, num_agents=1, horizon=64)

    # Act
    batch = rollout(GoalSeekingNet(), env, seed=0, episodes=5, greedy=True)

    # Assert
    assert batch.episode_success == [1.0] * 5
    assert int(Action.WAIT) not in batch.actions.tolist()
    assert batch.env_steps == len(batch)
    assert int(batch.dones.sum()) == 5
    assert torch.all(batch.rewards[batch.dones] == 1.0)
    assert torch.allclose(batch.rewards[~batch.dones], torch.tensor(-0.01))
