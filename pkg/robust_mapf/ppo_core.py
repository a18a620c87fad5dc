"""
Rollouts, GAE, the clipped PPO surrogate, and the training loop shared by
baseline PPO, Adv-PPO and the MACER fine-tune.

Robust trainers plug into the loop through :class:`UpdateHooks`; with the
default no-op hooks the loop is plain shared-parameter PPO.
"""

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from robust_mapf.concurrency import run_jobs
from robust_mapf.grid_env import (
    NUM_CHANNELS,
    EnvConfig,
    instance_from_config,
    observe_all,
    step,
    success_rate,
)

logger = logging.getLogger(__name__)

ENTROPY_FLOOR = 0.2
ADVANTAGE_STD_FLOOR = 1e-8
# training instances use seeds >= 2**32, away from validation and report pools
TRAINING_SEED_BASE = 1 << 32
LOG_FILENAME = "train_log.jsonl"


@dataclass(frozen=True)
class PPOConfig:
    lr: float = 3e-4
    gamma: float = 0.95
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    episodes_per_batch: int = 16
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.minibatches < 1:
            raise ValueError("epochs and minibatches must be at least 1")
        if self.episodes_per_batch < 1:
            raise ValueError("episodes_per_batch must be at least 1")


@dataclass
class Minibatch:
    obs: torch.Tensor  # clean observations
    actions: torch.Tensor
    old_log_probs: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    inputs: Optional[torch.Tensor] = None  # what the policy sees; clean unless perturbed
    adversarial: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.inputs is None:
            self.inputs = self.obs

    def __len__(self) -> int:
        return int(self.actions.shape[0])


@dataclass
class TrajectoryBatch:
    """Records in (episode, step, agent) order; parked agents are skipped."""

    obs: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor
    dones: torch.Tensor
    episode_success: List[float] = field(default_factory=list)
    env_steps: int = 0

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def minibatch(self, index: torch.Tensor) -> Minibatch:
        return Minibatch(
            self.obs[index],
            self.actions[index],
            self.log_probs[index],
            self.advantages[index],
            self.returns[index],
        )

    @property
    def clean_success(self) -> float:
        return float(np.mean(self.episode_success)) if self.episode_success else 0.0


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """GAE over one agent's sequence; the value after a done or the end is 0."""
    rewards, values = np.asarray(rewards, np.float64), np.asarray(values, np.float64)
    dones = np.asarray(dones, bool)
    if not len(rewards) == len(values) == len(dones):
        raise ValueError(
            f"length mismatch: {len(rewards)} rewards, {len(values)} values, {len(dones)} dones"
        )
    n = len(rewards)
    advantages = np.zeros(n, dtype=np.float64)
    running = 0.0
    for t in reversed(range(n)):
        if dones[t]:
            next_value, running = 0.0, 0.0
        else:
            next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
    return advantages, advantages + values


def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1, np.uint32)[0])


def _episode_seeds(seed: int, episode: int) -> Tuple[int, int]:
    words = np.random.SeedSequence([seed, episode]).generate_state(2, np.uint32)
    return TRAINING_SEED_BASE + int(words[0]), int(words[1])


@dataclass
class _EpisodeRecords:
    obs: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)
    agents: List[int] = field(default_factory=list)
    success: float = 0.0
    env_steps: int = 0


def _run_episode(
    net: nn.Module, env: EnvConfig, instance_seed: int, sampler_seed: int, greedy: bool
) -> _EpisodeRecords:
    state = instance_from_config(instance_seed, env)
    sampler = torch.Generator().manual_seed(sampler_seed)
    records = _EpisodeRecords()
    while not state.terminal:
        active = [not a.reached for a in state.agents]
        obs = observe_all(state, env.radius)
        with torch.no_grad():
            out = net(torch.from_numpy(obs))
            if greedy:
                actions = out.greedy()
            else:
                actions = torch.multinomial(out.probs, 1, generator=sampler).squeeze(1)
            log_probs = out.log_probs.gather(1, actions.unsqueeze(1)).squeeze(1)
        state, outcome = step(state, actions.tolist())
        records.env_steps += 1
        for i, is_active in enumerate(active):
            if not is_active:
                continue
            records.obs.append(obs[i])
            records.actions.append(int(actions[i]))
            records.log_probs.append(float(log_probs[i]))
            records.values.append(float(out.value[i]))
            records.rewards.append(float(outcome.rewards[i]))
            records.dones.append(bool(outcome.newly_reached[i] or outcome.done))
            records.agents.append(i)
    records.success = success_rate(state)
    return records


def rollout(
    net: nn.Module,
    env: EnvConfig,
    seed: int,
    episodes: int,
    cfg: Optional[PPOConfig] = None,
    greedy: bool = False,
    jobs: int = 1,
) -> TrajectoryBatch:
    """Collect ``episodes`` clean episodes with actions sampled from ``net``."""
    cfg = cfg or PPOConfig()
    jobs_list = []
    for e in range(episodes):
        instance_seed, sampler_seed = _episode_seeds(seed, e)
        jobs_list.append(
            lambda i=instance_seed, s=sampler_seed: _run_episode(net, env, i, s, greedy)
        )
    episodes_done = run_jobs(jobs_list, jobs)

    obs, actions, log_probs, values, rewards, advantages, returns, dones = ([] for _ in range(8))
    for ep in episodes_done:
        ep_adv = np.zeros(len(ep.actions))
        ep_ret = np.zeros(len(ep.actions))
        agent_ids = np.asarray(ep.agents, dtype=np.int64)
        for agent in np.unique(agent_ids):
            idx = np.flatnonzero(agent_ids == agent)
            adv, ret = compute_gae(
                np.asarray(ep.rewards)[idx],
                np.asarray(ep.values)[idx],
                np.asarray(ep.dones)[idx],
                cfg.gamma,
                cfg.gae_lambda,
            )
            ep_adv[idx], ep_ret[idx] = adv, ret
        obs.extend(ep.obs)
        actions.extend(ep.actions)
        log_probs.extend(ep.log_probs)
        values.extend(ep.values)
        rewards.extend(ep.rewards)
        dones.extend(ep.dones)
        advantages.extend(ep_adv)
        returns.extend(ep_ret)

    window = 2 * env.radius + 1
    obs_array = np.asarray(obs, dtype=np.float32).reshape(-1, NUM_CHANNELS, window, window)
    return TrajectoryBatch(
        obs=torch.from_numpy(obs_array),
        actions=torch.as_tensor(actions, dtype=torch.int64),
        log_probs=torch.as_tensor(log_probs, dtype=torch.float32),
        values=torch.as_tensor(values, dtype=torch.float32),
        rewards=torch.as_tensor(rewards, dtype=torch.float32),
        advantages=torch.as_tensor(np.asarray(advantages), dtype=torch.float32),
        returns=torch.as_tensor(np.asarray(returns), dtype=torch.float32),
        dones=torch.as_tensor(dones, dtype=torch.bool),
        episode_success=[ep.success for ep in episodes_done],
        env_steps=sum(ep.env_steps for ep in episodes_done),
    )


def ppo_loss(
    net: nn.Module, minibatch: Minibatch, cfg: PPOConfig
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Clipped surrogate + value loss - entropy bonus, all at ``minibatch.inputs``."""
    if len(minibatch) == 0:
        raise ValueError("empty minibatch")
    out = net(minibatch.inputs)
    log_probs = out.log_probs.gather(1, minibatch.actions.unsqueeze(1)).squeeze(1)

    advantages = minibatch.advantages
    if cfg.normalize_advantages:
        std = advantages.std(unbiased=False).clamp(min=ADVANTAGE_STD_FLOOR)
        advantages = (advantages - advantages.mean()) / std

    ratio = torch.exp(log_probs - minibatch.old_log_probs)
    clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip)
    policy_loss = -torch.min(ratio * advantages, clipped * advantages).mean()
    value_loss = (out.value - minibatch.returns).pow(2).mean()
    entropy = out.entropy().mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    with torch.no_grad():
        diagnostics = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float((minibatch.old_log_probs - log_probs).mean()),
            "clip_fraction": float(((ratio - 1.0).abs() > cfg.clip).float().mean()),
        }
    return loss, diagnostics


class UpdateHooks:
    """Extension points of the PPO update; the defaults leave PPO untouched."""

    def begin_iteration(self, iteration: int, progress: float) -> Dict[str, float]:
        return {}

    def prepare(self, minibatch: Minibatch) -> Minibatch:
        return minibatch

    def regularizer(
        self, net: nn.Module, minibatch: Minibatch
    ) -> Tuple[Optional[torch.Tensor], Dict[str, float]]:
        return None, {}

    def after_step(self, net: nn.Module, minibatch: Minibatch) -> Dict[str, float]:
        return {}


def make_optimizer(net: nn.Module, cfg: PPOConfig, lr: Optional[float] = None) -> torch.optim.Adam:
    return torch.optim.Adam(
        net.parameters(), lr=cfg.lr if lr is None else lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )


def ppo_update(
    net: nn.Module,
    optimizer: torch.optim.Optimizer,
    batch: TrajectoryBatch,
    cfg: PPOConfig,
    rng: np.random.Generator,
    hooks: Optional[UpdateHooks] = None,
) -> Dict[str, float]:
    """``cfg.epochs`` passes of ``cfg.minibatches`` shuffled minibatches."""
    hooks = hooks or UpdateHooks()
    n = len(batch)
    if n == 0:
        return {}
    collected: Dict[str, List[float]] = defaultdict(list)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for chunk in np.array_split(order, cfg.minibatches):
            if len(chunk) == 0:
                continue
            minibatch = hooks.prepare(batch.minibatch(torch.from_numpy(chunk)))
            loss, diagnostics = ppo_loss(net, minibatch, cfg)
            extra, extra_diagnostics = hooks.regularizer(net, minibatch)
            if extra is not None:
                loss = loss + extra
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.max_grad_norm)
            optimizer.step()
            diagnostics["loss"] = float(loss)
            diagnostics.update(extra_diagnostics)
            diagnostics.update(hooks.after_step(net, minibatch))
            for key, value in diagnostics.items():
                collected[key].append(value)
    return {key: float(np.mean(values)) for key, values in collected.items()}


class TrainingLog:
    """One JSON line per outer iteration; flushed so the file can be tailed."""

    def __init__(self, path: Optional[Union[str, Path]] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path: Union[str, Path]) -> List[Dict[str, Any]]:
        lines = Path(path).read_text().splitlines()
        return [json.loads(line) for line in lines if line.strip()]


IterationCallback = Callable[[int, nn.Module, Dict[str, Any]], None]


def train_ppo(
    net: nn.Module,
    env: EnvConfig,
    cfg: PPOConfig,
    seed: int,
    iterations: Optional[int] = None,
    env_step_budget: Optional[int] = None,
    hooks: Optional[UpdateHooks] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    on_iteration: Optional[IterationCallback] = None,
    log: Optional[TrainingLog] = None,
    jobs: int = 1,
) -> List[Dict[str, Any]]:
    """Outer loop: clean rollout, PPO update, bookkeeping.

    Runs for ``iterations`` outer iterations, or until ``env_step_budget``
    environment steps have been collected.
    """
    if (iterations is None) == (env_step_budget is None):
        raise ValueError("give exactly one of iterations and env_step_budget")
    hooks = hooks or UpdateHooks()
    optimizer = optimizer or make_optimizer(net, cfg)
    log = log or TrainingLog()
    shuffle_rng = np.random.default_rng([seed, 0])

    env_steps = 0
    iteration = 0
    while True:
        if iterations is not None:
            if iteration >= iterations:
                break
            progress = iteration / iterations
        else:
            assert env_step_budget is not None
            if env_steps >= env_step_budget:
                break
            progress = env_steps / env_step_budget

        schedule = hooks.begin_iteration(iteration, progress)
        batch = rollout(
            net, env, iteration_seed(seed, iteration), cfg.episodes_per_batch, cfg, jobs=jobs
        )
        if env_step_budget is not None and batch.env_steps == 0:
            raise RuntimeError(f"iteration {iteration} collected no environment steps")
        env_steps += batch.env_steps
        diagnostics = ppo_update(net, optimizer, batch, cfg, shuffle_rng, hooks)

        entropy = diagnostics.pop("entropy", float("nan"))
        record: Dict[str, Any] = {
            "iter": iteration,
            "clean_success": batch.clean_success,
            "entropy": entropy,
            "losses": diagnostics,
            "kappa": schedule.get("kappa", 0.0),
            "score": None,
            "env_steps": env_steps,
            "entropy_collapse": bool(entropy < ENTROPY_FLOOR) if not math.isnan(entropy) else False,
        }
        record.update({k: v for k, v in schedule.items() if k != "kappa"})
        if record["entropy_collapse"]:
            logger.warning(
                "iteration %d: policy entropy %.3f nats below floor %.2f",
                iteration,
                entropy,
                ENTROPY_FLOOR,
            )
        if on_iteration is not None:
            on_iteration(iteration, net, record)
        log.append(record)
        logger.info(
            "iteration %d: clean success %.3f, entropy %.3f, loss %.4f",
            iteration,
            record["clean_success"],
            entropy,
            diagnostics.get("loss", float("nan")),
        )
        iteration += 1
    return log.records
