"""
Randomized-smoothing certificates of action stability.

A certificate states that, with confidence 1 - alpha, the majority action of
the policy under N(0, sigma²I) input noise cannot change within an ℓ2 ball
of the returned radius. It describes the smoothed wrapper, not the greedy
policy that is actually deployed.
"""

import logging
from dataclasses import dataclass
from math import ceil
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.special import ndtri
from statsmodels.stats.proportion import proportion_confint
from torch import nn

from robust_mapf.concurrency import run_jobs
from robust_mapf.grid_env import NUM_ACTIONS, EnvConfig, instance_from_config, observe_all, step

logger = logging.getLogger(__name__)

# to abstain, certify returns this action
ABSTAIN = -1
CERT_SEED_BASE = 70000
DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.0, 0.405, 0.025), 3))


@dataclass(frozen=True)
class CertConfig:
    sigma: float = 0.10
    n0: int = 32
    n: int = 500
    alpha: float = 1e-3
    pool_size: int = 1500
    batch_size: int = 500

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n0 < 1:
            raise ValueError("n0 must be at least 1")
        if self.n < self.n0:
            raise ValueError("n must be at least n0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.pool_size < 1:
            raise ValueError("pool_size must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class Certificate:
    state_id: int
    action: int
    radius: float
    p_lower: float
    count: int

    @property
    def abstained(self) -> bool:
        return self.action == ABSTAIN


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF on the open interval (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must lie in (0, 1), got {p}")
    return float(ndtri(p))


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= k <= n:
        raise ValueError(f"successes {k} outside [0, {n}]")
    if k == 0:
        return 0.0
    if k == n:
        return float(alpha ** (1.0 / n))
    return float(proportion_confint(k, n, alpha=2 * alpha, method="beta")[0])


def _count_arr(actions: np.ndarray, length: int = NUM_ACTIONS) -> np.ndarray:
    return np.bincount(actions, minlength=length)


def _sample_noise(
    net: nn.Module, obs: torch.Tensor, num: int, sigma: float, rng: np.random.Generator, batch_size: int
) -> np.ndarray:
    """Action counts of ``net`` at ``num`` Gaussian-perturbed copies of ``obs``."""
    counts = np.zeros(NUM_ACTIONS, dtype=np.int64)
    remaining = num
    with torch.no_grad():
        for _ in range(ceil(num / batch_size)):
            this_batch = min(batch_size, remaining)
            remaining -= this_batch
            noise = rng.standard_normal((this_batch,) + tuple(obs.shape), dtype=np.float32)
            batch = obs.unsqueeze(0) + sigma * torch.from_numpy(noise).to(obs.dtype)
            counts += _count_arr(net(batch).greedy().numpy())
    return counts


def certify(
    net: nn.Module,
    obs: torch.Tensor,
    cfg: CertConfig,
    rng: np.random.Generator,
    state_id: int = 0,
) -> Certificate:
    """Select the majority action on n0 draws, then bound its probability on n more."""
    obs = torch.as_tensor(obs)
    selection = _sample_noise(net, obs, cfg.n0, cfg.sigma, rng, cfg.batch_size)
    candidate = int(selection.argmax())
    estimation = _sample_noise(net, obs, cfg.n, cfg.sigma, rng, cfg.batch_size)
    count = int(estimation[candidate])
    p_lower = clopper_pearson_lower(count, cfg.n, cfg.alpha)
    if p_lower <= 0.5:
        return Certificate(state_id, ABSTAIN, 0.0, p_lower, count)
    return Certificate(state_id, candidate, cfg.sigma * normal_quantile(p_lower), p_lower, count)


def state_rng(seed: int, state_id: int) -> np.random.Generator:
    """Counter-based noise stream owned by one pool state."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, state_id])))


def collect_pool(
    net: nn.Module, env: EnvConfig, size: int, seed_base: int = CERT_SEED_BASE
) -> List[np.ndarray]:
    """Observations of unparked agents along greedy clean episodes of ``net``."""
    states: List[np.ndarray] = []
    episode = 0
    while len(states) < size:
        state = instance_from_config(seed_base + episode, env)
        while not state.terminal and len(states) < size:
            obs = observe_all(state, env.radius)
            states.extend(obs[i] for i, a in enumerate(state.agents) if not a.reached)
            with torch.no_grad():
                actions = net(torch.from_numpy(obs)).greedy()
            state, _ = step(state, actions.tolist())
        episode += 1
    logger.debug("certification pool: %d states from %d episodes", size, episode)
    return states[:size]


def certified_curve(radii: Sequence[float], thresholds: Sequence[float]) -> List[float]:
    """Fraction of states whose certified radius is at least each threshold."""
    values = np.asarray(radii, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("no radii")
    return [float(np.mean(values >= r)) for r in thresholds]


def radius_pool(
    net: nn.Module,
    env: EnvConfig,
    cfg: Optional[CertConfig] = None,
    seed: int = 0,
    jobs: int = 1,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> Dict[str, Any]:
    """Certify ``cfg.pool_size`` states of the policy's own trajectories.

    Abstentions count as radius 0 in the mean.
    """
    cfg = cfg or CertConfig()
    states = collect_pool(net, env, cfg.pool_size)
    funcs = [
        lambda i=i, o=o: certify(net, torch.from_numpy(o), cfg, state_rng(seed, i), state_id=i)
        for i, o in enumerate(states)
    ]
    certificates: List[Certificate] = run_jobs(funcs, jobs)
    radii = sorted(c.radius for c in certificates)
    abstain_fraction = float(np.mean([c.abstained for c in certificates]))
    mean_radius = float(np.mean(radii))
    if abstain_fraction > 0.5:
        logger.warning("certifier abstained on %.0f%% of the pool", 100 * abstain_fraction)
    logger.info(
        "certified %d states: mean radius %.4f, abstained %.3f",
        len(certificates),
        mean_radius,
        abstain_fraction,
    )
    return {
        "sigma": cfg.sigma,
        "n0": cfg.n0,
        "n": cfg.n,
        "alpha": cfg.alpha,
        "pool_size": cfg.pool_size,
        "mean_radius": mean_radius,
        "radii": radii,
        "abstain_fraction": abstain_fraction,
        "curve": {
            "thresholds": [float(t) for t in thresholds],
            "fractions": certified_curve(radii, thresholds),
        },
    }
