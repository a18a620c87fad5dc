"""
Adv-PPO and the MACER proximal fine-tune.

Both trainers run the shared :func:`robust_mapf.ppo_core.train_ppo` loop and
plug in through :class:`~robust_mapf.ppo_core.UpdateHooks`:

* :class:`AdversarialHooks` perturbs a random subset of every minibatch
  with FGSM or PGD computed on the frozen baseline, recomputes the old
  log-probabilities at the perturbed inputs, and adds the TRADES and
  SA-KL smoothness terms.
* :class:`MacerHooks` follows each Adv-PPO step with a second optimizer
  step on the certified-radius hinge.

A robust-score selector keeps the best checkpoint seen during training.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from robust_mapf.attacks import AttackKind, AttackSpec, clip_to_ball, fgsm, pgd
from robust_mapf.eval_harness import run_cell
from robust_mapf.grid_env import EnvConfig
from robust_mapf.policy_net import PolicyNet, clone_frozen, kl_to_reference, load_checkpoint
from robust_mapf.ppo_core import (
    Minibatch,
    PPOConfig,
    TrainingLog,
    UpdateHooks,
    make_optimizer,
    train_ppo,
)

logger = logging.getLogger(__name__)

VALIDATION_SEED_BASE = 90000
SELECTOR_CELLS = (
    AttackSpec(AttackKind.FGSM, eps=0.10),
    AttackSpec(AttackKind.FGSM, eps=0.20),
    AttackSpec(AttackKind.PGD, eps=0.10),
    AttackSpec(AttackKind.PGD, eps=0.20),
)
FREQUENCY_FLOOR = 1e-4


@dataclass(frozen=True)
class AdvConfig:
    adv_fraction: float = 0.30
    eps_train: float = 0.15
    beta: float = 0.80
    eps_smooth: float = 0.08
    inner_steps: int = 5
    kappa_max: float = 0.80
    warmup_fraction: float = 0.05
    ramp_fraction: float = 0.15
    eval_period: int = 4
    eval_episodes: int = 8
    attack_steps: int = 10

    def __post_init__(self) -> None:
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError("adv_fraction must lie in [0, 1]")
        for name in ("eps_train", "eps_smooth"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.warmup_fraction < 0 or self.ramp_fraction < 0:
            raise ValueError("schedule fractions must be non-negative")
        if self.warmup_fraction + self.ramp_fraction > 1.0:
            raise ValueError("warmup_fraction + ramp_fraction must not exceed 1")
        if self.beta < 0 or self.kappa_max < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.inner_steps < 1 or self.attack_steps < 1:
            raise ValueError("attack steps must be at least 1")
        if self.eval_period < 1 or self.eval_episodes < 1:
            raise ValueError("eval_period and eval_episodes must be at least 1")


@dataclass(frozen=True)
class MacerConfig:
    weight: float = 0.05
    sigma: float = 0.10
    margin: float = 0.20
    samples: int = 4
    entropy_coef: float = 0.05
    lr: float = 5e-5
    env_steps: int = 50000
    warmup_fraction: float = 0.20
    adv_fraction: float = 0.40

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError("weight must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.samples < 2:
            raise ValueError("samples must be at least 2")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.env_steps < 1:
            raise ValueError("env_steps must be at least 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError("adv_fraction must lie in [0, 1]")


def kappa_at(progress: float, warmup: float, ramp: float, kappa_max: float) -> float:
    if progress < warmup:
        return 0.0
    if ramp > 0 and progress < warmup + ramp:
        return kappa_max * (progress - warmup) / ramp
    return kappa_max


def kappa_schedule(
    iteration: int, total: int, warmup: float, ramp: float, kappa_max: float
) -> float:
    """Zero during warm-up, linear ramp to ``kappa_max``, then constant."""
    if total < 1:
        raise ValueError("total must be at least 1")
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return kappa_at(iteration / total, warmup, ramp, kappa_max)


def sa_kl_term(net: nn.Module, obs: torch.Tensor, eps: float, steps: int) -> torch.Tensor:
    """Worst-case KL between the policy at ``obs`` and inside the eps-ball.

    The inner maximisation is ``steps`` sign-gradient steps of 2·eps/steps
    from zero offset; only the outer KL carries gradients to the parameters.
    """
    obs = obs.detach()
    with torch.no_grad():
        clean_probs = net(obs).probs
    x = obs.clone()
    if eps > 0:
        step_size = 2.0 * eps / steps
        # at zero offset the KL gradient vanishes up to rounding, so the first step follows rounding noise
        for _ in range(steps):
            x.requires_grad_(True)
            kl = kl_to_reference(clean_probs, net(x).logits).sum()
            (grad,) = torch.autograd.grad(kl, x)
            x = clip_to_ball(obs, x.detach() + step_size * grad.sign(), eps).detach()
    return kl_to_reference(clean_probs, net(x).logits).mean()


def trades_term(
    net: nn.Module, obs: torch.Tensor, eps: float, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """KL between the policy at ``obs`` and at one uniform draw inside the eps-box."""
    obs = obs.detach()
    delta = (torch.rand(obs.shape, generator=generator, dtype=obs.dtype) * 2 - 1) * eps
    with torch.no_grad():
        clean_probs = net(obs).probs
    return kl_to_reference(clean_probs, net((obs + delta).clamp(0.0, 1.0)).logits).mean()


def score_from_cells(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("no selector cells")
    return float(np.mean(values))


def robust_score(
    net: nn.Module,
    env: EnvConfig,
    episodes: int = 8,
    seed_base: int = VALIDATION_SEED_BASE,
    jobs: int = 1,
) -> float:
    """Mean success over FGSM and PGD at eps 0.10 and 0.20 on the validation pool."""
    values = [
        run_cell(net, env, spec, index, episodes, seed_base, jobs=jobs).mean
        for index, spec in enumerate(SELECTOR_CELLS)
    ]
    score = score_from_cells(values)
    logger.debug("selector cells %s -> %.4f", ["%.3f" % v for v in values], score)
    return score


class BestCheckpoint:
    """Argmax of the robust score over evaluated iterations; earliest wins ties."""

    def __init__(self) -> None:
        self.iteration: Optional[int] = None
        self.score = -float("inf")
        self.state: Optional[Dict[str, torch.Tensor]] = None

    def offer(self, iteration: int, score: float, net: nn.Module) -> bool:
        if score <= self.score:
            return False
        self.iteration, self.score = iteration, score
        self.state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        logger.info("iteration %d: new best robust score %.4f", iteration, score)
        return True

    def restore(self) -> PolicyNet:
        if self.state is None:
            raise RuntimeError("no checkpoint has been offered")
        net = PolicyNet()
        net.load_state_dict(self.state)
        return net


def _stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint32)[0])


class AdversarialHooks(UpdateHooks):
    def __init__(
        self,
        net: nn.Module,
        baseline: nn.Module,
        cfg: AdvConfig,
        seed: int,
        kappa: Optional[float] = None,
    ) -> None:
        self.net = net
        self.baseline = baseline
        self.cfg = cfg
        self.fixed_kappa = kappa
        self.kappa = 0.0
        self.attack_kind = AttackKind.FGSM
        self.old_policy: Optional[nn.Module] = None
        # one stream per concern so switching a term off leaves the others unchanged
        self._mask_rng = np.random.default_rng([seed, 1])
        self._attack_generator = torch.Generator().manual_seed(_stream_seed(seed, 2))
        self._trades_generator = torch.Generator().manual_seed(_stream_seed(seed, 3))

    def begin_iteration(self, iteration: int, progress: float) -> Dict[str, float]:
        cfg = self.cfg
        if self.fixed_kappa is not None:
            self.kappa = self.fixed_kappa
        else:
            self.kappa = kappa_at(progress, cfg.warmup_fraction, cfg.ramp_fraction, cfg.kappa_max)
        self.attack_kind = AttackKind.FGSM if iteration % 2 == 0 else AttackKind.PGD
        if cfg.adv_fraction > 0:
            self.old_policy = clone_frozen(self.net)
        return {"kappa": self.kappa}

    def _perturb(self, obs: torch.Tensor) -> torch.Tensor:
        if self.attack_kind is AttackKind.FGSM:
            return fgsm(self.baseline, obs, self.cfg.eps_train)
        return pgd(
            self.baseline,
            obs,
            self.cfg.eps_train,
            self.cfg.attack_steps,
            generator=self._attack_generator,
        )

    def prepare(self, minibatch: Minibatch) -> Minibatch:
        if self.cfg.adv_fraction == 0:
            return minibatch
        mask = torch.from_numpy(self._mask_rng.random(len(minibatch)) < self.cfg.adv_fraction)
        if not bool(mask.any()):
            return replace(minibatch, adversarial=mask)
        assert self.old_policy is not None

        perturbed = self._perturb(minibatch.obs[mask])
        inputs = minibatch.obs.clone()
        inputs[mask] = perturbed
        old_log_probs = minibatch.old_log_probs.clone()
        with torch.no_grad():
            log_probs = self.old_policy(perturbed).log_probs
            old_log_probs[mask] = log_probs.gather(1, minibatch.actions[mask].unsqueeze(1)).squeeze(1)
        logger.debug(
            "%s perturbed %d of %d samples", self.attack_kind.value, int(mask.sum()), len(minibatch)
        )
        return replace(minibatch, inputs=inputs, old_log_probs=old_log_probs, adversarial=mask)

    def regularizer(
        self, net: nn.Module, minibatch: Minibatch
    ) -> Tuple[Optional[torch.Tensor], Dict[str, float]]:
        terms = []
        diagnostics = {}
        if self.cfg.beta > 0:
            trades = trades_term(net, minibatch.obs, self.cfg.eps_smooth, self._trades_generator)
            terms.append(self.cfg.beta * trades)
            diagnostics["trades"] = float(trades)
        if self.kappa > 0:
            sa_kl = sa_kl_term(net, minibatch.obs, self.cfg.eps_train, self.cfg.inner_steps)
            terms.append(self.kappa * sa_kl)
            diagnostics["sa_kl"] = float(sa_kl)
        if not terms:
            return None, diagnostics
        return torch.stack(terms).sum(), diagnostics


def hinge_from_frequencies(
    p_a: Union[float, torch.Tensor],
    p_b: Union[float, torch.Tensor],
    sigma: float,
    margin: float,
    mask: Union[bool, torch.Tensor] = True,
) -> torch.Tensor:
    """max(0, margin - sigma/2 * (Φ⁻¹(p_a) - Φ⁻¹(p_b))), zeroed where ``mask`` is false."""
    p_a = torch.as_tensor(p_a, dtype=torch.float64 if isinstance(p_a, float) else None)
    p_b = torch.as_tensor(p_b, dtype=p_a.dtype)
    p_a = p_a.clamp(FREQUENCY_FLOOR, 1.0 - FREQUENCY_FLOOR)
    p_b = p_b.clamp(FREQUENCY_FLOOR, 1.0 - FREQUENCY_FLOOR)
    smoothed_margin = 0.5 * sigma * (torch.special.ndtri(p_a) - torch.special.ndtri(p_b))
    hinge = (margin - smoothed_margin).clamp(min=0.0)
    return torch.where(torch.as_tensor(mask), hinge, torch.zeros_like(hinge))


def _straight_through(hard: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    """Value of the clamped hard count, gradient of the soft count."""
    return hard.clamp(FREQUENCY_FLOOR, 1.0 - FREQUENCY_FLOOR).detach() + soft - soft.detach()


def macer_hinge(
    net: nn.Module,
    obs: torch.Tensor,
    cfg: MacerConfig,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Mean certified-radius hinge over a batch of clean observations.

    Action counts under ``cfg.samples`` Gaussian draws decide the mask and
    the runner-up; gradients flow through the mean noisy probabilities.
    """
    obs = obs.detach()
    batch = obs.shape[0]
    with torch.no_grad():
        clean_action = net(obs).greedy()
    noise = torch.randn((cfg.samples,) + tuple(obs.shape), generator=generator, dtype=obs.dtype)
    noisy = (obs.unsqueeze(0) + cfg.sigma * noise).reshape((-1,) + tuple(obs.shape[1:]))
    probs = net(noisy).probs.reshape(cfg.samples, batch, -1)

    num_actions = probs.shape[-1]
    hard = F.one_hot(probs.argmax(dim=-1), num_actions).to(probs.dtype).mean(dim=0)
    soft = probs.mean(dim=0)
    rows = torch.arange(batch)
    others = hard.clone()
    others[rows, clean_action] = -1.0
    runner_up = others.argmax(dim=-1)
    mask = hard.argmax(dim=-1) == clean_action

    p_a = _straight_through(hard[rows, clean_action], soft[rows, clean_action])
    p_b = _straight_through(hard[rows, runner_up], soft[rows, runner_up])
    return hinge_from_frequencies(p_a, p_b, cfg.sigma, cfg.margin, mask).mean()


class MacerHooks(AdversarialHooks):
    """Adv-PPO step followed by a proximal step on ``weight * hinge``."""

    def __init__(
        self,
        net: nn.Module,
        baseline: nn.Module,
        cfg: AdvConfig,
        macer: MacerConfig,
        seed: int,
        kappa: Optional[float] = None,
        max_grad_norm: float = 0.5,
    ) -> None:
        super().__init__(net, baseline, cfg, seed, kappa)
        self.macer = macer
        self.max_grad_norm = max_grad_norm
        self.optimizer: Optional[torch.optim.Optimizer] = None
        self.progress = 0.0
        self._noise_generator = torch.Generator().manual_seed(_stream_seed(seed, 4))

    @property
    def active(self) -> bool:
        return self.macer.weight > 0 and self.progress >= self.macer.warmup_fraction

    def begin_iteration(self, iteration: int, progress: float) -> Dict[str, float]:
        self.progress = progress
        return super().begin_iteration(iteration, progress)

    def after_step(self, net: nn.Module, minibatch: Minibatch) -> Dict[str, float]:
        if not self.active:
            return {}
        if self.optimizer is None:
            raise RuntimeError("MacerHooks.optimizer must be set before training")
        hinge = macer_hinge(net, minibatch.obs, self.macer, self._noise_generator)
        if float(hinge) > 0:
            self.optimizer.zero_grad()
            (self.macer.weight * hinge).backward()
            nn.utils.clip_grad_norm_(net.parameters(), self.max_grad_norm)
            self.optimizer.step()
        return {"macer_hinge": float(hinge)}


@dataclass
class TrainResult:
    net: PolicyNet  # best checkpoint by robust score
    final_net: nn.Module
    records: List[Dict[str, Any]] = field(default_factory=list)
    best_iteration: Optional[int] = None
    best_score: Optional[float] = None


def _as_network(source: Union[str, Path, nn.Module]) -> nn.Module:
    if isinstance(source, nn.Module):
        return source
    return load_checkpoint(source)


def _trainable_copy(net: nn.Module) -> PolicyNet:
    copy = PolicyNet()
    copy.load_state_dict(net.state_dict())
    return copy


def _train_with_selector(
    net: nn.Module,
    env: EnvConfig,
    ppo_cfg: PPOConfig,
    adv_cfg: AdvConfig,
    hooks: UpdateHooks,
    seed: int,
    optimizer: torch.optim.Optimizer,
    iterations: Optional[int] = None,
    env_step_budget: Optional[int] = None,
    log: Optional[TrainingLog] = None,
    jobs: int = 1,
) -> TrainResult:
    best = BestCheckpoint()

    def select(iteration: int, current: nn.Module, record: Dict[str, Any]) -> None:
        if (iteration + 1) % adv_cfg.eval_period != 0:
            return
        score = robust_score(current, env, adv_cfg.eval_episodes, jobs=jobs)
        record["score"] = score
        best.offer(iteration, score, current)

    records = train_ppo(
        net,
        env,
        ppo_cfg,
        seed,
        iterations=iterations,
        env_step_budget=env_step_budget,
        hooks=hooks,
        optimizer=optimizer,
        on_iteration=select,
        log=log,
        jobs=jobs,
    )
    if best.state is None:
        last = len(records) - 1
        best.offer(last, robust_score(net, env, adv_cfg.eval_episodes, jobs=jobs), net)
    return TrainResult(best.restore(), net, records, best.iteration, best.score)


def train_advppo(
    baseline: Union[str, Path, nn.Module],
    env: EnvConfig,
    adv_cfg: AdvConfig,
    ppo_cfg: PPOConfig,
    iterations: int,
    seed: int,
    log: Optional[TrainingLog] = None,
    jobs: int = 1,
) -> TrainResult:
    """Adversarial PPO from the baseline weights, attacked by the frozen baseline."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    source = _as_network(baseline)
    frozen = clone_frozen(source)
    net = _trainable_copy(source)
    hooks = AdversarialHooks(net, frozen, adv_cfg, seed)
    logger.info(
        "Adv-PPO: %d iterations, adv_fraction %.2f, eps_train %.2f, beta %.2f, kappa_max %.2f",
        iterations,
        adv_cfg.adv_fraction,
        adv_cfg.eps_train,
        adv_cfg.beta,
        adv_cfg.kappa_max,
    )
    return _train_with_selector(
        net,
        env,
        ppo_cfg,
        adv_cfg,
        hooks,
        seed,
        make_optimizer(net, ppo_cfg),
        iterations=iterations,
        log=log,
        jobs=jobs,
    )


def finetune_settings(
    ppo_cfg: PPOConfig, adv_cfg: AdvConfig, macer: MacerConfig
) -> Tuple[PPOConfig, AdvConfig]:
    """PPO and Adv-PPO settings in force during the fine-tune."""
    return (
        replace(ppo_cfg, lr=macer.lr, entropy_coef=macer.entropy_coef),
        replace(adv_cfg, adv_fraction=macer.adv_fraction),
    )


def finetune_macer(
    start: Union[str, Path, nn.Module],
    env: EnvConfig,
    macer: MacerConfig,
    adv_cfg: AdvConfig,
    ppo_cfg: PPOConfig,
    seed: int,
    baseline: Optional[Union[str, Path, nn.Module]] = None,
    log: Optional[TrainingLog] = None,
    jobs: int = 1,
    continue_advppo: bool = False,
) -> TrainResult:
    """Fine-tune an Adv-PPO checkpoint for ``macer.env_steps`` environment steps.

    Training-time attacks come from ``baseline`` when given, otherwise from a
    frozen copy of the starting checkpoint. ``continue_advppo`` disables the
    hinge step and keeps everything else.
    """
    start_net = _as_network(start)
    frozen = clone_frozen(_as_network(baseline) if baseline is not None else start_net)
    net = _trainable_copy(start_net)
    ppo_ft, adv_ft = finetune_settings(ppo_cfg, adv_cfg, macer)
    optimizer = make_optimizer(net, ppo_ft)

    hooks: AdversarialHooks
    if continue_advppo:
        hooks = AdversarialHooks(net, frozen, adv_ft, seed, kappa=adv_ft.kappa_max)
    else:
        macer_hooks = MacerHooks(
            net, frozen, adv_ft, macer, seed, adv_ft.kappa_max, ppo_ft.max_grad_norm
        )
        macer_hooks.optimizer = optimizer
        hooks = macer_hooks
    logger.info(
        "fine-tune: %d env steps, hinge weight %.3f, sigma %.2f, margin %.2f%s",
        macer.env_steps,
        0.0 if continue_advppo else macer.weight,
        macer.sigma,
        macer.margin,
        " (continued Adv-PPO)" if continue_advppo else "",
    )
    return _train_with_selector(
        net,
        env,
        ppo_ft,
        adv_ft,
        hooks,
        seed,
        optimizer,
        env_step_budget=macer.env_steps,
        log=log,
        jobs=jobs,
    )
