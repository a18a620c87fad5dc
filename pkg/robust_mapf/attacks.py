"""
Observation attacks inside the clipped ℓ∞ ball
``[max(0, o - eps), min(1, o + eps)]``.

Gradient attacks ascend the cross-entropy between the source network's
policy and its own clean argmax action. Sensor-noise attacks use no
gradient information and only stay inside ``[0, 1]``.
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Optional

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)


class AttackKind(str, Enum):
    NONE = "none"
    FGSM = "fgsm"
    PGD = "pgd"
    GAUSSIAN = "gaussian"
    SALT_PEPPER = "salt_pepper"
    CHANNEL_DROPOUT = "channel_dropout"


class AttackSource(str, Enum):
    DEFENDER = "defender"
    FROZEN_BASELINE = "frozen-baseline"


GRADIENT_KINDS = (AttackKind.FGSM, AttackKind.PGD)
NOISE_KINDS = (AttackKind.GAUSSIAN, AttackKind.SALT_PEPPER, AttackKind.CHANNEL_DROPOUT)
_PARAMETER_NAMES = {
    AttackKind.FGSM: "eps",
    AttackKind.PGD: "eps",
    AttackKind.GAUSSIAN: "sigma",
    AttackKind.SALT_PEPPER: "rate",
    AttackKind.CHANNEL_DROPOUT: "rate",
}


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind = AttackKind.NONE
    eps: float = 0.0
    steps: int = 10
    restarts: int = 1
    sigma: float = 0.0
    rate: float = 0.0
    source: AttackSource = AttackSource.DEFENDER

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "source", AttackSource(self.source))
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.sigma < 0 or self.rate < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.rate > 1:
            raise ValueError("rate must not exceed 1")

    @property
    def parameter(self) -> float:
        """The one number that distinguishes cells of the same attack family."""
        if self.kind in GRADIENT_KINDS:
            return self.eps
        if self.kind is AttackKind.GAUSSIAN:
            return self.sigma
        return self.rate

    @property
    def label(self) -> str:
        if self.kind is AttackKind.NONE:
            return "clean"
        return f"{self.kind.value} {_PARAMETER_NAMES[self.kind]}={self.parameter:g}"

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["kind"] = self.kind.value
        doc["source"] = self.source.value
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "AttackSpec":
        fields = ("kind", "eps", "steps", "restarts", "sigma", "rate", "source")
        known = {k: doc[k] for k in fields if k in doc}
        return cls(**known)


def clip_to_ball(o: torch.Tensor, candidate: torch.Tensor, eps: float) -> torch.Tensor:
    lower = (o - eps).clamp(min=0.0)
    upper = (o + eps).clamp(max=1.0)
    return torch.maximum(torch.minimum(candidate, upper), lower)


def _attacker_loss(net: nn.Module, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy against the clean action."""
    return F.cross_entropy(net(x).logits, target, reduction="none")


def _clean_actions(net: nn.Module, o: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return net(o).logits.argmax(dim=-1)


def _loss_gradient(net: nn.Module, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    loss = _attacker_loss(net, x, target).sum()
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def fgsm(net: nn.Module, o: torch.Tensor, eps: float) -> torch.Tensor:
    """One sign-gradient step of size eps, then projection into the ball."""
    o = o.detach()
    if eps == 0:
        return o.clone()
    target = _clean_actions(net, o)
    grad = _loss_gradient(net, o, target)
    return clip_to_ball(o, o + eps * grad.sign(), eps).detach()


def pgd(
    net: nn.Module,
    o: torch.Tensor,
    eps: float,
    steps: int = 10,
    restarts: int = 1,
    generator: Optional[torch.Generator] = None,
    random_start: bool = True,
) -> torch.Tensor:
    """Projected sign-gradient ascent with step 2·eps/steps.

    Each restart starts uniformly inside the ball; per sample, the restart
    with the highest final attacker loss is returned.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    o = o.detach()
    if eps == 0:
        return o.clone()
    target = _clean_actions(net, o)
    step_size = 2.0 * eps / steps

    best = o.clone()
    best_loss = torch.full((o.shape[0],), -float("inf"), dtype=o.dtype)
    for _ in range(restarts):
        if random_start:
            noise = torch.rand(o.shape, generator=generator, dtype=o.dtype) * 2 - 1
            x = clip_to_ball(o, o + eps * noise, eps)
        else:
            x = o.clone()
        for _ in range(steps):
            grad = _loss_gradient(net, x, target)
            x = clip_to_ball(o, x + step_size * grad.sign(), eps)
        with torch.no_grad():
            loss = _attacker_loss(net, x, target)
        improved = loss > best_loss
        best[improved] = x[improved]
        best_loss = torch.where(improved, loss, best_loss)
    return best.detach()


def sensor_noise(
    o: torch.Tensor,
    kind: AttackKind,
    parameter: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    if parameter < 0:
        raise ValueError("noise parameter must be non-negative")
    kind = AttackKind(kind)
    o = o.detach()
    if parameter == 0:
        return o.clone()
    if kind is AttackKind.GAUSSIAN:
        noise = torch.randn(o.shape, generator=generator, dtype=o.dtype)
        return (o + parameter * noise).clamp(0.0, 1.0)
    if kind is AttackKind.SALT_PEPPER:
        hit = torch.rand(o.shape, generator=generator) < parameter
        salt = (torch.rand(o.shape, generator=generator) < 0.5).to(o.dtype)
        return torch.where(hit, salt, o)
    if kind is AttackKind.CHANNEL_DROPOUT:
        shape = o.shape[:-2] + (1, 1)
        keep = (torch.rand(shape, generator=generator) >= parameter).to(o.dtype)
        return o * keep
    raise ValueError(f"{kind.value} is not a sensor-noise attack")


def apply_attack(
    spec: AttackSpec,
    source: nn.Module,
    o: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Perturb a batch of observations according to ``spec``."""
    if spec.kind is AttackKind.NONE:
        return o.detach().clone()
    if spec.kind is AttackKind.FGSM:
        return fgsm(source, o, spec.eps)
    if spec.kind is AttackKind.PGD:
        return pgd(source, o, spec.eps, spec.steps, spec.restarts, generator)
    return sensor_noise(o, spec.kind, spec.parameter, generator)
