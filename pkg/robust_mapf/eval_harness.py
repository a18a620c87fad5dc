"""
Attacked evaluation on a fixed seed pool.

Episode ``k`` of cell ``n_adv`` always plays the world generated from seed
``50000 + 13*k + 7*n_adv``, so every policy is compared on identical
instances. Agents act greedily; the attack perturbs every agent's
observation at every step.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from robust_mapf.attacks import AttackKind, AttackSource, AttackSpec, apply_attack
from robust_mapf.concurrency import run_jobs
from robust_mapf.grid_env import (
    EnvConfig,
    dump_instance,
    instance_from_config,
    observe_all,
    step,
    success_rate,
)

logger = logging.getLogger(__name__)

REPORT_SEED_BASE = 50000
RESTART_SEED_STRIDE = 1000


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    episodes_per_cell: int = 30
    seed_base: int = REPORT_SEED_BASE
    fgsm_eps: Tuple[float, ...] = (0.05, 0.10, 0.15, 0.20, 0.30)
    pgd_eps: Tuple[float, ...] = (0.05, 0.10, 0.15, 0.20, 0.30)
    pgd_steps: int = 10
    gaussian_sigma: Tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    salt_pepper_rate: Tuple[float, ...] = (0.02, 0.05, 0.10, 0.15)
    dropout_rate: Tuple[float, ...] = (0.05, 0.10, 0.20)
    restart_eps: Tuple[float, ...] = (0.20, 0.30)
    restarts: int = 5
    bootstrap_resamples: int = 10000

    def __post_init__(self) -> None:
        for name in (
            "fgsm_eps",
            "pgd_eps",
            "gaussian_sigma",
            "salt_pepper_rate",
            "dropout_rate",
            "restart_eps",
        ):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.episodes_per_cell < 1:
            raise ValueError("episodes_per_cell must be at least 1")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")

    def grid(self, source: AttackSource = AttackSource.DEFENDER) -> List[AttackSpec]:
        """Attack cells in n_adv order: FGSM, PGD, Gaussian, salt-and-pepper, dropout.

        ``source`` selects which network the gradient attacks differentiate.
        """
        cells = [AttackSpec(AttackKind.FGSM, eps=e, source=source) for e in self.fgsm_eps]
        cells += [
            AttackSpec(AttackKind.PGD, eps=e, steps=self.pgd_steps, source=source)
            for e in self.pgd_eps
        ]
        cells += [AttackSpec(AttackKind.GAUSSIAN, sigma=s) for s in self.gaussian_sigma]
        cells += [AttackSpec(AttackKind.SALT_PEPPER, rate=r) for r in self.salt_pepper_rate]
        cells += [AttackSpec(AttackKind.CHANNEL_DROPOUT, rate=r) for r in self.dropout_rate]
        return cells


def episode_seed(k: int, cell_index: int, base: int = REPORT_SEED_BASE) -> int:
    return base + 13 * k + 7 * cell_index


@dataclass
class EvalCell:
    spec: AttackSpec
    index: int
    successes: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.successes))

    @property
    def label(self) -> str:
        return self.spec.label

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "label": self.label,
            "attack": self.spec.to_dict(),
            "mean": self.mean,
            "successes": list(self.successes),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EvalCell":
        return cls(AttackSpec.from_dict(doc["attack"]), int(doc["index"]), list(doc["successes"]))


@dataclass
class EvalReport:
    clean: EvalCell
    cells: List[EvalCell]
    certified_radius: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_adv(self) -> float:
        return float(np.mean([c.mean for c in self.cells]))

    @property
    def worst(self) -> EvalCell:
        return min(self.cells, key=lambda c: c.mean)

    @property
    def labels(self) -> List[str]:
        return [c.label for c in self.cells]

    def cell_means(self) -> np.ndarray:
        return np.array([c.mean for c in self.cells])

    def to_dict(self) -> Dict[str, Any]:
        worst = self.worst
        return {
            "clean_success": self.clean.mean,
            "mean_adv": self.mean_adv,
            "worst_adv": {"value": worst.mean, "index": worst.index, "label": worst.label},
            "certified_radius": self.certified_radius,
            "clean": self.clean.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "EvalReport":
        return cls(
            clean=EvalCell.from_dict(doc["clean"]),
            cells=[EvalCell.from_dict(c) for c in doc["cells"]],
            certified_radius=doc.get("certified_radius"),
            metadata=dict(doc.get("metadata", {})),
        )

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def read_json(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "attack", "param", "mean", "successes"])
            for cell in [self.clean] + self.cells:
                index = "" if cell is self.clean else cell.index
                writer.writerow(
                    [
                        index,
                        cell.spec.kind.value,
                        cell.spec.parameter,
                        f"{cell.mean:.6f}",
                        " ".join(f"{s:.4f}" for s in cell.successes),
                    ]
                )


@dataclass
class EpisodeFrame:
    t: int
    positions: List[List[int]]
    clean_actions: List[int]
    attacked_actions: List[int]
    flips: List[bool]
    reached: List[bool]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "positions": self.positions,
            "clean_actions": self.clean_actions,
            "attacked_actions": self.attacked_actions,
            "flips": self.flips,
            "reached": self.reached,
        }


def play_episode(
    net: nn.Module,
    env: EnvConfig,
    spec: AttackSpec,
    seed: int,
    attack_seed: Optional[int] = None,
    source: Optional[nn.Module] = None,
    frames: Optional[List[EpisodeFrame]] = None,
) -> float:
    """Greedy episode under attack; returns the fraction of agents at goal.

    When ``frames`` is given, one :class:`EpisodeFrame` per step is appended.
    """
    state = instance_from_config(seed, env)
    generator = torch.Generator().manual_seed(seed if attack_seed is None else attack_seed)
    attacker = net if source is None else source
    while not state.terminal:
        clean = torch.from_numpy(observe_all(state, env.radius))
        attacked = apply_attack(spec, attacker, clean, generator)
        with torch.no_grad():
            actions = net(attacked).greedy()
            if frames is not None:
                clean_actions = net(clean).greedy()
        if frames is not None:
            frames.append(
                EpisodeFrame(
                    t=state.t,
                    positions=[list(p) for p in state.positions],
                    clean_actions=clean_actions.tolist(),
                    attacked_actions=actions.tolist(),
                    flips=(clean_actions != actions).tolist(),
                    reached=[a.reached for a in state.agents],
                )
            )
        state, _ = step(state, actions.tolist())
    return success_rate(state)


def run_cell(
    net: nn.Module,
    env: EnvConfig,
    spec: AttackSpec,
    cell_index: int,
    episodes: int = 30,
    seed_base: int = REPORT_SEED_BASE,
    restart: int = 0,
    source: Optional[nn.Module] = None,
    jobs: int = 1,
) -> EvalCell:
    seeds = [episode_seed(k, cell_index, seed_base) for k in range(episodes)]
    funcs = [
        lambda s=s: play_episode(
            net, env, spec, s, s + RESTART_SEED_STRIDE * restart, _source_for(spec, source)
        )
        for s in seeds
    ]
    return EvalCell(spec, cell_index, run_jobs(funcs, jobs))


def _source_for(spec: AttackSpec, baseline: Optional[nn.Module]) -> Optional[nn.Module]:
    if spec.source is AttackSource.FROZEN_BASELINE:
        if baseline is None:
            raise ValueError(f"{spec.label} needs a frozen baseline network")
        return baseline
    return None


def run_grid(
    net: nn.Module,
    env: EnvConfig,
    cfg: Optional[EvalConfig] = None,
    source: Optional[nn.Module] = None,
    jobs: int = 1,
    metadata: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """Clean cell plus every attack cell of ``cfg.grid()``.

    All (cell, episode) jobs go to one pool; results are regrouped in
    cell-then-episode order.
    """
    cfg = cfg or EvalConfig()
    origin = AttackSource.DEFENDER if source is None else AttackSource.FROZEN_BASELINE
    specs = [AttackSpec()] + cfg.grid(origin)
    indices = [0] + list(range(len(specs) - 1))
    k_range = range(cfg.episodes_per_cell)
    funcs = []
    for spec, index in zip(specs, indices):
        for k in k_range:
            s = episode_seed(k, index, cfg.seed_base)
            funcs.append(
                lambda spec=spec, s=s: play_episode(
                    net, env, spec, s, s, _source_for(spec, source)
                )
            )
    results = run_jobs(funcs, jobs)
    n = cfg.episodes_per_cell
    cells = [
        EvalCell(spec, index, results[i * n : (i + 1) * n])
        for i, (spec, index) in enumerate(zip(specs, indices))
    ]
    report = EvalReport(cells[0], cells[1:], metadata=dict(metadata or {}))
    logger.info(
        "grid: clean %.3f, mean adversarial %.3f, worst %.3f (%s)",
        report.clean.mean,
        report.mean_adv,
        report.worst.mean,
        report.worst.label,
    )
    return report


@dataclass
class RestartResult:
    eps: float
    cell_index: int
    restart_means: List[float]

    @property
    def worst(self) -> float:
        return min(self.restart_means)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "cell_index": self.cell_index,
            "restart_means": self.restart_means,
            "worst": self.worst,
        }


def multi_restart_pgd(
    net: nn.Module,
    env: EnvConfig,
    cfg: Optional[EvalConfig] = None,
    eps_list: Optional[Sequence[float]] = None,
    restarts: Optional[int] = None,
    jobs: int = 1,
) -> List[RestartResult]:
    """Worst-of-restarts PGD success: the full cell is replayed once per restart.

    Restart ``r`` seeds its attack generator with ``episode seed + 1000*r``;
    restart 0 is the standard PGD cell.
    """
    cfg = cfg or EvalConfig()
    eps_list = cfg.restart_eps if eps_list is None else eps_list
    restarts = cfg.restarts if restarts is None else restarts
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    grid = cfg.grid()
    results = []
    for eps in eps_list:
        matches = [
            i for i, s in enumerate(grid) if s.kind is AttackKind.PGD and np.isclose(s.eps, eps)
        ]
        if not matches:
            raise ValueError(f"no PGD cell with eps={eps} in the evaluation grid")
        index = matches[0]
        means = [
            run_cell(net, env, grid[index], index, cfg.episodes_per_cell, cfg.seed_base, r, jobs=jobs).mean
            for r in range(restarts)
        ]
        results.append(RestartResult(float(eps), index, means))
        logger.info("PGD eps=%.2f: worst of %d restarts %.3f", eps, restarts, min(means))
    return results


@dataclass(frozen=True)
class BootstrapResult:
    gap: float
    ci_low: float
    ci_high: float
    resamples: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gap": self.gap,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "resamples": self.resamples,
        }


def paired_bootstrap(
    a: Sequence[float], b: Sequence[float], resamples: int = 10000, seed: int = 0
) -> BootstrapResult:
    """Mean paired gap a - b with a 95% percentile interval over resampled cells."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) == 0:
        raise ValueError(f"paired samples must have equal non-zero length, got {len(a)} and {len(b)}")
    diffs = a - b
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(diffs), size=(resamples, len(diffs)))
    means = diffs[picks].mean(axis=1)
    low, high = np.percentile(means, [2.5, 97.5])
    return BootstrapResult(float(diffs.mean()), float(low), float(high), resamples)


def compare_reports(
    a: EvalReport, b: EvalReport, resamples: int = 10000, seed: int = 0
) -> BootstrapResult:
    if a.labels != b.labels:
        raise GridMismatchError("reports were produced on different attack grids")
    return paired_bootstrap(a.cell_means(), b.cell_means(), resamples, seed)


def aggregate_seeds(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, Any]]:
    """Cross-seed mean and sample standard deviation (ddof=1) of the headline metrics."""
    if not reports:
        raise ValueError("no reports to aggregate")
    metrics: Dict[str, List[float]] = {
        "clean": [r.clean.mean for r in reports],
        "mean_adv": [r.mean_adv for r in reports],
        "worst_adv": [r.worst.mean for r in reports],
    }
    if all(r.certified_radius is not None for r in reports):
        metrics["certified_radius"] = [float(r.certified_radius) for r in reports]  # type: ignore[arg-type]
    summary = {}
    for name, values in metrics.items():
        summary[name] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else None,
            "values": values,
        }
    return summary


def storyboard_capture(
    policies: Mapping[str, nn.Module],
    env: EnvConfig,
    seed: int,
    spec: AttackSpec,
) -> Dict[str, Any]:
    """Per-step trace of one fixed episode under attack, for each policy."""
    doc: Dict[str, Any] = {
        "seed": seed,
        "attack": spec.to_dict(),
        "instance": dump_instance(instance_from_config(seed, env)),
        "policies": {},
    }
    for name, net in policies.items():
        frames: List[EpisodeFrame] = []
        success = play_episode(net, env, spec, seed, frames=frames)
        flips = sum(sum(f.flips[i] for i in range(len(f.flips)) if not f.reached[i]) for f in frames)
        doc["policies"][name] = {
            "success": success,
            "flip_count": int(flips),
            "frames": [f.to_dict() for f in frames],
        }
        logger.info("storyboard %s: success %.2f, %d flipped actions", name, success, flips)
    return doc
