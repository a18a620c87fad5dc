"""
SVG figures from evaluation reports, certification reports and storyboards.
"""

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from robust_mapf.eval_harness import EvalReport  # noqa: E402
from robust_mapf.ppo_core import ENTROPY_FLOOR  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FAMILY_TITLES = {
    "fgsm": "FGSM",
    "pgd": "PGD",
    "gaussian": "Gaussian noise",
    "salt_pepper": "Salt and pepper",
    "channel_dropout": "Channel dropout",
}


def _save(fig: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.debug("figure written to %s", path)
    return path


def per_attack_curves(reports: Mapping[str, EvalReport], path: PathLike) -> Path:
    """Success versus attack strength, one panel per attack family."""
    families: List[str] = []
    for report in reports.values():
        for cell in report.cells:
            if cell.spec.kind.value not in families:
                families.append(cell.spec.kind.value)
    fig, axes = plt.subplots(1, len(families), figsize=(3.2 * len(families), 3.0), squeeze=False)
    for ax, family in zip(axes[0], families):
        for name, report in reports.items():
            cells = [c for c in report.cells if c.spec.kind.value == family]
            params = [0.0] + [c.spec.parameter for c in cells]
            values = [report.clean.mean] + [c.mean for c in cells]
            ax.plot(params, values, marker="o", label=name)
        ax.set_title(FAMILY_TITLES.get(family, family))
        ax.set_xlabel("strength")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("success")
    axes[0][-1].legend(fontsize=8)
    return _save(fig, path)


def tradeoff_scatter(reports: Mapping[str, EvalReport], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    for name, report in reports.items():
        ax.scatter(report.clean.mean, report.worst.mean, s=40)
        ax.annotate(name, (report.clean.mean, report.worst.mean), fontsize=8,
                    xytext=(4, 4), textcoords="offset points")
    ax.set_xlabel("clean success")
    ax.set_ylabel("worst attacked cell")
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def certification_curves(certs: Mapping[str, Mapping[str, Any]], path: PathLike) -> Path:
    """Fraction of pool states certified at each radius."""
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    for name, report in certs.items():
        curve = report["curve"]
        ax.plot(curve["thresholds"], curve["fractions"], label=f"{name} (R̄={report['mean_radius']:.3f})")
    ax.set_xlabel("radius")
    ax.set_ylabel("fraction certified")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def headline_table(summaries: Mapping[str, Mapping[str, Mapping[str, Any]]], path: PathLike) -> Path:
    """Cross-seed headline numbers, one row per method (see ``aggregate_seeds``)."""
    metrics = ("clean", "mean_adv", "worst_adv", "certified_radius")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for name, summary in summaries.items():
            row = [name, len(summary["clean"]["values"])]
            for metric in metrics:
                entry = summary.get(metric)
                for stat in ("mean", "std"):
                    value = None if entry is None else entry[stat]
                    row.append("" if value is None else f"{value:.4f}")
            writer.writerow(row)
    return path


def _draw_frame(ax: Any, instance: Mapping[str, Any], frame: Mapping[str, Any]) -> None:
    side = int(instance["L"])
    for r, c in instance["obstacles"]:
        ax.add_patch(plt.Rectangle((c, r), 1, 1, color="black", alpha=0.6))
    colours = plt.get_cmap("tab10")
    for i, (goal, pos) in enumerate(zip(instance["goals"], frame["positions"])):
        colour = colours(i % 10)
        ax.add_patch(plt.Rectangle((goal[1] + 0.15, goal[0] + 0.15), 0.7, 0.7,
                                   fill=False, edgecolor=colour, linewidth=1.5))
        reached = frame["reached"][i]
        ax.add_patch(plt.Circle((pos[1] + 0.5, pos[0] + 0.5), 0.3,
                                facecolor="white" if reached else colour, edgecolor=colour))
        if frame["flips"][i] and not reached:
            ax.text(pos[1] + 0.5, pos[0] + 0.5, "×", ha="center", va="center",
                    color="red", fontweight="bold")
    ax.set_xlim(0, side)
    ax.set_ylim(side, 0)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"t={frame['t']}", fontsize=8)


def storyboard_strip(
    storyboard: Mapping[str, Any], path: PathLike, panels: int = 6
) -> Path:
    """One row per policy, ``panels`` evenly spaced steps per row; red × marks a flipped action."""
    policies = storyboard["policies"]
    fig, axes = plt.subplots(len(policies), panels, figsize=(1.8 * panels, 2.0 * len(policies)),
                             squeeze=False)
    for row, (name, trace) in zip(axes, policies.items()):
        frames = trace["frames"]
        picks = sorted({round(k * (len(frames) - 1) / max(panels - 1, 1)) for k in range(panels)})
        for ax in row:
            ax.axis("off")
        for ax, index in zip(row, picks):
            ax.axis("on")
            _draw_frame(ax, storyboard["instance"], frames[index])
        row[0].set_ylabel(f"{name}\nsuccess {trace['success']:.2f}", fontsize=8)
    return _save(fig, path)


def training_curves(logs: Mapping[str, Sequence[Mapping[str, Any]]], path: PathLike) -> Path:
    """Clean success and policy entropy per outer iteration."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(5.0, 4.6), sharex=True)
    for name, records in logs.items():
        series: Dict[str, List[float]] = defaultdict(list)
        for record in records:
            series["iter"].append(record["iter"])
            series["clean_success"].append(record["clean_success"])
            series["entropy"].append(record["entropy"])
        top.plot(series["iter"], series["clean_success"], label=name)
        bottom.plot(series["iter"], series["entropy"], label=name)
    bottom.axhline(ENTROPY_FLOOR, color="red", linestyle="--", linewidth=0.8)
    top.set_ylabel("clean success")
    bottom.set_ylabel("entropy (nats)")
    bottom.set_xlabel("iteration")
    top.legend(fontsize=8)
    return _save(fig, path)
