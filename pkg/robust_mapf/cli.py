"""
``robust-mapf`` command line: one subcommand per pipeline stage.

Every stage writes its artifacts plus ``manifest.json`` (config hash,
input and output hashes, version, wall time) into ``--out``.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch

from robust_mapf import __version__
from robust_mapf.attacks import AttackKind, AttackSource, AttackSpec
from robust_mapf.concurrency import default_jobs
from robust_mapf.config import (
    MANIFEST_FILENAME,
    ConfigValidationError,
    RunConfig,
    canonical_json,
    config_hash,
    load_config,
    to_dict,
)
from robust_mapf.eval_harness import (
    EvalReport,
    aggregate_seeds,
    compare_reports,
    multi_restart_pgd,
    run_grid,
    storyboard_capture,
)
from robust_mapf.policy_net import checkpoint_hash, init_params, load_checkpoint, save_checkpoint
from robust_mapf.ppo_core import LOG_FILENAME, TrainingLog, train_ppo
from robust_mapf.robust_train import finetune_macer, train_advppo
from robust_mapf.smoothing_cert import radius_pool

logger = logging.getLogger(__name__)

LOG_FORMAT = r"%(asctime)-15s %(levelname)s %(name)s %(funcName)s:%(lineno)d %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

REPORT_FILENAME = "report.json"
CERT_FILENAME = "cert.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory, resolved config and manifest bookkeeping of one invocation."""

    def __init__(self, mode: str, cfg: RunConfig, out: Path, jobs: Optional[int]) -> None:
        self.mode = mode
        self.cfg = cfg
        self.out = out
        self.jobs = default_jobs() if jobs is None else jobs
        self.inputs: Dict[str, Dict[str, str]] = {}
        self.outputs: Dict[str, Dict[str, str]] = {}
        self.extra: Dict[str, Any] = {}
        self.started = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def input(self, name: str, path: Path) -> Path:
        if not path.is_file():
            raise FileNotFoundError(f"{name} not found: {path}")
        self.inputs[name] = {"path": str(path), "sha256": _sha256(path)}
        return path

    def output(self, name: str, path: Path) -> Path:
        self.outputs[name] = {"path": str(path), "sha256": _sha256(path)}
        return path

    def write_json(self, name: str, doc: Any) -> Path:
        path = self.path(name)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return self.output(name, path)

    def save_net(self, name: str, net: torch.nn.Module) -> Path:
        path = self.path(name)
        save_checkpoint(net, path)  # type: ignore[arg-type]
        return self.output(name, path)

    def finish(self) -> Path:
        manifest = {
            "mode": self.mode,
            "config": to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg.seed,
            "jobs": self.jobs,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "torch_version": torch.__version__,
            "wall_time_s": round(time.perf_counter() - self.started, 3),
            **self.extra,
        }
        path = self.out / MANIFEST_FILENAME
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.info("%s finished in %.1fs; manifest %s", self.mode, manifest["wall_time_s"], path)
        return path


def _named_paths(items: Sequence[str]) -> List[Tuple[str, Path]]:
    pairs = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        pairs.append((name, Path(path)))
    return pairs


def cmd_train_baseline(run: Run, args: argparse.Namespace) -> None:
    cfg = run.cfg
    net = init_params(cfg.seed)
    log = TrainingLog(run.path(LOG_FILENAME))
    train_ppo(net, cfg.env, cfg.ppo, cfg.seed, iterations=cfg.iterations, log=log, jobs=run.jobs)
    run.output(LOG_FILENAME, run.path(LOG_FILENAME))
    run.save_net("baseline.grpn", net)


def cmd_train_advppo(run: Run, args: argparse.Namespace) -> None:
    cfg = run.cfg
    baseline = run.input("baseline", Path(args.baseline))
    log = TrainingLog(run.path(LOG_FILENAME))
    result = train_advppo(
        baseline, cfg.env, cfg.adv, cfg.ppo, cfg.iterations, cfg.seed, log=log, jobs=run.jobs
    )
    run.output(LOG_FILENAME, run.path(LOG_FILENAME))
    run.save_net("advppo.grpn", result.net)
    run.save_net("advppo_final.grpn", result.final_net)
    run.extra["selector"] = {"iteration": result.best_iteration, "score": result.best_score}


def cmd_finetune_macer(run: Run, args: argparse.Namespace) -> None:
    cfg = run.cfg
    start = run.input("start", Path(args.start))
    baseline = run.input("baseline", Path(args.baseline)) if args.baseline else None
    log = TrainingLog(run.path(LOG_FILENAME))
    result = finetune_macer(
        start,
        cfg.env,
        cfg.macer,
        cfg.adv,
        cfg.ppo,
        cfg.seed,
        baseline=baseline,
        log=log,
        jobs=run.jobs,
        continue_advppo=args.continue_advppo,
    )
    run.output(LOG_FILENAME, run.path(LOG_FILENAME))
    name = "advppo_continued" if args.continue_advppo else "macer"
    run.save_net(f"{name}.grpn", result.net)
    run.save_net(f"{name}_final.grpn", result.final_net)
    collapsed = [r["iter"] for r in result.records if r["entropy_collapse"]]
    run.extra["selector"] = {"iteration": result.best_iteration, "score": result.best_score}
    run.extra["entropy_collapse_iterations"] = collapsed


def cmd_eval_grid(run: Run, args: argparse.Namespace) -> None:
    cfg = run.cfg
    checkpoint = run.input("checkpoint", Path(args.checkpoint))
    net = load_checkpoint(checkpoint)
    source = None
    if args.source:
        source = load_checkpoint(run.input("source", Path(args.source)))
    metadata = {
        "checkpoint_sha256": checkpoint_hash(checkpoint),
        "config_hash": config_hash(cfg),
        "attack_source": AttackSource.FROZEN_BASELINE.value if source else AttackSource.DEFENDER.value,
    }
    report = run_grid(net, cfg.env, cfg.eval, source=source, jobs=run.jobs, metadata=metadata)
    if args.cert_report:
        cert = json.loads(run.input("cert_report", Path(args.cert_report)).read_text())
        report.certified_radius = float(cert["mean_radius"])
    report.write_json(run.path(REPORT_FILENAME))
    report.write_csv(run.path("report.csv"))
    run.output(REPORT_FILENAME, run.path(REPORT_FILENAME))
    run.output("report.csv", run.path("report.csv"))


def cmd_eval_pgd5(run: Run, args: argparse.Namespace) -> None:
    cfg = run.cfg
    net = load_checkpoint(run.input("checkpoint", Path(args.checkpoint)))
    results = multi_restart_pgd(net, cfg.env, cfg.eval, jobs=run.jobs)
    run.write_json("pgd_restarts.json", {"restarts": cfg.eval.restarts, "cells": [r.to_dict() for r in results]})


def cmd_certify(run: Run, args: argparse.Namespace) -> None:
    from robust_mapf.figures import certification_curves

    cfg = run.cfg
    net = load_checkpoint(run.input("checkpoint", Path(args.checkpoint)))
    report = radius_pool(net, cfg.env, cfg.cert, seed=cfg.seed, jobs=run.jobs)
    run.write_json(CERT_FILENAME, report)
    run.output("cert.svg", certification_curves({Path(args.checkpoint).stem: report}, run.path("cert.svg")))


def _attack_from_args(args: argparse.Namespace, cfg: RunConfig) -> AttackSpec:
    kind = AttackKind(args.attack)
    value = args.strength
    if kind in (AttackKind.FGSM, AttackKind.PGD):
        return AttackSpec(kind, eps=value, steps=cfg.eval.pgd_steps)
    if kind is AttackKind.GAUSSIAN:
        return AttackSpec(kind, sigma=value)
    if kind is AttackKind.NONE:
        return AttackSpec()
    return AttackSpec(kind, rate=value)


def cmd_storyboard(run: Run, args: argparse.Namespace) -> None:
    from robust_mapf.figures import storyboard_strip

    cfg = run.cfg
    policies = {
        name: load_checkpoint(run.input(name, path)) for name, path in _named_paths(args.checkpoint)
    }
    spec = _attack_from_args(args, cfg)
    doc = storyboard_capture(policies, cfg.env, cfg.storyboard_seed, spec)
    run.write_json("storyboard.json", doc)
    run.output("storyboard.svg", storyboard_strip(doc, run.path("storyboard.svg")))


def cmd_report(run: Run, args: argparse.Namespace) -> None:
    from robust_mapf import figures

    methods: Dict[str, List[Path]] = {}
    for item in args.method:
        name, sep, dirs = item.partition("=")
        if not sep or not dirs:
            raise ConfigValidationError("method", f"expected NAME=DIR[,DIR...], got {item!r}")
        methods[name] = [Path(d) for d in dirs.split(",")]

    summaries, firsts, certs, logs = {}, {}, {}, {}
    for name, dirs in methods.items():
        reports = []
        for i, d in enumerate(dirs):
            report = EvalReport.read_json(run.input(f"{name}[{i}]", d / REPORT_FILENAME))
            cert_path = d / CERT_FILENAME
            if cert_path.is_file():
                cert = json.loads(cert_path.read_text())
                if report.certified_radius is None:
                    report.certified_radius = float(cert["mean_radius"])
                certs.setdefault(name, cert)
            if (d / LOG_FILENAME).is_file():
                logs.setdefault(name, TrainingLog.read(d / LOG_FILENAME))
            reports.append(report)
        summaries[name] = aggregate_seeds(reports)
        firsts[name] = reports[0]

    run.write_json("summary.json", summaries)
    run.output("headline.csv", figures.headline_table(summaries, run.path("headline.csv")))
    run.output("per_attack.svg", figures.per_attack_curves(firsts, run.path("per_attack.svg")))
    run.output("tradeoff.svg", figures.tradeoff_scatter(firsts, run.path("tradeoff.svg")))
    if certs:
        run.output("certified.svg", figures.certification_curves(certs, run.path("certified.svg")))
    if logs:
        run.output("training.svg", figures.training_curves(logs, run.path("training.svg")))


def cmd_compare(run: Run, args: argparse.Namespace) -> None:
    a = EvalReport.read_json(run.input("a", Path(args.a)))
    b = EvalReport.read_json(run.input("b", Path(args.b)))
    result = compare_reports(a, b, resamples=run.cfg.eval.bootstrap_resamples, seed=run.cfg.seed)
    run.write_json("compare.json", result.to_dict())
    print(
        f"gap {100 * result.gap:+.2f} pp, 95% CI [{100 * result.ci_low:+.2f}, {100 * result.ci_high:+.2f}]"
    )


def cmd_serve_progress(run: Run, args: argparse.Namespace) -> None:
    try:
        import uvicorn
    except ImportError as e:
        raise RuntimeError("serve-progress needs the server extra: pip install robust-mapf[server]") from e
    from robust_mapf.progress import create_app, install_exit_hook

    install_exit_hook()
    uvicorn.run(create_app(args.run_dir, poll_interval=args.poll_interval), host=args.host, port=args.port)


COMMANDS: Dict[str, Callable[[Run, argparse.Namespace], None]] = {
    "train-baseline": cmd_train_baseline,
    "train-advppo": cmd_train_advppo,
    "finetune-macer": cmd_finetune_macer,
    "eval-grid": cmd_eval_grid,
    "eval-pgd5": cmd_eval_pgd5,
    "certify": cmd_certify,
    "storyboard": cmd_storyboard,
    "report": cmd_report,
    "compare": cmd_compare,
    "serve-progress": cmd_serve_progress,
}
NO_MANIFEST = ("serve-progress",)


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}") from None
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {number}")
    return number


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config field, e.g. --set ppo.lr=1e-4 (repeatable)",
    )
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory (default runs/<mode>)")
    parser.add_argument("--jobs", type=_positive_int, help="worker threads (default: all cores)")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-mapf", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("train-baseline", help="train the PPO baseline")
    _common(p)

    p = sub.add_parser("train-advppo", help="Adv-PPO from a baseline checkpoint")
    p.add_argument("--baseline", required=True)
    _common(p)

    p = sub.add_parser("finetune-macer", help="MACER fine-tune of an Adv-PPO checkpoint")
    p.add_argument("--start", required=True, help="Adv-PPO checkpoint to fine-tune")
    p.add_argument("--baseline", help="frozen attack source (default: the start checkpoint)")
    p.add_argument("--continue-advppo", action="store_true", help="same schedule without the hinge step")
    _common(p)

    p = sub.add_parser("eval-grid", help="attacked evaluation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", help="compute FGSM/PGD on this network (transfer attacks)")
    p.add_argument("--cert-report", help="cert.json whose mean radius goes into the report")
    _common(p)

    p = sub.add_parser("eval-pgd5", help="worst-of-restarts PGD")
    p.add_argument("--checkpoint", required=True)
    _common(p)

    p = sub.add_parser("certify", help="randomized-smoothing radius pool")
    p.add_argument("--checkpoint", required=True)
    _common(p)

    p = sub.add_parser("storyboard", help="per-step trace of one attacked episode")
    p.add_argument("--checkpoint", required=True, action="append", metavar="NAME=PATH")
    p.add_argument("--attack", default="fgsm", choices=[k.value for k in AttackKind])
    p.add_argument("--strength", type=float, default=0.20)
    _common(p)

    p = sub.add_parser("report", help="cross-seed tables and figures")
    p.add_argument("--method", required=True, action="append", metavar="NAME=DIR[,DIR...]")
    _common(p)

    p = sub.add_parser("compare", help="paired bootstrap of two eval-grid reports")
    p.add_argument("a")
    p.add_argument("b")
    _common(p)

    p = sub.add_parser("serve-progress", help="stream a run's training log over SSE")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--poll-interval", type=float, default=1.0)
    _common(p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=args.log_level, datefmt=DATE_FORMAT)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigValidationError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_VALIDATION
    if args.print_config:
        print(json.dumps(json.loads(canonical_json(cfg)), indent=2, sort_keys=True))
        return EXIT_OK

    torch.set_num_threads(1)
    out = Path(args.out) if args.out else Path("runs") / args.mode
    try:
        if args.mode in NO_MANIFEST:
            COMMANDS[args.mode](None, args)  # type: ignore[arg-type]
            return EXIT_OK
        run = Run(args.mode, cfg, out, args.jobs)
        COMMANDS[args.mode](run, args)
        run.finish()
    except ConfigValidationError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_VALIDATION
    except Exception:
        logger.exception("%s failed", args.mode)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
