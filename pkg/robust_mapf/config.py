"""
Run configuration: one frozen dataclass per concern, loaded from JSON and
``--set section.field=value`` overrides, hashed for the run manifest.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

from robust_mapf.eval_harness import EvalConfig
from robust_mapf.grid_env import EnvConfig
from robust_mapf.ppo_core import PPOConfig
from robust_mapf.robust_train import AdvConfig, MacerConfig
from robust_mapf.smoothing_cert import CertConfig

logger = logging.getLogger(__name__)


class ConfigValidationError(ValueError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


SECTIONS = {
    "env": EnvConfig,
    "ppo": PPOConfig,
    "adv": AdvConfig,
    "macer": MacerConfig,
    "cert": CertConfig,
    "eval": EvalConfig,
}
SCALARS = ("seed", "iterations", "storyboard_seed")
MANIFEST_FILENAME = "manifest.json"


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    adv: AdvConfig = field(default_factory=AdvConfig)
    macer: MacerConfig = field(default_factory=MacerConfig)
    cert: CertConfig = field(default_factory=CertConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 42
    iterations: int = 600
    storyboard_seed: int = 2000

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigValidationError("iterations", "must be at least 1")


def to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def from_dict(doc: Dict[str, Any]) -> RunConfig:
    unknown = set(doc) - set(SECTIONS) - set(SCALARS)
    if unknown:
        raise ConfigValidationError(sorted(unknown)[0], "unknown configuration key")
    kwargs: Dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigValidationError(name, "expected an object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigValidationError(f"{name}.{key}", "unknown field")
        try:
            kwargs[name] = cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigValidationError(name, str(e)) from e
    for name in SCALARS:
        if name in doc:
            value = doc[name]
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigValidationError(name, f"expected an integer, got {value!r}")
            kwargs[name] = value
    return RunConfig(**kwargs)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``key=value`` or ``section.key=value`` overrides to a config document."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigValidationError(item, "override must look like key=value")
        path = key.strip().split(".")
        if len(path) > 2:
            raise ConfigValidationError(key, "overrides nest at most one level")
        target = doc
        if len(path) == 2:
            target = doc.setdefault(path[0], {})
            if not isinstance(target, dict):
                raise ConfigValidationError(path[0], "expected an object")
        target[path[-1]] = _parse_value(raw.strip())
    return doc


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    doc = to_dict(RunConfig())
    if path is not None:
        path = Path(path)
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigValidationError(str(path), f"invalid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigValidationError(str(path), "expected a JSON object")
        for key, value in loaded.items():
            if key in SECTIONS and isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key].update(value)
            else:
                doc[key] = value
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    cfg = from_dict(doc)
    logger.debug("resolved config %s", config_hash(cfg)[:12])
    return cfg


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
