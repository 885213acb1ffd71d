"""
Run configuration: one JSON file with the sections world, model, loss, train
and eval, plus `section.key=value` overrides from the command line.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import pydantic
from pydantic import BaseModel, ConfigDict

from lmr.errors import ConfigError
from lmr.evaluator import EvalOptions
from lmr.feature_io import PathLike
from lmr.model import ModelConfig
from lmr.objectives import LossWeights
from lmr.synthetic_world import WorldConfig
from lmr.trainer import TrainConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "LMR_THREADS"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    world: WorldConfig = WorldConfig()
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()
    eval: EvalOptions = EvalOptions()


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: Dict[str, Any], override: str) -> None:
    """Apply one `section.key=value` override in place; nested keys use more dots."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not of the form section.key=value")
    dotted, value = override.split("=", 1)
    keys = dotted.strip().split(".")
    if len(keys) < 2 or not all(keys):
        raise ConfigError(f"override {override!r} must name section.key")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {override!r} descends into a non-object value")
    node[keys[-1]] = _parse_value(value)


def load_run_config(path: Optional[PathLike] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Defaults, then the JSON file, then the overrides, validated as a whole.

    Raises:
        ConfigError: the file is unreadable or any section fails validation.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e.msg} at line {e.lineno}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for override in overrides:
        apply_override(data, override)
    try:
        return RunConfig(**data)
    except pydantic.ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid configuration at {location}: {first['msg']}") from e


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2)


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:12]


def write_effective_config(cfg: RunConfig, out_dir: PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"effective_config_{config_digest(cfg)}.json"
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(cfg) + "\n")
    return path


def thread_count() -> int:
    raw = os.getenv(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads
