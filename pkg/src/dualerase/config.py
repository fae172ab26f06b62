"""Run configuration: YAML in, fully materialized dataclasses out."""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackConfig
from .errors import ConfigError
from .toy.model import ToyConfig

ENV_OUTPUT_DIR = "DUALERASE_OUTPUT_DIR"
ENV_WORKERS = "DUALERASE_WORKERS"
BUNDLED_PREFIX = "bundled:"
DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class InputConfig:
    image: str | None = None
    mask: str | None = None
    mask_policy: str = "auto"
    color_tolerance: float = 0.1

    def __post_init__(self):
        if self.mask_policy not in ("auto", "alpha", "color"):
            raise ConfigError("input.mask_policy", f"must be auto, alpha or color, got {self.mask_policy!r}")
        if not 0 < self.color_tolerance < 1:
            raise ConfigError("input.color_tolerance", "must lie in (0, 1)")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy"
    weights: str | None = None
    toy: ToyConfig = field(default_factory=ToyConfig)

    def __post_init__(self):
        if self.kind != "toy":
            raise ConfigError("backend.kind", f"only the 'toy' backend ships with the toolkit, got {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    n_scenes: int = 64
    dataset_seed: int = 0
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    save_dataset: bool = True

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ConfigError("train.n_scenes", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr", "must be > 0")


@dataclass(frozen=True)
class GenConfig:
    n_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("gen.n_steps", "must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    generated: str | None = None
    ground_truth: str | None = None
    input_image: str | None = None
    defense: str | None = None
    cloud_generated: str | None = None
    cloud_ground_truth: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("eval.workers", "must be >= 1")


@dataclass(frozen=True)
class ProfileConfig:
    n_timesteps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_timesteps < 1:
            raise ConfigError("profile.n_timesteps", "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "runs/default"
    input: InputConfig = field(default_factory=InputConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_PATH_FIELDS = {
    "output_dir",
    "input.image",
    "input.mask",
    "backend.weights",
    "eval.generated",
    "eval.ground_truth",
    "eval.input_image",
    "eval.cloud_generated",
    "eval.cloud_ground_truth",
}


def _check_type(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, prefix: str, base_dir: Path | None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{prefix}{key}", "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{prefix}{f.name}"
        if f.name not in data:
            continue
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], f"{path}.", base_dir)
            continue
        value = _check_type(data[f.name], hint, path)
        if path in _PATH_FIELDS and value is not None:
            value = resolve_path(value, base_dir)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from exc


def resolve_path(value: str, base_dir: Path | None) -> str:
    if value.startswith(BUNDLED_PREFIX):
        return value
    p = Path(value).expanduser()
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return str(p.resolve()) if base_dir is not None else str(p)


def bundled_path(value: str) -> Path:
    """Map ``bundled:<name>`` onto the package data directory."""
    if value.startswith(BUNDLED_PREFIX):
        return DATA_DIR / value[len(BUNDLED_PREFIX) :]
    return Path(value)


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    if "manifest_version" in data:
        data = data["config"]
    return _build(RunConfig, data, "", base_dir)


def apply_env(config: RunConfig) -> RunConfig:
    out_dir = os.environ.get(ENV_OUTPUT_DIR)
    workers = os.environ.get(ENV_WORKERS)
    if out_dir:
        config = dataclasses.replace(config, output_dir=str(Path(out_dir).resolve()))
    if workers:
        try:
            n = int(workers)
        except ValueError:
            raise ConfigError(ENV_WORKERS, f"must be an integer, got {workers!r}") from None
        config = dataclasses.replace(config, eval=dataclasses.replace(config.eval, workers=n))
    return config


def load_config(path: str | Path, env: bool = True) -> RunConfig:
    """Parse a YAML config (or a run manifest) into a fully resolved RunConfig."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<config>", f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("<config>", f"cannot parse {path}: {exc}") from exc
    config = config_from_dict(data, path.parent.resolve())
    return apply_env(config) if env else config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def save_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dump_config(config))
    return path
