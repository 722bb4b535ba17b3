"""JSON run configuration.

A config file is one JSON object with optional sections::

    {
      "train":   {TrainConfig fields},
      "weights": {"w_bloch": 0.01, "w_data": 1.0},
      "lsq":     {LsqOptions fields},
      "mask":    {"threshold_frac": 0.05},
      "threads": 1
    }

Missing keys take the dataclass defaults; :func:`load_run_config` reports
which ones so the run manifest can record them. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

CONFIG_DIR_ENV = "T2PINN_CONFIG_DIR"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _coerce(name: str, hint, value):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(name, inner[0], value)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            choices = ", ".join(m.value for m in hint)
            raise ConfigError(f"{name}: {value!r} is not one of {choices}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def build_dataclass(cls, d: dict, section: str):
    """Instantiate ``cls`` from ``d``, naming ``section.field`` on any error."""
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    extra = sorted(set(d) - names)
    if extra:
        raise ConfigError("unknown field(s): " + ", ".join(f"{section}.{k}" for k in extra))
    kwargs = {k: _coerce(f"{section}.{k}", hints[k], v) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def dataclass_to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = v.value if isinstance(v, Enum) else v
    return out


def missing_fields(cls, d: dict) -> list[str]:
    return [f.name for f in dataclasses.fields(cls) if f.init and f.name not in d]


@dataclass(frozen=True)
class MaskOptions:
    threshold_frac: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.threshold_frac < 1.0:
            raise ValueError(f"threshold_frac must be in [0, 1), got {self.threshold_frac}")


@dataclass
class RunConfig:
    train: object = None
    weights: object = None
    lsq: object = None
    mask: MaskOptions = field(default_factory=MaskOptions)
    threads: int = 1
    defaulted: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "weights": dataclass_to_dict(self.weights),
            "lsq": self.lsq.to_dict(),
            "mask": dataclass_to_dict(self.mask),
            "threads": self.threads,
        }


def parse_run_config(d: dict) -> RunConfig:
    from .lsq import LsqOptions
    from .trainer import LossWeights, TrainConfig

    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    extra = sorted(set(d) - {"train", "weights", "lsq", "mask", "threads"})
    if extra:
        raise ConfigError(f"config: unknown section(s) {extra}")
    defaulted = []
    sections = {}
    for key, cls in (("train", TrainConfig), ("weights", LossWeights), ("lsq", LsqOptions), ("mask", MaskOptions)):
        sub = d.get(key, {})
        sections[key] = build_dataclass(cls, sub, key)
        defaulted += [f"{key}.{n}" for n in missing_fields(cls, sub if isinstance(sub, dict) else {})]
    threads = d.get("threads", 1)
    if "threads" not in d:
        defaulted.append("threads")
    threads = _coerce("threads", int, threads)
    if threads < 1:
        raise ConfigError(f"threads: must be >= 1, got {threads}")
    return RunConfig(threads=threads, defaulted=defaulted, **sections)


def resolve_config_path(path: str | os.PathLike | None) -> Path | None:
    """Relative paths not found in the working directory are looked up in ``$T2PINN_CONFIG_DIR``."""
    if path is None:
        base = os.environ.get(CONFIG_DIR_ENV)
        if base and (Path(base) / "default.json").is_file():
            return Path(base) / "default.json"
        return None
    p = Path(path)
    if p.is_file() or p.is_absolute():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and (Path(base) / p).is_file():
        return Path(base) / p
    return p


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    resolved = resolve_config_path(path)
    if resolved is None:
        return parse_run_config({})
    try:
        d = json.loads(Path(resolved).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {resolved}: invalid JSON ({exc})") from None
    return parse_run_config(d)
