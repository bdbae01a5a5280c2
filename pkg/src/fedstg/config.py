"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment.  Every key has a default; keys
that are not fields of :class:`RunConfig` are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .federated import FedConfig


class ConfigError(ValueError):
    """Malformed config text, unknown key or missing required key."""


@dataclass
class RunConfig(FedConfig):
    # data location for train / ablate / evaluate
    data_dir: str = ""
    # synthetic generator
    clients: int = 5
    nodes_per_client: int = 30
    steps: int = 2000
    slots_per_day: int = 288
    shared_strength: float = 1.0
    specific_strength: float = 1.0
    noise_std: float = 0.1
    feature_dim: int = 1
    # outputs
    embedding_samples: int = 32
    mape_eps: float = 1e-5
    # convergence sweep
    conv_clients: int = 5
    conv_dim_a: int = 64
    conv_dim_b: int = 2048
    conv_eta: float = 1.0
    conv_rounds: int = 100
    conv_conditioning: float = 10.0

    def fed(self) -> FedConfig:
        names = {f.name for f in fields(FedConfig)}
        return FedConfig(**{k: v for k, v in asdict(self).items() if k in names})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str, line: int):
    kind = _TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {line}: {key} expects {kind}, got {raw!r}") from None
    return raw


def parse_config(text: str, required: tuple[str, ...] = ()) -> RunConfig:
    values = {}
    for i, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {i}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {i}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {i}: duplicate key {key!r}")
        values[key] = _convert(key, raw, i)
    for key in required:
        if key not in values or values[key] == "":
            raise ConfigError(f"missing required key {key!r}")
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path, required: tuple[str, ...] = ()) -> RunConfig:
    return parse_config(Path(path).read_text(), required)


def format_config(cfg: RunConfig) -> str:
    """Canonical text form: every key, in field order."""
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
