"""Key-value config files: one `key = value` per line, `#` starts a comment.

Unknown keys are rejected by name; missing keys take the documented defaults
baked into TrainConfig / SyntheticSpec.
"""

from __future__ import annotations

from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError, InvalidSpecError
from .trainer import TrainConfig


def parse_keyvalue(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    raise ConfigError(f"key {key!r}: expected true or false, got {value!r}")


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {value!r} is not a number") from exc


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {value!r} is not an integer") from exc


def _parse_float_list(key: str, value: str) -> tuple[float, ...]:
    if not value:
        return ()
    return tuple(_parse_float(key, part.strip()) for part in value.split(","))


def _parse_int_list(key: str, value: str) -> tuple[int, ...]:
    if not value:
        return ()
    return tuple(_parse_int(key, part.strip()) for part in value.split(","))


_TRAIN_PARSERS = {
    "tau": _parse_float,
    "kappa": _parse_float,
    "queue_size": _parse_int,
    "ema_momentum": _parse_float,
    "batch_size": _parse_int,
    "epochs": _parse_int,
    "lr_initial": _parse_float,
    "lr_milestones": _parse_float_list,
    "lr_decay": _parse_float,
    "sgd_momentum": _parse_float,
    "weight_decay": _parse_float,
    "seed": _parse_int,
    "num_clusters": _parse_int,
    "embed_dim": _parse_int,
    "hidden_widths": _parse_int_list,
    "a3_uniform_gating": _parse_bool,
    "a4_single_head": _parse_bool,
    "a5_no_class_term": _parse_bool,
    "detach_posterior": _parse_bool,
    "aug_sigma": _parse_float,
    "aug_rho": _parse_float,
}

_SPEC_PARSERS = {
    "num_clusters": _parse_int,
    "input_dim": _parse_int,
    "points_per_cluster": _parse_int,
    "concentration": _parse_float,
    "seed": _parse_int,
}


def load_config(path) -> TrainConfig:
    """Training config from a key-value file; unknown keys are an error."""
    raw = parse_keyvalue(path)
    kwargs = {}
    for key, value in raw.items():
        parser = _TRAIN_PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = parser(key, value)
    return TrainConfig(**kwargs)


def load_synthetic_spec(path) -> SyntheticSpec:
    """Synthetic dataset spec from a key-value file; unknown keys are an error."""
    raw = parse_keyvalue(path)
    kwargs = {}
    for key, value in raw.items():
        parser = _SPEC_PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"unknown spec key {key!r}")
        kwargs[key] = parser(key, value)
    try:
        return SyntheticSpec(**kwargs)
    except TypeError as exc:
        raise InvalidSpecError(str(exc)) from exc
