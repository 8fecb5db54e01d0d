"""Plain-text ``key=value`` run configuration with typed keys."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

from .errors import ConfigError


def _opt_int(v):
    return None if str(v).lower() in ("", "none") else int(v)


# key -> parser; anything else is rejected
RUN_KEYS = {
    # model
    "fusion": str,
    "word_emb_dim": int,
    "visual_raw_dim": _opt_int,
    "visual_emb_dim": int,
    "lstm_units": int,
    "projection_dim": int,
    "linear_dim": _opt_int,
    "unroll_max": int,
    # training
    "optimizer": str,
    "learning_rate": float,
    "batch_size": int,
    "dev_fraction": float,
    "patience": int,
    "max_epochs": int,
    "clip_lstm": float,
    "clip_other": float,
    "seed": int,
    "threads": int,
    "shard_size": int,
    # paths
    "manifest": str,
    "dev_manifest": str,
    "vocab": str,
    "out": str,
}

MODEL_KEYS = ("fusion", "word_emb_dim", "visual_raw_dim", "visual_emb_dim", "lstm_units",
              "projection_dim", "linear_dim", "unroll_max")
TRAIN_KEYS = ("optimizer", "learning_rate", "batch_size", "dev_fraction", "patience",
              "max_epochs", "clip_lstm", "clip_other", "seed", "threads", "shard_size")


def parse_kv(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve(file_values: Mapping[str, str], overrides: Mapping[str, object]) -> dict:
    """Merge config-file strings with already-typed overrides (overrides win)."""
    unknown = sorted(set(file_values) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for key, raw in file_values.items():
        try:
            resolved[key] = RUN_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    for key, value in overrides.items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            resolved[key] = value
    return resolved


def load_run_config(path, overrides: Mapping[str, object] | None = None) -> dict:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_kv(text, str(path))
    return resolve(values, overrides or {})


def dump(resolved: Mapping[str, object]) -> str:
    return "".join(f"{k}={resolved[k]}\n" for k in sorted(resolved))
