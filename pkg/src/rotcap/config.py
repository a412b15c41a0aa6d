"""Flat ``key = value`` config files and seeded randomness plumbing.

One config format is shared by preprocessing and training.  All randomness
flows from a single command-level seed through named child seeds so that
data generation, parameter init, and batch sampling are independently
reproducible.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigError


def parse_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file into a string dict.

    Blank lines and ``#`` comments are ignored.  Malformed lines raise
    ConfigError with the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def get_float(cfg: dict[str, str], key: str, default: float) -> float:
    if key not in cfg:
        return default
    try:
        value = float(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r}: not a number: {cfg[key]!r}") from None
    if not np.isfinite(value):
        raise ConfigError(f"config key {key!r}: must be finite, got {cfg[key]!r}")
    return value


def get_int(cfg: dict[str, str], key: str, default: int) -> int:
    if key not in cfg:
        return default
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r}: not an integer: {cfg[key]!r}") from None


def get_triple(cfg: dict[str, str], key: str, default: tuple[float, float, float]) -> tuple[float, float, float]:
    if key not in cfg:
        return default
    parts = [p for p in cfg[key].replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ConfigError(f"config key {key!r}: expected 3 comma-separated numbers")
    try:
        a, b, c = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"config key {key!r}: not numeric: {cfg[key]!r}") from None
    for v in (a, b, c):
        if not np.isfinite(v):
            raise ConfigError(f"config key {key!r}: must be finite")
    return (a, b, c)


def derive_seed(master: int, name: str) -> int:
    """Stable child seed for a named randomness stream."""
    digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def new_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def dump_effective_config(path: str | Path, values: dict) -> None:
    """Write the resolved settings of a run, one ``key = value`` per line."""
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
