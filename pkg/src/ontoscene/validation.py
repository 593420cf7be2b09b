"""Argument and input checks shared by the estimator and the CLI."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid user-supplied configuration (bad key, value or path)."""


def check_fraction(value, name: str, closed_low: bool = True) -> float:
    v = float(value)
    ok = (0.0 <= v if closed_low else 0.0 < v) and v <= 1.0
    if not ok or not np.isfinite(v):
        lo = "[0" if closed_low else "(0"
        raise ConfigError(f"{name} must lie in {lo}, 1], got {value!r}")
    return v


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_choice(value, name: str, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {list(choices)}, got {value!r}")
    return value


def check_probabilities(probs, atol: float = 1e-9) -> np.ndarray:
    """2-D array of non-negative rows summing to one."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected a 2-D probability matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < -atol):
        raise ValueError("probabilities must be finite and non-negative")
    if not np.allclose(p.sum(axis=1), 1.0, atol=atol, rtol=0):
        raise ValueError("probability rows must sum to 1")
    return p


def check_keys(d: dict, allowed: Sequence[str], where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def check_readable(path, what: str = "file") -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    if not os.access(p, os.R_OK):
        raise ConfigError(f"{what} is not readable: {p}")
    return p


def check_writable_target(path, what: str = "output") -> Path:
    """The file's directory must exist (or be creatable) and be writable."""
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    probe = parent
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ConfigError(f"{what} location is not writable: {p}")
    return p


def check_writable_dir(path, what: str = "output directory") -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"{what} exists and is not a directory: {p}")
    check_writable_target(p / "probe", what)
    return p
