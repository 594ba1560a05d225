"""Shared input validation helpers and error types.

Every public entry point funnels its array arguments through these checks so
that shape and finiteness problems surface as typed errors at the boundary
instead of as NaN propagation deep inside a run.
"""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class DimensionError(ValueError):
    """An array argument has the wrong shape or length."""


class NumericFailure(RuntimeError):
    """A numerical operation produced non-finite values or lost positive definiteness."""


class TrainingDiverged(NumericFailure):
    """Offline training loss exploded past the divergence guard."""


class SimulationBlowUp(NumericFailure):
    """Plant integration produced a non-finite state."""


def as_vector(x, n: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a finite float64 1-D array, optionally of length n."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"{name} must have length {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, shape: tuple[int | None, int | None] = (None, None), name: str = "x") -> np.ndarray:
    """Coerce to a finite float64 2-D array with optional per-axis size checks."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    for axis, want in enumerate(shape):
        if want is not None and arr.shape[axis] != want:
            raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"{name} contains non-finite entries")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericFailure(f"{name} contains non-finite entries")
    return arr


def check_positive(value: float, name: str = "value") -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ConfigError(f"{name} must be a positive finite number, got {value}")
    return value


def check_unit_interval(value: float, name: str = "value") -> float:
    """Check value lies strictly inside (0, 1)."""
    value = float(value)
    if not np.isfinite(value) or not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie strictly in (0, 1), got {value}")
    return value
