"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numbers

import numpy as np

from .exceptions import ConfigError


def check_rng(seed=None):
    """Turn ``seed`` into a ``numpy.random.Generator``.

    Accepts ``None``, an int, a ``SeedSequence`` or an existing generator,
    which is returned unchanged.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a Generator from {type(seed).__name__}")


def check_states(x, n_dim=None, name="states"):
    """Return ``x`` as a 2-D float array of shape (n, n_dim)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, n_dim or 0)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_dim is not None and arr.shape[1] != n_dim:
        raise ValueError(f"{name} must have {n_dim} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_probability(p, name="probability"):
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_positive(value, name, strict=True):
    value = float(value)
    if strict and not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    if not strict and value < 0:
        raise ValueError(f"{name} must be non-negative, got {value}")
    return value


def check_measurement(z, n_sensors):
    z = np.asarray(z, dtype=float).ravel()
    if z.shape[0] != n_sensors:
        raise ValueError(f"measurement has {z.shape[0]} entries, expected {n_sensors}")
    return z


def require_field(mapping, key, kind=None, where="config"):
    """Fetch ``mapping[key]``, raising ``ConfigError`` naming the field."""
    if key not in mapping:
        raise ConfigError(f"{where}: missing field '{key}'")
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}: field '{key}' has type {type(value).__name__}")
    return value
