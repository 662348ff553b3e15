"""Input validation helpers used at API boundaries.

Every public entry point funnels its array-like inputs through these so that
shape or finiteness problems surface with a clear message instead of deep
inside a numpy call.
"""

import numpy as np

from .errors import DegenerateInput, NonFiniteError, ShapeMismatch


def as_float_array(x, name="x", dtype=np.float64):
    """Coerce to a float ndarray and reject NaN/Inf."""
    arr = np.asarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf values")
    return arr


def check_1d(x, name="x", min_len=1, dtype=np.float64):
    arr = as_float_array(x, name, dtype)
    if arr.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] < min_len:
        raise ShapeMismatch(f"{name} needs at least {min_len} samples, got {arr.shape[0]}")
    return arr


def check_mixture_batch(X, name="X", dtype=np.float32):
    """Validate a batch of mixtures; accepts (T,) or (n, T), returns (n, T)."""
    arr = as_float_array(X, name, dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be (T,) or (n_samples, T), got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ShapeMismatch(f"{name} has zero-length signals")
    return arr


def check_target_batch(y, n_samples, n_sources, length, name="y", dtype=np.float32):
    """Validate training targets of shape (n_samples, n_sources, T)."""
    arr = as_float_array(y, name, dtype)
    if arr.ndim != 3 or arr.shape != (n_samples, n_sources, length):
        raise ShapeMismatch(
            f"{name} must have shape ({n_samples}, {n_sources}, {length}), got {arr.shape}"
        )
    return arr


def check_positive(value, name):
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def check_not_silent(x, name="x"):
    """Reject all-zero signals where a power normalization would divide by zero."""
    if not np.any(x):
        raise DegenerateInput(f"{name} is all zero")
    return x


def check_same_length(*arrays, names=None):
    lengths = [np.shape(a)[-1] for a in arrays]
    if len(set(lengths)) > 1:
        labels = names or [f"arg{i}" for i in range(len(arrays))]
        detail = ", ".join(f"{n}={l}" for n, l in zip(labels, lengths))
        raise ShapeMismatch(f"length mismatch: {detail}")
    return lengths[0]
