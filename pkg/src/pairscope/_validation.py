"""Input validation helpers used throughout the package."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_in_unit_interval(value, name):
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_array(a, name, ndim=None, nonnegative=False):
    a = np.asarray(a)
    if ndim is not None and a.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    if nonnegative and a.size and a.min() < 0:
        raise ValidationError(f"{name} must be >= 0 elementwise")
    return a


def check_same_shape(a, b, name_a, name_b):
    if np.shape(a) != np.shape(b):
        raise ValidationError(
            f"{name_a} shape {np.shape(a)} does not match {name_b} shape {np.shape(b)}"
        )


def check_frames(X, name="frames"):
    """Coerce the input to a (n_frames, height, width) array.

    Accepts any array-like with three axes. Used by estimators that consume
    detector frame stacks.
    """
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValidationError(f"{name} must be a (n_frames, height, width) array, got shape {X.shape}")
    if X.shape[0] < 1:
        raise ValidationError(f"{name} must contain at least one frame")
    return X
