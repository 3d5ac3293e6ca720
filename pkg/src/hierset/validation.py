"""Input validation helpers used by the estimators and the functional core."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def as_float_matrix(values, name="values"):
    """Coerce to a 2-D float64 array with finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def as_labels(labels, n_classes, name="labels"):
    """Coerce class labels to a 1-D int array and check the range [0, n_classes)."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValidationError(f"{name} must be integer class indices")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValidationError(
            f"{name} out of range: expected [0, {n_classes}), "
            f"got [{arr.min()}, {arr.max()}]"
        )
    return arr


def as_binary_matrix(values, name="matrix"):
    """Coerce to a 2-D array of 0/1 integers."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must contain only 0/1 entries")
    return arr.astype(np.int8)


def as_selection(selection, n_features=None, name="selection"):
    """Coerce a binary selection vector; optionally check its length."""
    arr = np.asarray(selection)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must contain only 0/1 entries")
    arr = arr.astype(np.int8)
    if n_features is not None and arr.shape[0] != n_features:
        raise ValidationError(
            f"{name} has length {arr.shape[0]}, expected {n_features}"
        )
    return arr


def as_index_vector(indices, bound, name="indices"):
    """Coerce to a 1-D int array with entries in [0, bound)."""
    arr = np.asarray(indices, dtype=np.int64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() >= bound):
        raise ValidationError(f"{name} out of range [0, {bound})")
    return arr


def require(condition, message):
    """Raise ValidationError with ``message`` unless ``condition`` holds."""
    if not condition:
        raise ValidationError(message)
