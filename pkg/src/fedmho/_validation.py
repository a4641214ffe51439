"""Exception types and small input checks shared across the package."""

import numpy as np


class DimensionError(ValueError):
    """Array shapes do not conform."""


class ValidationError(ValueError):
    """An argument is outside its documented domain."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary/text layout."""


def as_float_array(x, ndim=None, name="array"):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


def check_labels(labels, n_classes, name="labels"):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValidationError(f"{name} must be integer class indices")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(
            f"{name} must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def check_unit_interval(x, name="X"):
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValidationError(f"{name} entries must lie in [0, 1]")
    return x


def check_pair(X, y, n_classes):
    """Validate a (samples, labels) pair and return them as float64 / int64."""
    X = as_float_array(X, ndim=2, name="X")
    y = check_labels(y, n_classes, name="y")
    if X.shape[0] != y.shape[0]:
        raise DimensionError(
            f"X has {X.shape[0]} rows but y has {y.shape[0]} labels"
        )
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains NaN or Inf")
    return X, y
