"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array


def check_images(X, image_shape=None) -> np.ndarray:
    """Return ``X`` as float32 NCHW.

    Accepts a 4-D array, or a 2-D array of flattened images together with
    ``image_shape = (C, H, W)``.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat input needs image_shape=(C, H, W)")
        c, h, w = image_shape
        if X.shape[1] != c * h * w:
            raise ValueError(f"expected {c * h * w} features per sample for image_shape {tuple(image_shape)}, "
                             f"got {X.shape[1]}")
        return X.reshape(len(X), c, h, w)
    if X.ndim != 4:
        raise ValueError(f"expected NCHW images or flat rows, got an array of shape {X.shape}")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"image shape {X.shape[1:]} does not match image_shape {tuple(image_shape)}")
    return X


def check_targets(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode ``y`` as ``0..C-1``; returns ``(classes, encoded)``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ValueError(f"X has {n_samples} samples but y has {len(y)}")
    classes = unique_labels(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return classes, np.searchsorted(classes, y).astype(np.int64)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name: str, allow_zero: bool = False) -> float:
    v = float(value)
    lo_ok = v >= 0 if allow_zero else v > 0
    if not (lo_ok and v <= 1):
        raise ValueError(f"{name} must lie in {'[0' if allow_zero else '(0'}, 1], got {value!r}")
    return v


def check_seed(value) -> int:
    if value is None:
        return 0
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 0:
        raise ValueError(f"random_state must be a non-negative integer or None, got {value!r}")
    return int(value)
