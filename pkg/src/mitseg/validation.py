"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_image_batch(X) -> np.ndarray:
    """Coerce to float32 [N, H, W, 3] in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DataError(f"expected images [N,H,W,3], got {X.shape}")
    if X.shape[0] == 0:
        raise DataError("empty image batch")
    if not np.isfinite(X).all():
        raise DataError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    return X


def check_label_batch(y, images: np.ndarray, num_classes: int) -> np.ndarray:
    """Coerce to integer [N, H, W] matching the image batch."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != images.shape[:3]:
        raise DataError(f"labels {y.shape} do not match images {images.shape[:3]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError(f"labels must be integers, got {y.dtype}")
    vals = y[y != 255]
    if vals.size and (vals.min() < 0 or vals.max() >= num_classes):
        raise DataError(f"label ids outside [0, {num_classes}) (255 = ignore)")
    return y
