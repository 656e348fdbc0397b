"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, InputError


def check_images(X, channels: int | None = None, stride: int | None = None,
                 dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a finite (N, H, W, C) float array.

    ``stride`` (if given) must divide H and W; ``channels`` must match C.
    """
    try:
        X = np.asarray(X, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise InputError(f"images must be numeric: {exc}") from exc
    if X.ndim != 4:
        raise DimensionError(f"images must have shape (N, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("got an empty image batch")
    if channels is not None and X.shape[3] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[3]} (shape {X.shape})")
    if stride is not None and (X.shape[1] % stride or X.shape[2] % stride):
        raise InputError(f"image size {X.shape[1]}x{X.shape[2]} must be a multiple of {stride}")
    if not np.all(np.isfinite(X)):
        raise InputError("images contain NaN or Inf")
    return X


def check_labels(y, n: int | None = None, classes: int | None = None) -> np.ndarray:
    """Return ``y`` as a 1-D int64 array of class ids in ``[0, classes)``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and len(y) != n:
        raise DimensionError(f"got {len(y)} labels for {n} images")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or (classes is not None and y.max() >= classes)):
        raise InputError(f"labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")
    return y
