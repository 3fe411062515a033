"""Input checks shared by the estimator wrapper."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeError


def check_clips(X, n_frames: int) -> np.ndarray:
    """Coerce ``X`` to float32 (n_clips, n_frames, 3, H, W); a single 4-D clip is promoted."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1] != n_frames or X.shape[2] != 3:
        raise ShapeError(f"expected clips of shape (n, {n_frames}, 3, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    return X


def check_targets(y, X: np.ndarray, scale: int = 4) -> np.ndarray:
    """Coerce ``y`` to float32 (n_clips, 3, scale*H, scale*W) matching ``X``."""
    y = check_array(y, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if y.ndim == 3:
        y = y[None]
    n, _, _, h, w = X.shape
    if y.shape != (n, 3, scale * h, scale * w):
        raise ShapeError(f"targets must be {(n, 3, scale * h, scale * w)}, got {y.shape}")
    return y
