"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_matrix(X, n_features: int | None = None, name: str = "X") -> np.ndarray:
    """2-D finite float64 array, optionally with a fixed column count."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True, input_name=name)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_keypoints(kp, n_keypoints: int | None = None) -> np.ndarray:
    """``(N, K, 3)`` keypoints with confidences in [0, 1]."""
    kp = np.asarray(kp, dtype=np.float64)
    if kp.ndim != 3 or kp.shape[-1] != 3:
        raise ValueError(f"keypoints must have shape (N, K, 3), got {kp.shape}")
    if n_keypoints is not None and kp.shape[1] != n_keypoints:
        raise ValueError(f"expected {n_keypoints} keypoints, got {kp.shape[1]}")
    if not np.all(np.isfinite(kp)):
        raise ValueError("keypoints must be finite")
    conf = kp[..., 2]
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("keypoint confidences must lie in [0, 1]")
    return kp


def check_scalar_range(value, name: str, lo=None, hi=None, lo_open=False) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ValueError(f"{name}={value} below allowed minimum {lo}")
    if hi is not None and value > hi:
        raise ValueError(f"{name}={value} above allowed maximum {hi}")
    return value
