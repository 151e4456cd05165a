"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .core import N_CLASSES


def check_signals(X, M: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape ``(n_segments, M)``."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if M is not None and X.shape[1] != M:
        raise ValueError(f"expected segments of length M={M}, got {X.shape[1]}")
    return X


def check_labels(y, n: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be a 1-D array")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} segments")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class ids")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
        raise ValueError(f"labels must lie in [0, {N_CLASSES})")
    return y.astype(np.int64)
