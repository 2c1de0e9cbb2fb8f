"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def as_chw_batch(X, name="X"):
    """Coerce (n, H, W, 3) or (n, 3, H, W) image batches to float32 NCHW.

    Values must already live in [0, 1]; anything else is a caller bug we
    refuse to paper over.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must be a batch of images, got shape {arr.shape}")
    if arr.shape[1] == 3:
        pass
    elif arr.shape[-1] == 3:
        arr = np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
    else:
        raise ValueError(f"{name} must have 3 channels (first or last axis), "
                         f"got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_paired_batches(X, y):
    """Validate a (low-light, normal-light) training pair of batches."""
    low = as_chw_batch(X, "X")
    high = as_chw_batch(y, "y")
    if low.shape != high.shape:
        raise ValueError(f"X and y shapes disagree: {low.shape} vs {high.shape}")
    return low, high


def to_channel_last(batch):
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))
