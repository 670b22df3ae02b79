"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

__all__ = ["check_images", "check_labels", "check_masks", "check_codes"]


def check_images(X, name: str = "X", min_size: int = 16) -> np.ndarray:
    """Return ``X`` as a float32 N x H x W x C array in [-1, 1].

    uint8 input is rescaled from [0, 255]; float input must already lie in
    [-1, 1]. Grayscale N x H x W gains a channel axis.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be N x H x W x C images, got shape {X.shape}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    if min(X.shape[1:3]) < min_size:
        raise ValueError(f"{name}: images must be at least {min_size}x{min_size}, got {X.shape[1:3]}")
    if X.dtype == np.uint8:
        return (X.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
    if not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"{name} must be uint8 or floating point, got {X.dtype}")
    X = X.astype(np.float32)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    if X.min() < -1 - 1e-6 or X.max() > 1 + 1e-6:
        raise ValueError(f"{name}: float images must lie in [-1, 1], got [{X.min():.3g}, {X.max():.3g}]")
    return np.clip(X, -1, 1)


def check_labels(y, n: int, name: str = "y") -> tuple[np.ndarray, np.ndarray]:
    """Encode labels as 0..K-1; returns (encoded, classes)."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"{name} must be a 1-d array of length {n}, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError(f"{name} needs at least two classes")
    return encoded.astype(np.int64), classes


def check_masks(masks, shape: tuple[int, int, int], name: str = "masks") -> np.ndarray:
    masks = np.asarray(masks)
    if masks.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {masks.shape}")
    return (masks != 0).astype(np.uint8)


def check_codes(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return X
