"""Input checks and seed handling shared by the estimator and experiments."""
from __future__ import annotations

import numpy as np

SEED_STREAMS = ("dataset", "sampler", "augment", "init")


def check_images(X) -> np.ndarray:
    """Validate an ``n x H x W x 3`` stack of images with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("got an empty image array")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1] before normalization")
    return X


def check_labels(y, n: int) -> np.ndarray:
    if y is None:
        raise ValueError("labels are required")
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if (y < 0).any():
        raise ValueError("labels must be non-negative")
    return y.astype(np.int64)


def seed_streams(seed: int) -> dict[str, int]:
    """Independent child seeds for dataset, sampler, augmentation and init."""
    children = np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))
    return {name: int(c.generate_state(1, dtype=np.uint32)[0]) for name, c in zip(SEED_STREAMS, children)}
