"""Input validation shared by the estimator entry points."""
from __future__ import annotations

import numpy as np

from .evaluation import Box


def check_images(X) -> np.ndarray:
    """Return ``X`` as a float32 ``(N, H, W)`` array of finite values."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (N, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def _to_box(b) -> Box:
    if isinstance(b, Box):
        return Box(b.x, b.y, b.w, b.h)
    x, y, w, h = (float(v) for v in b)
    return Box(x, y, w, h)


def check_box_lists(y, n_images: int) -> list[list[Box]]:
    if len(y) != n_images:
        raise ValueError(f"{len(y)} box lists for {n_images} images")
    out = []
    for boxes in y:
        converted = [_to_box(b) for b in boxes]
        for b in converted:
            if not (b.w > 0 and b.h > 0):
                raise ValueError(f"box sizes must be positive, got {b}")
        out.append(converted)
    return out
