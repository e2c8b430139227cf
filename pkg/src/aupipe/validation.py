"""Input validation helpers for the estimator facade."""
from __future__ import annotations

import numpy as np

from .align import normalize


def check_image_batch(X, input_size: int) -> np.ndarray:
    """Coerce to a (n, 3, input_size, input_size) float64 batch.

    Accepts pre-normalized float arrays in channel-first layout, or uint8
    rasters in (n, H, W, 3) layout which are normalized with the standard
    per-channel statistics.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D image batch, got shape {X.shape}")
    if X.dtype == np.uint8:
        if X.shape[3] != 3:
            raise ValueError(f"uint8 batches must be (n, H, W, 3), got {X.shape}")
        X = np.stack([normalize(img).data for img in X])
    elif X.shape[1] != 3:
        raise ValueError(f"float batches must be (n, 3, H, W), got {X.shape}")
    if X.shape[2] != input_size or X.shape[3] != input_size:
        raise ValueError(f"expected {input_size}x{input_size} images, got {X.shape[2]}x{X.shape[3]}")
    out = np.ascontiguousarray(X, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError("image batch contains non-finite values")
    return out


def check_label_matrix(y, n_samples: int, n_labels: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_samples, n_labels):
        raise ValueError(f"expected labels of shape ({n_samples}, {n_labels}), got {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary (0 or 1)")
    return y
