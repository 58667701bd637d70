"""Input validation helpers shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, dtype=np.float64, square=True):
    """Return ``X`` as a finite ``(n_samples, h, w)`` float array.

    Accepts a single 2-D image, an image stack, or a stack with a singleton
    channel axis ``(n, 1, h, w)``.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    elif X.ndim == 4:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single channel, got shape {X.shape}")
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"expected an image stack (n, h, w), got shape {X.shape}")
    n, h, w = X.shape
    if square and h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    flat = check_array(X.reshape(n, h * w), dtype=dtype, ensure_all_finite=True)
    return flat.reshape(n, h, w)


def check_m2_targets(y, n_samples=None):
    y = check_array(y, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if y.shape[1] != 2:
        raise ValueError(f"targets must be (M2_x, M2_y) pairs, got shape {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"{y.shape[0]} targets for {n_samples} images")
    return y
