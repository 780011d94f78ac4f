"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError, EmptyInputError


def check_sequences(X, n_features=None):
    """Float sequences of shape (N, D_x) or (B, N, D_x), finite."""
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_min_samples=1)
    if X.ndim not in (2, 3):
        raise DimensionError(f"expected (N, D_x) or (B, N, D_x) input, got shape {X.shape}")
    if n_features is not None and X.shape[-1] != n_features:
        raise DimensionError(f"X has {X.shape[-1]} features, estimator was fitted with {n_features}")
    return X


def check_tokens(X, n_tokens=None, seq_len=None):
    """Integer token matrix of shape (n_samples, N) with ids in [0, n_tokens)."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise DimensionError(f"token input must be 2-D (n_samples, N), got shape {X.shape}")
    if X.shape[0] == 0:
        raise EmptyInputError("token input has no samples")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("token ids must be integers")
        X = X.astype(np.int64)
    if X.min() < 0 or (n_tokens is not None and X.max() >= n_tokens):
        raise ValueError(f"token ids must lie in [0, {n_tokens}), got range [{X.min()}, {X.max()}]")
    if seq_len is not None and X.shape[1] > seq_len:
        raise DimensionError(f"sequences of length {X.shape[1]} exceed the fitted maximum {seq_len}")
    return X.astype(np.int64, copy=False)


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise DimensionError(f"expected {n_samples} labels, got shape {y.shape}")
    return y
