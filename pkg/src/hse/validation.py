"""Input validation helpers shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .taxonomy import Taxonomy, derive_label_path, is_consistent


def check_images(X, n_channels: int | None = None, dtype="float64", min_size: int = 1) -> np.ndarray:
    """Return ``X`` as a finite float array of shape [N, C, H, W]."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape [N, C, H, W], got array with shape {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    if min(X.shape[2:]) < min_size:
        raise ValueError(f"images of size {X.shape[2]}x{X.shape[3]} are smaller than {min_size}")
    if X.dtype.kind not in "fiub":
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    return X


def check_label_paths(y, taxonomy: Taxonomy) -> np.ndarray:
    """Return ``y`` as [N, L] label paths.

    A 1-D ``y`` is read as finest-level (leaf) indices and expanded through the
    taxonomy. Every path is checked for consistency with the hierarchy.
    """
    y = np.asarray(y)
    if y.dtype.kind not in "iu":
        if y.dtype.kind == "f" and np.all(np.mod(y, 1) == 0):
            y = y.astype(np.int64)
        else:
            raise ValueError(f"labels must be integer indices, got dtype {y.dtype}")
    L = taxonomy.level_count
    if y.ndim == 1:
        return np.array([derive_label_path(taxonomy, int(leaf)) for leaf in y],
                        dtype=np.int64).reshape(len(y), L)
    if y.ndim != 2 or y.shape[1] != L:
        raise ValueError(f"label paths must have shape [N, {L}], got {y.shape}")
    sizes = np.asarray(taxonomy.level_sizes)
    if len(y) and (y.min() < 0 or np.any(y.max(axis=0) >= sizes)):
        raise ValueError("label index outside the taxonomy")
    for row, path in enumerate(y):
        if not is_consistent(taxonomy, path):
            raise ValueError(f"row {row}: label path {tuple(path)} is not a path in the taxonomy")
    return y.astype(np.int64, copy=False)


def check_consistent_length(*arrays) -> None:
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")
