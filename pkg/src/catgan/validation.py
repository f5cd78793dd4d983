"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .metrics import NUM_AUS
from .tensor import get_default_dtype


def as_generator(random_state) -> np.random.Generator:
    """Accept None, an int seed or a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def check_image_batch(X, image_size: int | None = None) -> np.ndarray:
    """Coerce images to [N, H, W, 3] floats in the generator's tanh range.

    Accepts uint8 in [0, 255] (rescaled), floats already in [-1, 1], and
    single-channel input of shape [N, H, W] or [N, H, W, 1], which is
    replicated to three channels.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(
            f"expected an image batch [N, H, W, C], got shape {X.shape}")
    if X.shape[-1] == 1:
        X = np.repeat(X, 3, axis=-1)
    if X.shape[-1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {X.shape[-1]}")
    if image_size is not None and X.shape[1:3] != (image_size, image_size):
        raise ValueError(
            f"expected {image_size}x{image_size} images, got {X.shape[1:3]}")
    if X.dtype == np.uint8:
        X = X.astype(get_default_dtype()) / 127.5 - 1.0
    else:
        X = X.astype(get_default_dtype())
        if X.size and (X.min() < -1.0 - 1e-9 or X.max() > 1.0 + 1e-9):
            raise ValueError("float images must already lie in [-1, 1]")
    return X


def check_flat_images(X) -> np.ndarray:
    """Coerce images to [N, D] floats in [0, 1] for the vanilla pair."""
    X = np.asarray(X)
    if X.ndim > 2:
        X = X.reshape(len(X), -1)
    if X.ndim != 2:
        raise ValueError(f"expected a flat image batch, got shape {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(get_default_dtype()) / 255.0
    else:
        X = X.astype(get_default_dtype())
        if X.size and (X.min() < -1e-9 or X.max() > 1.0 + 1e-9):
            raise ValueError("float images must already lie in [0, 1]")
    return X


def check_au_flags(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n, NUM_AUS):
        raise ValueError(f"expected ({n}, {NUM_AUS}) action-unit flags, "
                         f"got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("action-unit flags must be binary")
    return y.astype(np.int64)


def check_va_pairs(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, 2):
        raise ValueError(f"expected ({n}, 2) valence/arousal pairs, "
                         f"got {y.shape}")
    if y.size and np.abs(y).max() > 1.0:
        raise ValueError("valence/arousal must lie in [-1, 1]")
    return y


def check_categories(y, n: int, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} class labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"class labels must lie in [0, {k})")
    return y
