"""Digit corpora for sanity training runs.

Real MNIST is used when available: point the CATGAN_MNIST environment
variable at an .npz file holding the usual x_train/y_train/x_test/y_test
arrays.  Without it, the bundled scikit-learn digits (1,797 8x8 images) are
upscaled to 28x28 as a stand-in; `DigitCorpus.source` records which corpus
was loaded.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


@dataclass
class DigitCorpus:
    train_images: np.ndarray  # [N, 28, 28] uint8
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    source: str


def _upscale_digits(images8: np.ndarray) -> np.ndarray:
    """8x8 digits (0..16) to centred 28x28 uint8.

    Smooth (bilinear) upscaling: block replication would stamp an exact
    pixel-repetition pattern on every real image, handing a GAN
    discriminator a trivial real/fake cue that natural digit scans lack.
    """
    from PIL import Image

    out = np.zeros((len(images8), 28, 28), dtype=np.uint8)
    for i, img in enumerate(images8):
        u8 = np.clip(img * (255.0 / 16.0), 0, 255).round().astype(np.uint8)
        big = Image.fromarray(u8).resize((24, 24), Image.BILINEAR)
        out[i, 2:26, 2:26] = np.asarray(big)
    return out


def _try_mnist():
    path = os.environ.get("CATGAN_MNIST")
    if path and os.path.exists(path):
        with np.load(path) as z:
            return (z["x_train"], z["y_train"], z["x_test"], z["y_test"],
                    f"mnist ({path})")
    return None


def load_digit_corpus(n_train: int | None = None, n_test: int | None = None,
                      seed: int = 0) -> DigitCorpus:
    """28x28 uint8 digit images with class labels, split train/test."""
    loaded = _try_mnist()
    if loaded is not None:
        xtr, ytr, xte, yte, source = loaded
    else:
        from sklearn.datasets import load_digits

        digits = load_digits()
        images = _upscale_digits(digits.images)
        labels = digits.target
        order = np.random.default_rng(seed).permutation(len(images))
        cut = int(len(images) * 0.8)
        xtr, ytr = images[order[:cut]], labels[order[:cut]]
        xte, yte = images[order[cut:]], labels[order[cut:]]
        source = "sklearn-digits-upscaled"

    rng = np.random.default_rng(seed)
    if n_train is not None and n_train < len(xtr):
        idx = rng.permutation(len(xtr))[:n_train]
        xtr, ytr = xtr[idx], ytr[idx]
    if n_test is not None and n_test < len(xte):
        idx = rng.permutation(len(xte))[:n_test]
        xte, yte = xte[idx], yte[idx]
    return DigitCorpus(np.ascontiguousarray(xtr), np.asarray(ytr),
                       np.ascontiguousarray(xte), np.asarray(yte), source)
