"""Scikit-learn style estimators wrapping the GAN trainer.

`CategoricalGan` is fit-shaped over images plus head-specific labels and
predicts through the discriminator; `VanillaGan` fits unlabelled flat
images.  Both expose get_params/set_params via sklearn's BaseEstimator, so
they compose with model-selection tooling, and both keep their fitted state
in trailing-underscore attributes.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import metrics as M
from .models import HeadVariant, LabelBatch, head_outputs
from .tensor import no_grad
from .training import (ArrayDataset, TrainConfig, evaluate_model, train)
from .validation import (as_generator, check_au_flags, check_categories,
                         check_flat_images, check_image_batch, check_va_pairs)

HEAD_NAMES = ("softmax", "au", "va-mse", "va-ccc", "joint-mse", "joint-ccc")


def head_from_name(name: str, k: int = 10, ponderated: bool = False) -> HeadVariant:
    """Map a CLI-style head name to a HeadVariant."""
    if name not in HEAD_NAMES:
        raise ValueError(f"unknown head {name!r}; choose from {HEAD_NAMES}")
    weights = "ponderated" if ponderated else "equal"
    if name == "softmax":
        return HeadVariant("softmax", k=k)
    if name == "au":
        return HeadVariant("au")
    kind, va_loss = name.split("-")
    return HeadVariant(kind, va_loss=va_loss, weights=weights)


class CategoricalGan(BaseEstimator):
    """Semi-supervised convolutional GAN with a classifying discriminator.

    Parameters mirror the training defaults: the generator learns at
    `learning_rate`, the discriminator at exactly half of it, and only one
    of the two networks is updated per iteration according to
    `update_rate`.  `head` selects what the discriminator predicts besides
    real/fake: "softmax" (k exclusive classes), "au" (8 binary action
    units), "va-mse"/"va-ccc" (valence/arousal regression) or
    "joint-mse"/"joint-ccc" (everything, optionally with the ponderated
    0.27/0.40/0.33 loss weighting).
    """

    def __init__(self, head="au", k=10, ponderated=False, learning_rate=1e-4,
                 update_rate=5, alpha=0.9, batch_size=64, iterations=2000,
                 checkpoint_every=1000, image_size=28, eval_every=0,
                 validation_fraction=0.1, non_saturating=False, seed=0,
                 out_dir=None, model_kwargs=None):
        self.head = head
        self.k = k
        self.ponderated = ponderated
        self.learning_rate = learning_rate
        self.update_rate = update_rate
        self.alpha = alpha
        self.batch_size = batch_size
        self.iterations = iterations
        self.checkpoint_every = checkpoint_every
        self.image_size = image_size
        self.eval_every = eval_every
        self.validation_fraction = validation_fraction
        self.non_saturating = non_saturating
        self.seed = seed
        self.out_dir = out_dir
        self.model_kwargs = model_kwargs

    # -- internals ---------------------------------------------------------

    def _head(self) -> HeadVariant:
        return head_from_name(self.head, k=self.k, ponderated=self.ponderated)

    def _labels(self, head: HeadVariant, X, y) -> LabelBatch:
        n = len(X)
        if head.kind == "softmax":
            return LabelBatch(real_flag=np.zeros(n, dtype=np.int64),
                              category=check_categories(y, n, head.k))
        if head.kind == "au":
            return LabelBatch(real_flag=np.zeros(n, dtype=np.int64),
                              au=check_au_flags(y, n))
        if head.kind == "va":
            va = check_va_pairs(y, n)
            return LabelBatch(real_flag=np.zeros(n, dtype=np.int64),
                              valence=va[:, 0], arousal=va[:, 1])
        y = np.asarray(y)
        if y.shape != (n, 2 + M.NUM_AUS):
            raise ValueError(
                f"joint head expects (n, {2 + M.NUM_AUS}) labels "
                f"[valence, arousal, 8 AU flags], got {y.shape}")
        va = check_va_pairs(y[:, :2], n)
        au = check_au_flags(y[:, 2:], n)
        return LabelBatch(real_flag=np.zeros(n, dtype=np.int64), au=au,
                          valence=va[:, 0], arousal=va[:, 1])

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this CategoricalGan instance is not fitted")

    def _head_probs(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X, self.image_size)
        outs = []
        with no_grad():
            for start in range(0, len(X), 256):
                logits = self.model_.discriminate(X[start:start + 256],
                                                  training=False)
                outs.append(head_outputs(self.model_.head, logits.data))
        return np.concatenate(outs, axis=0)

    # -- the sklearn surface -------------------------------------------------

    def fit(self, X, y):
        head = self._head()
        X = check_image_batch(X, self.image_size)
        labels = self._labels(head, X, y)

        rng = as_generator(self.seed)
        n = len(X)
        n_val = max(2, int(round(n * self.validation_fraction)))
        if n - n_val < self.batch_size:
            n_val = max(2, min(n_val, n - 2))
        order = rng.permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]

        from .training import take_labels
        dataset = ArrayDataset(train_images=X[train_idx],
                               test_images=X[val_idx],
                               train_labels=take_labels(labels, train_idx),
                               test_labels=take_labels(labels, val_idx))
        config = TrainConfig(
            head=head, learning_rate=self.learning_rate,
            update_rate=self.update_rate, alpha=self.alpha,
            batch_size=min(self.batch_size, len(train_idx)),
            iterations=self.iterations,
            checkpoint_every=self.checkpoint_every, seed=self.seed,
            image_size=self.image_size, eval_every=self.eval_every,
            non_saturating=self.non_saturating,
            model_kwargs=self.model_kwargs or {})
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="catgan-fit-")
        self.records_ = train(config, dataset, out_dir)
        self.out_dir_ = str(out_dir)
        from .models import load_checkpoint
        self.model_, self.n_iter_, _ = load_checkpoint(self.records_[-1].path)
        self.validation_report_ = evaluate_model(
            self.model_, dataset.test_images, dataset.test_labels,
            self.n_iter_)
        return self

    def predict(self, X):
        """Head-dependent predictions from the discriminator.

        softmax: class indices.  au: binary flags (N, 8).  va: (N, 2)
        valence/arousal.  joint: (N, 10) [valence, arousal, 8 flags].
        """
        probs = self._head_probs(X)
        kind = self.model_.head.kind
        if kind == "softmax":
            return probs[:, :self.model_.head.k].argmax(axis=1)
        if kind == "au":
            return (probs[:, :M.NUM_AUS] >= 0.5).astype(np.int64)
        if kind == "va":
            return probs[:, :2]
        flags = (probs[:, 2:2 + M.NUM_AUS] >= 0.5).astype(np.int64)
        return np.concatenate([probs[:, :2], flags.astype(np.float64)], axis=1)

    def predict_proba(self, X):
        """Probabilities of the label nodes (the fake node is excluded;
        softmax rows therefore sum to slightly below one)."""
        probs = self._head_probs(X)
        kind = self.model_.head.kind
        if kind == "softmax":
            return probs[:, :self.model_.head.k]
        if kind == "au":
            return probs[:, :M.NUM_AUS]
        if kind == "va":
            raise ValueError("the va head is a regressor; use predict")
        return probs[:, 2:2 + M.NUM_AUS]

    def fake_probability(self, X):
        """Probability that each image is a generator sample."""
        return self._head_probs(X)[:, -1]

    def sample(self, n: int, random_state=None):
        """Draw n generated images in [-1, 1], shape (n, H, W, 3)."""
        self._check_fitted()
        rng = as_generator(self.seed if random_state is None else random_state)
        z = self.model_.sample_noise(rng, n)
        with no_grad():
            imgs = self.model_.generate(z, training=False)
        return imgs.data

    def score(self, X, y):
        """Mean F1 over action units, mean CCC for the regression head,
        plain accuracy for the softmax head, and the average of the first
        two for the joint head."""
        head = self.model_.head
        labels = self._labels(head, check_image_batch(X, self.image_size), y)
        report = evaluate_model(self.model_, check_image_batch(X, self.image_size),
                                labels, self.n_iter_)
        if head.kind == "softmax":
            return report.class_accuracy
        if head.kind == "au":
            return report.mean_f1
        if head.kind == "va":
            return (report.ccc_valence + report.ccc_arousal) / 2
        return (report.mean_f1 +
                (report.ccc_valence + report.ccc_arousal) / 2) / 2


class VanillaGan(BaseEstimator):
    """The two-layer MLP pair on flat images in [0, 1]; fit is unsupervised."""

    def __init__(self, learning_rate=1e-3, batch_size=128, iterations=2000,
                 checkpoint_every=1000, validation_fraction=0.05, seed=0,
                 out_dir=None):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.checkpoint_every = checkpoint_every
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.out_dir = out_dir

    def fit(self, X, y=None):
        X = check_flat_images(X)
        rng = as_generator(self.seed)
        n_val = max(2, int(round(len(X) * self.validation_fraction)))
        order = rng.permutation(len(X))
        dataset = ArrayDataset(train_images=X[order[n_val:]],
                               test_images=X[order[:n_val]])
        config = TrainConfig(
            head=None, learning_rate=self.learning_rate,
            batch_size=min(self.batch_size, len(X) - n_val),
            iterations=self.iterations,
            checkpoint_every=self.checkpoint_every, seed=self.seed,
            eval_every=0, model_kwargs={"image_dim": X.shape[1]})
        out_dir = self.out_dir or tempfile.mkdtemp(prefix="catgan-vanilla-")
        self.records_ = train(config, dataset, out_dir)
        self.out_dir_ = str(out_dir)
        from .models import load_checkpoint
        self.model_, self.n_iter_, _ = load_checkpoint(self.records_[-1].path)
        return self

    def sample(self, n: int, random_state=None):
        if not hasattr(self, "model_"):
            raise NotFittedError("this VanillaGan instance is not fitted")
        rng = as_generator(self.seed if random_state is None else random_state)
        z = self.model_.sample_noise(rng, n)
        with no_grad():
            return self.model_.generate(z, training=False).data

    def real_probability(self, X):
        """Discriminator's probability that each image is real."""
        if not hasattr(self, "model_"):
            raise NotFittedError("this VanillaGan instance is not fitted")
        X = check_flat_images(X)
        with no_grad():
            return self.model_.discriminate(X, training=False).data[:, 0]
