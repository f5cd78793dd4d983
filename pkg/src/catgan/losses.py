"""Differentiable losses on autodiff tensors.

Mirrors of the numpy metrics in :mod:`catgan.metrics`, built from tensor
primitives so gradients flow through them.  Targets are plain arrays or
scalars (constants of the optimisation).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

PROB_CLAMP = 1e-12


def mse_loss(pred: Tensor, target) -> Tensor:
    """(1/n) * sum of squared differences."""
    pred = Tensor._lift(pred)
    if pred.size == 0:
        raise ValueError("mse of empty input is undefined")
    diff = pred - Tensor._lift(target)
    return (diff * diff).mean()


def one_minus_ccc_loss(pred: Tensor, target) -> Tensor:
    """1 - concordance correlation, with population (1/n) moments.

    Needs at least two samples; with fewer the batch variance carries no
    information and the coefficient is undefined.
    """
    pred = Tensor._lift(pred)
    target = np.asarray(target, dtype=np.float64).ravel()
    n = pred.size
    if n < 2:
        raise ValueError(f"1-CCC needs a batch of >= 2 values, got {n}")
    if target.size != n:
        raise ValueError(f"length mismatch: {n} vs {target.size}")
    x = pred.reshape(n)
    mx = x.mean()
    vx = ((x - mx) * (x - mx)).mean()
    my = float(target.mean())
    vy = float(target.var())
    cov = ((x - mx) * (target - my)).mean()
    denom = vx + vy + (mx - my) * (mx - my)
    return 1.0 - (2.0 * cov) / denom


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean Huber penalty of the element-wise residuals pred - target."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    residual = Tensor._lift(pred) - Tensor._lift(target)
    a = residual.abs()
    quadratic = a.clip(0.0, delta)
    # 0.5*q^2 + delta*(|a| - q): equals 0.5*a^2 inside, delta*(|a|-delta/2) outside
    return (0.5 * quadratic * quadratic + delta * (a - quadratic)).mean()


def sigmoid_ce_loss(logits: Tensor, targets) -> Tensor:
    """Element-wise sigmoid cross entropy from logits, mean over all elements.

    Uses the stable form max(z,0) - z*t + log(1 + exp(-|z|)).
    """
    z = Tensor._lift(logits)
    t = Tensor._lift(targets)
    softplus = ((-z.abs()).exp() + 1.0).log()
    return (z.relu() - z * t + softplus).mean()


def softmax_ce_loss(logits: Tensor, target_dist) -> Tensor:
    """Cross entropy of fixed target rows against softmax(logits) rows.

    Returns the mean over the batch; `target_dist` broadcasts against the
    logits, so a single smoothing vector can serve a whole batch.
    """
    z = Tensor._lift(logits)
    t = np.broadcast_to(np.asarray(target_dist, dtype=np.float64), z.shape)
    zmax = z.data.max(axis=-1, keepdims=True)  # constant shift, gradient-free
    shifted = z - zmax
    log_norm = shifted.exp().sum(axis=-1, keepdims=True).log()
    rows = ((log_norm - shifted) * t).sum(axis=-1)
    return rows.mean()


def log_prob_loss(probs: Tensor) -> Tensor:
    """Mean log of probabilities, clamped away from zero and one."""
    p = Tensor._lift(probs).clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return p.log().mean()
