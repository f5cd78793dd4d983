"""Gradient-descent update rules with per-parameter persistent state.

Every optimizer exposes ``step(params, grads) -> params`` where both
arguments are dicts of numpy arrays keyed by parameter name.  Updates are
out of place: the returned dict holds fresh arrays, so snapshots taken for
checkpointing are never mutated afterwards.

Adadelta here keeps an explicit learning rate in front of the adaptive
denominator, so it shares its update rule with RMSprop and the two differ
only in their documented default hyperparameters.  (Canonical Adadelta
replaces the learning rate with a second running average; that variant is
intentionally not implemented.)
"""

from __future__ import annotations

import numpy as np

__all__ = ["SGD", "Momentum", "Adagrad", "Adadelta", "RMSprop", "Adam",
           "gan_adam"]


class _Optimizer:
    kind = "base"

    def __init__(self, learning_rate: float):
        self.learning_rate = float(learning_rate)
        self.step_count = 0

    def _check(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if np.shape(g) != np.shape(p):
                raise ValueError(
                    f"gradient shape {np.shape(g)} does not match "
                    f"parameter {name!r} of shape {np.shape(p)}"
                )

    def _slot(self, slots: dict, name: str, like: np.ndarray) -> np.ndarray:
        if name not in slots:
            slots[name] = np.zeros_like(like)
        return slots[name]

    def step(self, params: dict, grads: dict) -> dict:
        raise NotImplementedError


class SGD(_Optimizer):
    """theta <- theta - eta * g.

    Batch, stochastic and mini-batch gradient descent all use this rule;
    which of the three is running is decided by how the caller composes the
    batches, not by the update itself.
    """

    kind = "sgd"

    def __init__(self, learning_rate: float = 0.01):
        super().__init__(learning_rate)

    def step(self, params, grads):
        self._check(params, grads)
        self.step_count += 1
        return {k: p - self.learning_rate * grads[k] for k, p in params.items()}


class Momentum(_Optimizer):
    """v <- gamma*v + eta*g; theta <- theta - v."""

    kind = "momentum"

    def __init__(self, learning_rate: float = 0.01, gamma: float = 0.9):
        super().__init__(learning_rate)
        self.gamma = float(gamma)
        self.velocity: dict = {}

    def step(self, params, grads):
        self._check(params, grads)
        self.step_count += 1
        out = {}
        for k, p in params.items():
            v = self._slot(self.velocity, k, p)
            v = self.gamma * v + self.learning_rate * grads[k]
            self.velocity[k] = v
            out[k] = p - v
        return out


class Adagrad(_Optimizer):
    """G <- G + g^2; theta <- theta - eta * g / sqrt(G + eps)."""

    kind = "adagrad"

    def __init__(self, learning_rate: float = 0.1, epsilon: float = 1e-8):
        super().__init__(learning_rate)
        self.epsilon = float(epsilon)
        self.accum: dict = {}

    def step(self, params, grads):
        self._check(params, grads)
        self.step_count += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            acc = self._slot(self.accum, k, p) + g * g
            self.accum[k] = acc
            out[k] = p - self.learning_rate * g / np.sqrt(acc + self.epsilon)
        return out


class Adadelta(_Optimizer):
    """E[g^2] <- gamma*E[g^2] + (1-gamma)*g^2; theta <- theta - eta*g/sqrt(E+eps)."""

    kind = "adadelta"

    def __init__(self, learning_rate: float = 0.001, gamma: float = 0.9,
                 epsilon: float = 1e-8):
        super().__init__(learning_rate)
        self.gamma = float(gamma)
        self.epsilon = float(epsilon)
        self.sq_avg: dict = {}

    def step(self, params, grads):
        self._check(params, grads)
        self.step_count += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            e = self._slot(self.sq_avg, k, p)
            e = self.gamma * e + (1.0 - self.gamma) * g * g
            self.sq_avg[k] = e
            out[k] = p - self.learning_rate * g / np.sqrt(e + self.epsilon)
        return out


class RMSprop(Adadelta):
    """Adadelta's rule with gamma fixed at 0.9 and learning rate 0.001 by default."""

    kind = "rmsprop"

    def __init__(self, learning_rate: float = 0.001, gamma: float = 0.9,
                 epsilon: float = 1e-8):
        super().__init__(learning_rate, gamma, epsilon)


class Adam(_Optimizer):
    """Adaptive moments with optional bias correction.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    theta <- theta - eta * mhat / (sqrt(vhat) + eps)
    where mhat = m/(1-b1^t), vhat = v/(1-b2^t) when bias correction is on.
    Defaults are the documented preset b1=0.9, b2=0.999, eps=1e-8.
    """

    kind = "adam"

    def __init__(self, learning_rate: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8,
                 bias_correction: bool = True):
        super().__init__(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.bias_correction = bool(bias_correction)
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params, grads):
        self._check(params, grads)
        self.step_count += 1
        t = self.step_count
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self._slot(self.m, k, p)
            v = self._slot(self.v, k, p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k] = m
            self.v[k] = v
            if self.bias_correction:
                mhat = m / (1.0 - self.beta1 ** t)
                vhat = v / (1.0 - self.beta2 ** t)
            else:
                mhat, vhat = m, v
            out[k] = p - self.learning_rate * mhat / (np.sqrt(vhat) + self.epsilon)
        return out


def gan_adam(learning_rate: float, bias_correction: bool = True) -> Adam:
    """The Adam preset used for GAN training: beta1=0.5, beta2=0.999."""
    return Adam(learning_rate, beta1=0.5, beta2=0.999, epsilon=1e-8,
                bias_correction=bias_correction)
