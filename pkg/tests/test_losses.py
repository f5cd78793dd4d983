"""Differentiable losses: values equal the numpy metrics, gradients check out."""

import math

import numpy as np
import pytest

from catgan import metrics
from catgan.losses import (huber_loss, log_prob_loss, mse_loss,
                           one_minus_ccc_loss, sigmoid_ce_loss,
                           softmax_ce_loss)
from catgan.tensor import Tensor

from conftest import central_difference, relative_error


def grad_check(make_loss, x0, tol=1e-4):
    x = Tensor(x0, requires_grad=True)
    make_loss(x).backward()
    numeric = central_difference(lambda a: make_loss(Tensor(a)).item(), x0)
    assert relative_error(x.grad, numeric) < tol


class TestValuesAgreeWithMetrics:
    def test_mse(self):
        rng = np.random.default_rng(0)
        p, o = rng.normal(size=12), rng.normal(size=12)
        assert mse_loss(Tensor(p), o).item() == pytest.approx(metrics.mse(p, o), abs=1e-14)

    def test_one_minus_ccc(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=15)
        o = 0.7 * p + rng.normal(size=15) * 0.1
        assert one_minus_ccc_loss(Tensor(p), o).item() == \
            pytest.approx(1.0 - metrics.ccc(p, o), abs=1e-12)

    def test_huber_elementwise_mean(self):
        rng = np.random.default_rng(2)
        p, o = rng.normal(size=(4, 7)) * 2, rng.normal(size=(4, 7))
        expected = float(np.mean(metrics.huber(p - o, 1.0)))
        assert huber_loss(Tensor(p), o).item() == pytest.approx(expected, abs=1e-12)

    def test_sigmoid_ce(self):
        rng = np.random.default_rng(3)
        z, t = rng.normal(size=(5, 9)) * 4, rng.uniform(0, 1, size=(5, 9))
        expected = float(np.mean(metrics.sigmoid_ce(z, t)))
        assert sigmoid_ce_loss(Tensor(z), t).item() == pytest.approx(expected, abs=1e-12)

    def test_softmax_ce_broadcast_target(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(6, 9))
        t = metrics.fake_label(8, 0.9)
        expected = float(np.mean(metrics.softmax_ce(z, t)))
        assert softmax_ce_loss(Tensor(z), t).item() == pytest.approx(expected, abs=1e-12)

    def test_log_prob_clamps_at_floor(self):
        v = log_prob_loss(Tensor([1e-20])).item()
        assert v == pytest.approx(math.log(1e-12))
        assert np.isfinite(v)


class TestGradients:
    def test_mse_loss(self):
        rng = np.random.default_rng(10)
        target = rng.normal(size=8)
        grad_check(lambda x: mse_loss(x, target), rng.normal(size=8))

    def test_one_minus_ccc_loss(self):
        rng = np.random.default_rng(11)
        target = rng.uniform(-1, 1, size=10)
        grad_check(lambda x: one_minus_ccc_loss(x, target),
                   rng.uniform(-1, 1, size=10))

    def test_one_minus_ccc_constant_target_has_zero_gradient(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=6), requires_grad=True)
        loss = one_minus_ccc_loss(x, np.full(6, 0.05))
        assert loss.item() == pytest.approx(1.0)
        loss.backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)

    def test_huber_loss_both_branches(self):
        rng = np.random.default_rng(13)
        target = np.zeros(10)
        x0 = np.concatenate([rng.uniform(-0.6, 0.6, 5),  # quadratic branch
                             rng.uniform(1.5, 3.0, 5)])  # linear branch
        grad_check(lambda x: huber_loss(x, target), x0)

    def test_sigmoid_ce_loss(self):
        rng = np.random.default_rng(14)
        t = rng.integers(0, 2, size=(3, 9)).astype(float)
        grad_check(lambda x: sigmoid_ce_loss(x, t), rng.normal(size=(3, 9)))

    def test_softmax_ce_loss(self):
        rng = np.random.default_rng(15)
        t = np.eye(5)[rng.integers(0, 5, size=4)]
        grad_check(lambda x: softmax_ce_loss(x, t), rng.normal(size=(4, 5)))

    def test_ccc_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match=">= 2"):
            one_minus_ccc_loss(Tensor([0.5]), [0.5])
