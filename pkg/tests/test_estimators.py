"""The scikit-learn estimator surface."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from catgan.estimators import CategoricalGan, VanillaGan, head_from_name

TINY = dict(disc_channels=(4, 6, 8), gen_channels=(12, 8, 6))


def tiny_gan(head="au", **kw):
    base = dict(head=head, iterations=6, checkpoint_every=6, batch_size=4,
                seed=3, model_kwargs=TINY)
    base.update(kw)
    return CategoricalGan(**base)


def images(n, rng):
    return rng.uniform(-1, 1, size=(n, 28, 28, 3))


class TestHeadFromName:
    def test_all_names_resolve(self):
        assert head_from_name("softmax", k=7).k == 7
        assert head_from_name("au").kind == "au"
        assert head_from_name("va-ccc").va_loss == "ccc"
        assert head_from_name("joint-mse", ponderated=True).weights == \
            "ponderated"

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown head"):
            head_from_name("transformer")


class TestSklearnProtocol:
    def test_get_params_round_trips(self):
        est = tiny_gan(learning_rate=5e-5)
        params = est.get_params()
        assert params["learning_rate"] == 5e-5
        est2 = CategoricalGan(**params)
        assert est2.get_params() == params

    def test_clone(self):
        est = tiny_gan(alpha=0.8)
        cloned = clone(est)
        assert cloned.alpha == 0.8
        assert cloned is not est

    def test_set_params(self):
        est = tiny_gan()
        est.set_params(update_rate=7)
        assert est.update_rate == 7

    def test_unfitted_predict_raises(self):
        with pytest.raises(NotFittedError):
            tiny_gan().predict(np.zeros((1, 28, 28, 3)))


class TestFitPredict:
    def test_au_head_end_to_end(self, tmp_path):
        rng = np.random.default_rng(0)
        X = images(30, rng)
        y = rng.integers(0, 2, size=(30, 8))
        est = tiny_gan(out_dir=str(tmp_path)).fit(X, y)
        pred = est.predict(X[:5])
        assert pred.shape == (5, 8)
        assert set(np.unique(pred)) <= {0, 1}
        proba = est.predict_proba(X[:5])
        assert proba.shape == (5, 8)
        assert ((proba >= 0) & (proba <= 1)).all()
        assert 0.0 <= est.score(X, y) <= 1.0
        assert est.n_iter_ == 6

    def test_softmax_head_predicts_classes(self, tmp_path):
        rng = np.random.default_rng(1)
        X = images(30, rng)
        y = rng.integers(0, 10, size=30)
        est = tiny_gan("softmax", out_dir=str(tmp_path)).fit(X, y)
        pred = est.predict(X[:7])
        assert pred.shape == (7,)
        assert pred.min() >= 0 and pred.max() < 10

    def test_va_head_regression_output(self, tmp_path):
        rng = np.random.default_rng(2)
        X = images(24, rng)
        y = rng.uniform(-1, 1, size=(24, 2))
        est = tiny_gan("va-mse", out_dir=str(tmp_path)).fit(X, y)
        pred = est.predict(X[:4])
        assert pred.shape == (4, 2)
        with pytest.raises(ValueError, match="regressor"):
            est.predict_proba(X[:4])

    def test_joint_head_label_layout(self, tmp_path):
        rng = np.random.default_rng(3)
        X = images(24, rng)
        y = np.hstack([rng.uniform(-1, 1, size=(24, 2)),
                       rng.integers(0, 2, size=(24, 8))])
        est = tiny_gan("joint-mse", out_dir=str(tmp_path)).fit(X, y)
        pred = est.predict(X[:3])
        assert pred.shape == (3, 10)

    def test_sample_and_fake_probability(self, tmp_path):
        rng = np.random.default_rng(4)
        X = images(24, rng)
        y = rng.integers(0, 2, size=(24, 8))
        est = tiny_gan(out_dir=str(tmp_path)).fit(X, y)
        samples = est.sample(5, random_state=11)
        assert samples.shape == (5, 28, 28, 3)
        assert np.abs(samples).max() < 1.0
        again = est.sample(5, random_state=11)
        assert (samples == again).all()
        p = est.fake_probability(X[:6])
        assert ((p >= 0) & (p <= 1)).all()

    def test_grayscale_input_replicated(self, tmp_path):
        rng = np.random.default_rng(5)
        X = rng.integers(0, 256, size=(24, 28, 28), dtype=np.uint8)
        y = rng.integers(0, 2, size=(24, 8))
        est = tiny_gan(out_dir=str(tmp_path)).fit(X, y)
        assert est.predict(X[:2]).shape == (2, 8)

    def test_bad_labels_rejected_before_training(self):
        rng = np.random.default_rng(6)
        X = images(10, rng)
        with pytest.raises(ValueError, match="action-unit"):
            tiny_gan().fit(X, rng.integers(0, 3, size=(10, 8)))
        with pytest.raises(ValueError, match=r"\[-1, 1\]"):
            tiny_gan("va-mse").fit(X, rng.uniform(-2, 2, size=(10, 2)) * 5)


class TestVanilla:
    def test_fit_sample_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        X = rng.uniform(0, 1, size=(40, 64))
        est = VanillaGan(iterations=5, checkpoint_every=5, batch_size=8,
                         seed=1, out_dir=str(tmp_path)).fit(X)
        s = est.sample(3)
        assert s.shape == (3, 64)
        assert s.min() > 0.0 and s.max() < 1.0
        p = est.real_probability(X[:5])
        assert ((p > 0) & (p < 1)).all()

    def test_accepts_2d_images(self, tmp_path):
        rng = np.random.default_rng(8)
        X = rng.integers(0, 256, size=(40, 8, 8), dtype=np.uint8)
        est = VanillaGan(iterations=4, checkpoint_every=4, batch_size=8,
                         out_dir=str(tmp_path)).fit(X)
        assert est.sample(2).shape == (2, 64)
