"""Tests for the sklearn-style estimator facade."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from depthflow.datagen import generate_dataset
from depthflow.estimators import (
    FlowDepthEstimator,
    TeacherDepthRegressor,
    evaluate_checkpoint,
)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(42, 12, size=(32, 32))


@pytest.fixture(scope="module")
def fitted(scenes):
    est = FlowDepthEstimator(base_width=8, time_embed_dim=16, steps=30,
                             batch_size=4, ensemble_size=2, nfe=2, seed=1)
    return est.fit(scenes)


class TestSklearnConventions:
    def test_get_params_round_trip(self):
        est = FlowDepthEstimator(base_width=24, steps=10)
        params = est.get_params()
        assert params["base_width"] == 24
        est2 = FlowDepthEstimator(**params)
        assert est2.get_params() == params

    def test_clone(self):
        est = FlowDepthEstimator(steps=5, seed=3)
        c = clone(est)
        assert c.get_params() == est.get_params()

    def test_set_params(self):
        est = FlowDepthEstimator()
        est.set_params(nfe=7, ensemble_size=3)
        assert est.nfe == 7 and est.ensemble_size == 3

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            FlowDepthEstimator().predict([np.zeros((1, 32, 32))])
        with pytest.raises(NotFittedError):
            TeacherDepthRegressor().predict([np.zeros((1, 32, 32))])


class TestFitPredict:
    def test_fit_sets_state(self, fitted):
        assert fitted.checkpoint_ is not None
        assert fitted.quantiles_.d2 < fitted.quantiles_.d98
        assert fitted.n_train_scenes_ == 12

    def test_predict_shapes(self, fitted, scenes):
        preds = fitted.predict([s.image for s in scenes[:2]])
        assert len(preds) == 2
        for p in preds:
            assert p.shape == (32, 32)
            assert p.valid.all()
            assert (p.values > 0).all()

    def test_predict_single(self, fitted, scenes):
        p = fitted.predict_single(scenes[0].image)
        assert p.shape == (32, 32)

    def test_score_in_unit_interval(self, fitted, scenes):
        s = fitted.score(scenes[:3])
        assert 0.0 <= s <= 1.0

    def test_input_validation(self, fitted):
        with pytest.raises(ValueError):
            fitted.predict([np.zeros((3, 32, 32))])
        with pytest.raises(ValueError):
            FlowDepthEstimator().fit([])

    def test_save_load_predict_identical(self, fitted, scenes, tmp_path):
        p = tmp_path / "est.ckpt"
        fitted.save(p)
        # sampler knobs are inference-time settings, not checkpoint state
        loaded = FlowDepthEstimator.load(p).set_params(
            nfe=fitted.nfe, ensemble_size=fitted.ensemble_size)
        a = fitted.predict([scenes[0].image], rng=np.random.default_rng(5))
        b = loaded.predict([scenes[0].image], rng=np.random.default_rng(5))
        assert np.array_equal(a[0].values, b[0].values)


class TestTeacher:
    def test_fit_predict(self, scenes):
        t = TeacherDepthRegressor(base_width=8, time_embed_dim=16, steps=30,
                                  batch_size=4, seed=2)
        t.fit(scenes)
        preds = t.predict([s.image for s in scenes[:2]])
        assert preds[0].shape == (32, 32)
        nds = t.predict_normalized([scenes[0].image])
        assert nds[0].shape == (1, 32, 32)
        assert nds[0].min() >= -1.0 and nds[0].max() <= 1.0

    def test_distillation_path(self, scenes):
        est = FlowDepthEstimator(base_width=8, time_embed_dim=16, steps=20,
                                 batch_size=4, teacher_ratio=0.5,
                                 teacher_steps=20, seed=3)
        est.fit(scenes)
        assert est.teacher_params_ is not None
        assert est.n_train_scenes_ == 12 + round(0.5 * 12)


class TestEvaluate:
    def test_report_fields(self, fitted, scenes):
        rep = evaluate_checkpoint(fitted.checkpoint_, scenes[:3],
                                  fitted.sampler_config(nfe=1),
                                  np.random.default_rng(0), dataset="probe")
        assert rep.dataset == "probe"
        assert rep.n_images == 3
        assert 0.0 <= rep.delta1 <= 1.0
        assert rep.abs_rel >= 0.0
        assert rep.rmse >= 0.0
