"""The sklearn-facing estimator: params protocol, fit/predict/score,
input validation."""

import numpy as np
import pytest
from sklearn.base import clone

from mitseg.errors import DataError
from mitseg.estimator import SegformerSegmenter
from mitseg.train import make_toy_dataset


def channels_last(samples):
    X = np.stack([s.image.transpose(1, 2, 0) for s in samples])
    y = np.stack([s.labels for s in samples])
    return X, y


@pytest.fixture(scope="module")
def fitted():
    X, y = channels_last(make_toy_dataset(4, 64, 3, seed=0))
    est = SegformerSegmenter(num_classes=3, total_iters=250, base_lr=1e-3,
                             augment=False, seed=0)
    return est.fit(X, y), X, y


def test_get_set_params_round_trip():
    est = SegformerSegmenter(num_classes=5, total_iters=10)
    params = est.get_params()
    assert params["num_classes"] == 5
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(base_lr=2e-3)
    assert est.get_params()["base_lr"] == 2e-3


def test_fit_predict_shapes(fitted):
    est, X, y = fitted
    pred = est.predict(X)
    assert pred.shape == y.shape
    assert pred.dtype == np.uint8


def test_fit_learns_the_toy_task(fitted):
    est, X, y = fitted
    assert est.score(X, y) > 0.8


def test_predict_single_image(fitted):
    est, X, _ = fitted
    single = est.predict(X[0])
    assert single.shape == (1, 64, 64)


def test_unfitted_predict_raises():
    with pytest.raises(DataError):
        SegformerSegmenter().predict(np.zeros((1, 64, 64, 3), dtype=np.float32))


def test_validation_rejects_bad_inputs(fitted):
    est, X, y = fitted
    with pytest.raises(DataError):
        est.predict(np.zeros((1, 64, 64, 4), dtype=np.float32))
    with pytest.raises(DataError):
        est.predict(X * 300.0)                      # out of [0,1]
    with pytest.raises(DataError):
        est.score(X, y.astype(np.float32))          # non-integer labels
    with pytest.raises(DataError):
        est.score(X, y[:, :32, :32])                # label/image shape mismatch
    bad = y.copy()
    bad[0, 0, 0] = 7                                # id outside [0, num_classes)
    with pytest.raises(DataError):
        est.score(X, bad)
