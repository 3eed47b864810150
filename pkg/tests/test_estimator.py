import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ena.estimator import ENAClassifier
from ena.harness.tasks import local_pattern


@pytest.fixture(scope="module")
def data():
    d = local_pattern((6, 6), 48, classes=2, seed=0, decoys=0)
    names = np.array(["few", "many"])[d.labels]
    return d.images, names


def make(**kw):
    base = dict(grid=(6, 6), channels=3, d_model=8, heads=2, window=(2, 2), tile=(2, 2),
                steps=4, batch_size=8, warmup=1)
    base.update(kw)
    return ENAClassifier(**base)


def test_params_round_trip_and_clone():
    est = make(lr=0.5)
    assert est.get_params()["lr"] == 0.5
    est.set_params(steps=9)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_fit_predict_score(data):
    X, y = data
    est = make().fit(X, y)
    assert set(est.classes_) == {"few", "many"}
    pred = est.predict(X)
    assert pred.shape == (48,) and set(pred) <= {"few", "many"}
    proba = est.predict_proba(X)
    assert proba.shape == (48, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert 0.0 <= est.score(X, y) <= 1.0
    assert est.n_features_in_ == 3 * 36


def test_flattened_rows_are_accepted(data):
    X, y = data
    est = make().fit(X.reshape(48, -1), y)
    assert np.array_equal(est.predict(X.reshape(48, -1)), est.predict(X))


def test_transform_returns_pooled_features(data):
    X, y = data
    assert make().fit(X, y).transform(X[:5]).shape == (5, 8)


def test_fixed_random_state_is_deterministic(data):
    X, y = data
    a = make(random_state=3).fit(X, y).predict_proba(X)
    b = make(random_state=3).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_unfitted_estimator_raises(data):
    with pytest.raises(NotFittedError):
        make().predict(data[0])


@pytest.mark.parametrize("bad", [np.zeros((4, 3, 5, 5)), np.zeros((4, 7)), np.zeros((0, 3, 6, 6))])
def test_bad_shapes_are_rejected(bad):
    with pytest.raises(ValueError):
        make().fit(bad, np.zeros(len(bad)))


def test_non_finite_input_is_rejected(data):
    X = data[0].copy()
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        make().fit(X, data[1])


def test_label_shape_and_type_are_checked(data):
    X, y = data
    with pytest.raises(ValueError):
        make().fit(X, y[:-1])
    with pytest.raises(ValueError):
        make().fit(X, np.linspace(0, 1, len(y)))


def test_single_channel_grid_input():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((16, 4, 4))
    y = (X.sum(axis=(1, 2)) > 0).astype(int)
    est = ENAClassifier(grid=(4, 4), d_model=8, heads=2, window=(2, 2), tile=(2, 2), steps=2,
                        batch_size=8).fit(X, y)
    assert est.predict(X).shape == (16,)
