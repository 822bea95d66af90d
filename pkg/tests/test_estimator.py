import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score

from likeland.data import synthetic_blobs
from likeland.estimator import LikelihoodLandscapeClassifier
from likeland.likelihood import log_likelihoods


@pytest.fixture(scope="module")
def blobs():
    ds = synthetic_blobs(30, 3, 6, 8.0, seed=2)
    return ds.inputs, np.array(["cat", "dog", "eel"])[ds.labels]


def test_params_round_trip():
    clf = LikelihoodLandscapeClassifier(defense="ams_reg", lam=2.0)
    params = clf.get_params()
    assert params["lam"] == 2.0 and params["defense"] == "ams_reg"
    copy = clone(clf).set_params(lam=3.0)
    assert copy.lam == 3.0 and clf.lam == 2.0


def test_fit_predict(blobs):
    X, y = blobs
    clf = LikelihoodLandscapeClassifier(epochs=10, learning_rate=0.01).fit(X, y)
    assert list(clf.classes_) == ["cat", "dog", "eel"] and clf.n_features_in_ == 6
    assert set(clf.predict(X)) <= set(clf.classes_)
    assert clf.score(X, y) > 0.8
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert np.array_equal(clf.classes_[proba.argmax(axis=1)], clf.predict(X))
    np.testing.assert_array_equal(clf.score_samples(X), log_likelihoods(clf.model_, X))
    assert clf.decision_function(X).shape == (len(X), 3)
    phi = clf.flatness(X[:3], n_planes=1, eps_max=0.05, resolution=1)
    assert phi.shape == (3,) and np.all(phi <= 0)
    assert 0.0 <= clf.robust_score(X, y, eps=0.05) <= clf.score(X, y)
    assert len(clf.history_) == 10


def test_fit_is_deterministic(blobs):
    X, y = blobs
    a = LikelihoodLandscapeClassifier(epochs=3).fit(X, y)
    b = LikelihoodLandscapeClassifier(epochs=3).fit(X, y)
    assert a.model_.checksum() == b.model_.checksum()


def test_validation(blobs):
    X, y = blobs
    clf = LikelihoodLandscapeClassifier(epochs=1)
    with pytest.raises(NotFittedError):
        clf.predict(X)
    with pytest.raises(ValueError):
        clf.fit(X * 2, y)
    with pytest.raises(ValueError):
        clf.fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        clf.fit(X[:, :5], y[:4])
    clf.fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :5])
    with pytest.raises(ValueError):
        clf.robust_score(X, np.array(["fox"] * len(X)))


def test_works_in_model_selection(blobs):
    X, y = blobs
    scores = cross_val_score(LikelihoodLandscapeClassifier(epochs=4, learning_rate=0.01), X, y, cv=3)
    assert scores.shape == (3,)


def test_image_rows_with_lenet():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, size=(12, 16 * 16))
    y = np.arange(12) % 2
    clf = LikelihoodLandscapeClassifier("lenet-small", hidden=(8,), input_shape=(1, 16, 16), epochs=1)
    with pytest.raises(ValueError):
        LikelihoodLandscapeClassifier("lenet-small").fit(X, y)
    # 16x16 with kernel 5 leaves a 1x1 map after two conv/pool stages
    clf.fit(X, y)
    assert clf.predict(X).shape == (12,)
