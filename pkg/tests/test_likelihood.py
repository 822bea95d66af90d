import numpy as np
import pytest
from conftest import linear_model
from scipy.special import logsumexp, softmax

from likeland.errors import DimensionError, InputError
from likeland.likelihood import (
    ams_score, cross_entropy, input_jacobian, likelihood_gradient, log_likelihood, log_likelihoods,
    relative_log_likelihood,
)
from likeland.tensor import Tensor


def test_linear_model_closed_forms(rng):
    w, b = rng.standard_normal((4, 6)), rng.standard_normal(4)
    model = linear_model(w, b)
    x = rng.uniform(0, 1, size=(5, 6))
    z = x @ w.T + b
    np.testing.assert_allclose(log_likelihoods(model, x), logsumexp(z, axis=1), rtol=1e-13)
    p = softmax(z, axis=1)
    # d lse(Wx + b) / dx = W^T softmax(Wx + b)
    np.testing.assert_allclose(likelihood_gradient(model, x), p @ w, rtol=1e-12)
    np.testing.assert_allclose(ams_score(model, x), -np.linalg.norm(p @ w, axis=1), rtol=1e-12)
    jac, probs = input_jacobian(model, x)
    np.testing.assert_allclose(jac, np.broadcast_to(w, (5, 4, 6)))
    np.testing.assert_allclose(probs, p, rtol=1e-13)


def test_two_gradient_paths_agree(small_mlp, rng):
    x = rng.uniform(0, 1, size=(4, 4))
    a = likelihood_gradient(small_mlp, x, "autodiff")
    w = likelihood_gradient(small_mlp, x, "weighted")
    assert np.max(np.abs(a - w)) < 1e-12
    with pytest.raises(ValueError):
        likelihood_gradient(small_mlp, x, "symbolic")


def test_relative_likelihood_ignores_logit_shift(rng):
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    x, xp = rng.uniform(0, 1, 4), rng.uniform(0, 1, 4)
    base = relative_log_likelihood(linear_model(w, b), xp, x)
    shifted = relative_log_likelihood(linear_model(w, b + 17.0), xp, x)
    assert abs(base - shifted) < 1e-9
    assert relative_log_likelihood(linear_model(w, b), x, x) == 0.0


def test_single_vs_batch_interfaces(small_mlp, rng):
    x = rng.uniform(0, 1, size=4)
    v = log_likelihood(small_mlp, x, sample_id="s0")
    assert v.sample_id == "s0" and v.value == log_likelihoods(small_mlp, x[None])[0]
    assert np.shape(likelihood_gradient(small_mlp, x)) == (4,)
    assert isinstance(ams_score(small_mlp, x), float)
    with pytest.raises(DimensionError):
        log_likelihood(small_mlp, np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        log_likelihoods(small_mlp, np.zeros((2, 5)))


def test_cross_entropy_matches_scipy(rng):
    z = rng.standard_normal((5, 3)) * 4
    y = rng.integers(0, 3, size=5)
    expect = logsumexp(z, axis=1) - z[np.arange(5), y]
    np.testing.assert_allclose(cross_entropy(Tensor(z), y, "none").data, expect, rtol=1e-13)
    assert abs(cross_entropy(Tensor(z), y, "sum").item() - expect.sum()) < 1e-12
    assert abs(cross_entropy(Tensor(z), y).item() - expect.mean()) < 1e-12
    with pytest.raises(InputError):
        cross_entropy(Tensor(z), np.array([0, 1, 2, 3, 0]))
    with pytest.raises(DimensionError):
        cross_entropy(Tensor(z), np.array([0, 1]))


def test_ams_score_nonpositive(small_mlp, rng):
    assert np.all(ams_score(small_mlp, rng.uniform(0, 1, size=(10, 4))) <= 0)
