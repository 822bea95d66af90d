import numpy as np
import pytest
from conftest import linear_model
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from likeland.attacks import (
    PRESETS, AttackConfig, adversarial_accuracy, clean_accuracy, fgsm, loss_input_gradient, pgd, predict, preset,
    project,
)
from likeland.data import Dataset
from likeland.errors import ConfigError


def test_loss_gradient_closed_form(rng):
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    x = rng.uniform(0, 1, size=(5, 4))
    y = rng.integers(0, 3, size=5)
    p = softmax(x @ w.T + b, axis=1)
    p[np.arange(5), y] -= 1.0
    np.testing.assert_allclose(loss_input_gradient(linear_model(w, b), x, y), p @ w, rtol=1e-12)


def test_fgsm_closed_form(rng):
    w, b = rng.standard_normal((3, 6)), rng.standard_normal(3)
    model = linear_model(w, b)
    x = rng.uniform(0.2, 0.8, size=(4, 6))
    y = rng.integers(0, 3, size=4)
    g = loss_input_gradient(model, x, y)
    adv = fgsm(model, x, y, 0.1)
    # equal up to the last-ulp nudge that keeps |adv - x| <= eps exactly
    np.testing.assert_allclose(adv, np.clip(x + 0.1 * np.sign(g), 0, 1), rtol=0, atol=1e-15)
    assert np.all(np.abs(adv - x) <= 0.1)


def test_fgsm_leaves_zero_gradient_pixels():
    model = linear_model(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2))
    x = np.array([0.5, 0.5])
    adv = fgsm(model, x, 0, 0.1)
    assert adv[1] == 0.5 and adv[0] == pytest.approx(0.4)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=6),
    st.lists(st.floats(-3, 3), min_size=6, max_size=6),
    st.floats(0, 1),
)
def test_project_is_exact(xs, deltas, eps):
    x = np.array(xs)
    adv = project(x + np.array(deltas[: len(xs)]), x, eps)
    assert np.all(np.abs(adv - x) <= eps)
    assert np.all((adv >= 0) & (adv <= 1))


def test_projection_order_commutes(rng):
    for _ in range(200):
        x = rng.uniform(0, 1, 8)
        eps = rng.uniform(0, 0.5)
        z = x + rng.uniform(-1, 1, 8)
        other = np.clip(np.clip(z, 0, 1), x - eps, x + eps)
        np.testing.assert_allclose(project(z, x, eps), other, atol=1e-15)


def test_pgd_budget_and_fgsm_equivalence(small_mlp, rng):
    x = rng.uniform(0, 1, size=(6, 4))
    y = rng.integers(0, 3, size=6)
    for eps in (0.0, 2 / 255, 0.3):
        adv = pgd(small_mlp, x, y, AttackConfig("pgd", eps, eps / 3 + 1e-3, 7, random_start=True), seed=1)
        assert np.max(np.abs(adv - x)) <= eps
        one = pgd(small_mlp, x, y, AttackConfig("pgd", eps, 2 * eps + 1e-9, 1))
        assert np.array_equal(one, fgsm(small_mlp, x, y, eps))


def test_pgd_random_start_seeded(small_mlp, rng):
    x = rng.uniform(0, 1, size=(3, 4))
    cfg = AttackConfig("pgd", 0.1, 0.02, 3, random_start=True)
    assert np.array_equal(pgd(small_mlp, x, [0, 1, 2], cfg, seed=4), pgd(small_mlp, x, [0, 1, 2], cfg, seed=4))


def test_presets():
    assert PRESETS["pgd-cifar"] == AttackConfig("pgd", 8 / 255, 2 / 255, 5)
    assert PRESETS["pgd-fmnist"] == AttackConfig("pgd", 25 / 255, 6.25 / 255, 10)
    f = preset("fgsm", 0.2)
    assert f.kind == "fgsm" and f.eps == 0.2 and f.step_size == 0.2
    with pytest.raises(ConfigError):
        preset("cw")
    with pytest.raises(ConfigError):
        AttackConfig("pgd", -1.0)
    with pytest.raises(ConfigError):
        AttackConfig("pgd", 0.1, 0.0, 3)
    with pytest.raises(ConfigError):
        pgd(None, np.zeros(2), [0], AttackConfig("fgsm"))


def test_accuracy_helpers(small_mlp, rng):
    ds = Dataset(rng.uniform(0, 1, size=(30, 4)), rng.integers(0, 3, size=30))
    acc = clean_accuracy(small_mlp, ds)
    assert acc == np.mean(predict(small_mlp, ds.inputs) == ds.labels)
    assert adversarial_accuracy(small_mlp, ds, None) == acc
    assert adversarial_accuracy(small_mlp, ds, AttackConfig("pgd", 0.0, 0.01, 2)) == acc
    assert adversarial_accuracy(small_mlp, ds, AttackConfig("pgd", 0.2, 0.05, 10)) <= acc
