import numpy as np
import pytest
from conftest import linear_model
from scipy.special import softmax

from likeland import tensor as T
from likeland.attacks import AttackConfig, clean_accuracy
from likeland.data import synthetic_blobs
from likeland.errors import ConfigError, TrainingDivergence
from likeland.likelihood import cross_entropy, likelihood_gradient
from likeland.models import ArchitectureConfig, build, forward_logits
from likeland.tensor import Tensor
from likeland.training import (
    SGD, DefenseConfig, TrainConfig, ams_frob_estimate, jacobian_frob_estimate, joint_loss, projected_sq_norms,
    train, verify_norm_bound, weighted_jacobian_sq_norm,
)


def test_lr_schedule():
    cfg = TrainConfig(epochs=200, learning_rate=0.1)
    assert cfg.lr_decay_epochs == (100, 150)
    assert cfg.lr_at(100) == 0.1 and cfg.lr_at(101) == pytest.approx(0.01) and cfg.lr_at(151) == pytest.approx(0.001)
    assert TrainConfig(epochs=1).lr_decay_epochs == ()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10, lr_decay_epochs=(5, 3))
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)


def test_defense_config():
    assert DefenseConfig("adversarial_training").attack == AttackConfig("pgd", 8 / 255, 2 / 255, 10)
    assert DefenseConfig.from_dict({"mode": "ams_reg", "lambda": 2.0}).lam == 2.0
    rt = DefenseConfig("adversarial_training", attack=AttackConfig("pgd", 0.1, 0.01, 3))
    assert DefenseConfig.from_dict(rt.to_dict()) == rt
    for bad in ({"mode": "trades"}, {"mode": "ams_reg", "lam": -1}, {"mode": "ams_reg", "n_proj": 0}, {"gamma": 1}):
        with pytest.raises(ConfigError):
            DefenseConfig.from_dict(bad)


def test_estimators_on_linear_model(rng):
    w, b = rng.standard_normal((4, 5)), rng.standard_normal(4)
    model = linear_model(w, b)
    x = rng.uniform(0, 1, 5)
    p = softmax(w @ x + b)
    plain, weighted = np.sum(w ** 2), np.sum((p[:, None] * w) ** 2)
    assert jacobian_frob_estimate(model, x, basis=True).value == pytest.approx(plain, rel=1e-13)
    assert ams_frob_estimate(model, x, basis=True).value == pytest.approx(weighted, rel=1e-13)
    assert weighted_jacobian_sq_norm(model, x) == pytest.approx(weighted, rel=1e-13)
    assert jacobian_frob_estimate(model, x, 20000, seed=1).value == pytest.approx(plain, rel=0.05)
    assert ams_frob_estimate(model, x, 20000, seed=2).value == pytest.approx(weighted, rel=0.05)


def test_single_projection_formula(rng):
    w = rng.standard_normal((3, 4))
    model = linear_model(w, np.zeros(3))
    x = rng.uniform(0, 1, size=(2, 4))
    v = rng.standard_normal((1, 2, 3))
    got = projected_sq_norms(model, x, v, weighted=False).data
    expect = 3 * np.sum((v[0] @ w) ** 2, axis=1)
    np.testing.assert_allclose(got, expect, rtol=1e-13)


def test_norm_bound_examples(rng):
    w = rng.standard_normal((3, 4)) * 3
    res = verify_norm_bound(linear_model(w, rng.standard_normal(3)), rng.uniform(0, 1, 4))
    assert res.holds and res.lhs <= res.rhs
    one = verify_norm_bound(linear_model(w[:1], np.zeros(1)), rng.uniform(0, 1, 4))
    assert one.lhs == one.rhs
    # equal logits: grad = mean row, bound = K * sum |row / K|^2 = mean |row|^2
    same = linear_model(np.tile(w[:1], (3, 1)) + 0.0, np.zeros(3))
    r = verify_norm_bound(same, rng.uniform(0, 1, 4))
    assert r.lhs == pytest.approx(r.rhs * 1.0, rel=1e-12)
    assert not verify_norm_bound(linear_model(w, np.zeros(3)), rng.uniform(0, 1, 4), _flip=True).holds


def test_joint_loss_reduces_to_cross_entropy(small_mlp, rng):
    x = rng.uniform(0, 1, size=(5, 4))
    y = rng.integers(0, 3, size=5)
    ce = cross_entropy(forward_logits(small_mlp, x), y, "sum").item()
    assert joint_loss(small_mlp, x, y, DefenseConfig()).item() == ce
    assert joint_loss(small_mlp, x, y, DefenseConfig("ams_reg", lam=0.0)).item() == ce
    v = rng.standard_normal((2, 5, 3))
    reg = joint_loss(small_mlp, x, y, DefenseConfig("jacobian_reg", lam=2.0, n_proj=2), vectors=v).item()
    pen = projected_sq_norms(small_mlp, x, v, weighted=False).data.mean()
    assert reg == pytest.approx(ce + pen, rel=1e-12)


def test_detached_probabilities_change_only_the_gradient(small_mlp, rng):
    x = rng.uniform(0, 1, size=(3, 4))
    y = np.array([0, 1, 2])
    v = rng.standard_normal((1, 3, 3))
    a = joint_loss(small_mlp, x, y, DefenseConfig("ams_reg", lam=1.0), vectors=v)
    b = joint_loss(small_mlp, x, y, DefenseConfig("ams_reg", lam=1.0, detach_probs=True), vectors=v)
    assert a.item() == b.item()
    w = small_mlp.params["2.weight"]
    ga = T.grad(a, w)[0].data
    gb = T.grad(b, w)[0].data
    assert not np.allclose(ga, gb)


def test_sgd_momentum_oracle():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9)
    v = np.zeros(2)
    theta = p.data.copy()
    for step in range(4):
        g = np.array([0.5, 1.0]) * (step + 1)
        p.grad = Tensor(g)
        opt.step()
        v = 0.9 * v + g
        theta = theta - 0.1 * v
    np.testing.assert_allclose(p.data, theta, rtol=1e-15)


def _blobs():
    return synthetic_blobs(40, 3, 8, 6.0, seed=0)


def test_train_is_deterministic_and_learns():
    ds = _blobs()
    model = build(ArchitectureConfig("mlp", (8, 16, 3)), seed=0)
    cfg = TrainConfig(epochs=8, learning_rate=0.01)
    a, log_a = train(model, ds, cfg, DefenseConfig("ams_reg", lam=1.0))
    b, log_b = train(model, ds, cfg, DefenseConfig("ams_reg", lam=1.0))
    assert a.checksum() == b.checksum() and log_a == log_b
    assert [r["epoch"] for r in log_a] == list(range(1, 9))
    assert clean_accuracy(a, ds) > 0.85
    assert model.checksum() != a.checksum()


def test_adversarial_training_runs(small_mlp):
    ds = synthetic_blobs(10, 3, 4, 6.0, seed=0)
    cfg = TrainConfig(epochs=2, learning_rate=0.002)
    for mix in (False, True):
        d = DefenseConfig("adversarial_training", attack=AttackConfig("pgd", 0.05, 0.02, 2), mix_clean=mix)
        _, log = train(small_mlp, ds, cfg, d)
        assert len(log) == 2 and np.isfinite(log[-1]["loss"])


def test_probe_adds_phi(small_mlp):
    from likeland.landscape import GridSpec

    ds = synthetic_blobs(10, 3, 4, 6.0, seed=0)
    _, log = train(small_mlp, ds, TrainConfig(epochs=1, learning_rate=0.001), probe=ds.inputs[:3],
                   flatness_kwargs={"grid_spec": GridSpec(0.05, 1)})
    assert log[0]["phi"] <= 0


def test_divergence_is_reported():
    # a huge penalty multiplies the weights by about -lam each step until they overflow
    ds = synthetic_blobs(10, 3, 4, 6.0, seed=0)
    model = build(ArchitectureConfig("mlp", (4, 3)), seed=0)
    with pytest.raises(TrainingDivergence) as info:
        train(model, ds, TrainConfig(epochs=20, learning_rate=1.0), DefenseConfig("jacobian_reg", lam=1e50))
    assert info.value.exit_code == 3


def test_likelihood_gradient_bounded_by_penalty_after_training():
    ds = _blobs()
    model, _ = train(build(ArchitectureConfig("mlp", (8, 16, 3)), seed=0), ds, TrainConfig(epochs=3, learning_rate=0.002))
    for x in ds.inputs[:10]:
        g = likelihood_gradient(model, x)
        assert np.sum(g ** 2) <= 3 * weighted_jacobian_sq_norm(model, x) * (1 + 1e-12)
