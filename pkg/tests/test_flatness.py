import numpy as np
import pytest
from conftest import linear_model
from scipy.special import softmax

from likeland.errors import ConfigError, InputError
from likeland.flatness import dataset_flatness, neighborhood_points, phi_flatness, sample_seeds
from likeland.landscape import GridSpec, random_plane


def brute_phi(w, b, x, n_planes, grid, seed):
    """Mean of -|W^T p(x')| over every grid point of the same planes, with plain loops."""
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(n_planes):
        plane = random_plane(x, grid.eps_max, grid.resolution, rng)
        for a in grid.axis:
            for c in grid.axis:
                xp = x + a * plane.d + c * plane.d_perp
                p = softmax(w @ xp + b)
                scores.append(-np.linalg.norm(w.T @ p))
    return np.mean(scores)


def test_phi_matches_brute_force(rng):
    w, b = rng.standard_normal((3, 5)), rng.standard_normal(3)
    model = linear_model(w, b)
    x = rng.uniform(0, 1, 5)
    grid = GridSpec(0.2, 2)
    for seed in range(3):
        got = phi_flatness(model, x, 2, grid, seed)
        assert abs(got - brute_phi(w, b, x, 2, grid, seed)) < 1e-12


def test_single_class_phi_is_weight_norm(rng):
    w = rng.standard_normal((1, 4))
    model = linear_model(w, np.zeros(1))
    assert abs(phi_flatness(model, rng.uniform(0, 1, 4), 3, GridSpec(0.1, 2)) + np.linalg.norm(w)) < 1e-12


def test_resolution_zero_is_ams_at_x(small_mlp, rng):
    from likeland.likelihood import ams_score

    x = rng.uniform(0, 1, 4)
    assert phi_flatness(small_mlp, x, 1, GridSpec(0.1, 0)) == ams_score(small_mlp, x)


def test_dataset_phi(small_mlp, rng):
    xs = rng.uniform(0, 1, size=(5, 4))
    grid = GridSpec(0.05, 1)
    rep = dataset_flatness(small_mlp, xs, 2, grid, seed=3)
    seeds = sample_seeds(3, 5)
    expect = [phi_flatness(small_mlp, x, 2, grid, s) for x, s in zip(xs, seeds)]
    assert rep.per_sample_phi == expect and rep.Phi == np.mean(expect)
    assert rep.sample_count == 5 and rep.model_checksum == small_mlp.checksum()
    d = rep.to_dict()
    assert set(d) == {"phi_per_sample", "Phi", "n_planes", "grid", "seed", "sample_count", "model_checksum"}
    single = dataset_flatness(small_mlp, xs[:1], 2, grid, seed=3)
    assert single.Phi == single.per_sample_phi[0]


def test_phi_validation(small_mlp):
    with pytest.raises(ConfigError):
        phi_flatness(small_mlp, np.zeros(4), 0)
    with pytest.raises(InputError):
        phi_flatness(small_mlp, np.zeros((2, 4)))
    with pytest.raises(InputError):
        dataset_flatness(small_mlp, np.zeros((0, 4)))


def test_neighborhood_point_count():
    pts = neighborhood_points(np.zeros(3), 2, GridSpec(0.1, 2), seed=0)
    assert pts.shape == (50, 3)
