import math

import numpy as np
import pytest
from numpy.random import Generator, Philox

from picard_lab.filter_engine import (
    WeightedEnsemble,
    initial_ensemble,
    make_test_function,
    normalized_estimate,
    recursive_update,
    resample_multinomial,
    run_recursive_filter,
    unnormalized_estimate,
    weighted_mean_exp,
)
from picard_lab.model_core import (
    FilteringModel,
    _constant_matrix,
    euler_paths,
    make_model,
    make_uniform_grid,
    sample_ensemble_increments,
    sample_increments,
)
from picard_lab.weights import picard_log_weights


def _grid(n=4):
    return make_uniform_grid(1.0, n)


def _ensemble(particles, log_weights, grid=None):
    return WeightedEnsemble(np.asarray(particles, float), np.asarray(log_weights, float), 0, grid or _grid())


def _frozen_model(h=None):
    zero = _constant_matrix(0.0, 1)
    return FilteringModel(
        1, 1, lambda x: np.zeros_like(x), lambda x: zero,
        h if h is not None else (lambda x: np.tanh(x)), np.array([1.0]), h_bounded=True,
    )


def test_test_function_presets():
    x = np.array([[0.2], [0.7], [1.4]])
    assert np.array_equal(make_test_function("one")(x), np.ones(3))
    assert np.array_equal(make_test_function("identity")(x), x[:, 0])
    assert np.array_equal(make_test_function("square")(x), x[:, 0] ** 2)
    assert np.array_equal(make_test_function("indicator", threshold=0.5)(x), [0.0, 1.0, 1.0])
    assert np.allclose(make_test_function("tanh")(x), np.tanh(x[:, 0]))
    with pytest.raises(ValueError):
        make_test_function("cubic")


def test_unnormalized_unit_weights_constant_g():
    ens = _ensemble([[1.0], [2.0], [3.0]], [0.0, 0.0, 0.0])
    assert unnormalized_estimate(make_test_function("one"), ens) == 1.0


def test_unnormalized_common_weight_factor():
    g = make_test_function("identity")
    states = [[1.0], [2.0], [5.0]]
    base = unnormalized_estimate(g, _ensemble(states, [0.0] * 3))
    scaled = unnormalized_estimate(g, _ensemble(states, [math.log(3.0)] * 3))
    assert scaled == pytest.approx(3.0 * base, rel=1e-14)


def test_unnormalized_hand_example():
    ens = _ensemble([[0.0], [1.0], [2.0]], [0.0, math.log(2.0), math.log(4.0)])
    got = unnormalized_estimate(make_test_function("identity"), ens)
    assert got == pytest.approx(10.0 / 3.0, rel=1e-14)


def test_signed_g_uses_two_accumulators():
    ens = _ensemble([[-2.0], [3.0], [0.0]], [0.0, 0.0, 0.0])
    got = unnormalized_estimate(make_test_function("identity"), ens)
    assert got == pytest.approx(1.0 / 3.0, rel=1e-14)


def test_weighted_mean_rejects_empty():
    with pytest.raises(ValueError):
        weighted_mean_exp(np.array([]), np.array([]))


def test_normalized_equal_weights_is_plain_mean():
    ens = _ensemble([[1.0], [2.0], [6.0]], [0.7, 0.7, 0.7])
    got = normalized_estimate(make_test_function("identity"), ens)
    assert got == pytest.approx(3.0, rel=1e-14)


def test_normalized_unit_function_is_one():
    rng = Generator(Philox(key=(1, 0)))
    ens = _ensemble(rng.standard_normal((16, 1)), rng.standard_normal(16))
    assert normalized_estimate(make_test_function("one"), ens) == 1.0


def test_normalized_shift_invariance():
    rng = Generator(Philox(key=(2, 0)))
    states = rng.standard_normal((32, 1))
    lw = rng.standard_normal(32)
    g = make_test_function("identity")
    a = normalized_estimate(g, _ensemble(states, lw))
    b = normalized_estimate(g, _ensemble(states, lw + 100.0))
    assert b == pytest.approx(a, rel=1e-12)


def test_nonnegative_g_gives_nonnegative_mass():
    rng = Generator(Philox(key=(3, 0)))
    ens = _ensemble(rng.standard_normal((64, 1)), rng.standard_normal(64))
    assert unnormalized_estimate(make_test_function("square"), ens) >= 0.0
    assert unnormalized_estimate(make_test_function("indicator"), ens) >= 0.0


def test_recursive_update_silent_observation():
    model = _frozen_model(h=lambda x: np.zeros(x.shape[:-1] + (1,)))
    model = FilteringModel(
        1, 1, lambda x: -x, model.diffusion, model.observation, np.array([1.0]), h_bounded=True
    )
    grid = _grid(2)
    ens = initial_ensemble(model, 3, grid)
    noise = np.zeros((2, 3, 1))
    out = recursive_update(ens, model, np.array([0.4]), 2, noise)
    assert np.array_equal(out.log_weights, ens.log_weights)
    # states advanced by Euler only: two drift substeps of size 0.25
    expected = 1.0
    for _ in range(2):
        expected = expected + (-expected) * 0.25
    assert np.allclose(out.particles, expected, atol=1e-15)


def test_recursive_update_frozen_signal_weight_increment():
    model = _frozen_model()
    grid = _grid(4)
    ens = initial_ensemble(model, 3, grid)
    dy = np.array([0.3])
    out = recursive_update(ens, model, dy, 1, np.zeros((1, 3, 1)))
    assert np.array_equal(out.particles, ens.particles)
    h = math.tanh(1.0)
    expected = h * 0.3 - 0.5 * h * h * grid.dt
    assert np.allclose(out.log_weights, expected, rtol=1e-15)


def test_recursive_update_validates_shapes():
    model = _frozen_model()
    ens = initial_ensemble(model, 3, _grid(4))
    with pytest.raises(ValueError):
        recursive_update(ens, model, np.array([0.1, 0.2]), 1, np.zeros((1, 3, 1)))
    with pytest.raises(ValueError):
        recursive_update(ens, model, np.array([0.1]), 2, np.zeros((1, 3, 1)))


def test_two_composed_cells_equal_path_weight():
    model = make_model("ou", theta=0.8, sigma=0.9, kappa=1.0, x0=0.5)
    grid = _grid(2)
    y = sample_increments(grid, 1, seed=5, replica=1)
    count = 4
    noise = sample_ensemble_increments(grid, 1, count, seed=5, replica=0)
    ens = initial_ensemble(model, count, grid)
    states = [ens.particles]
    for i in range(2):
        ens = recursive_update(ens, model, y.increments[i], 1, noise[i : i + 1])
        states.append(ens.particles)
    path_nodes = np.stack(states)
    expected = picard_log_weights(path_nodes, y, model.observation)
    assert np.allclose(ens.log_weights, expected, rtol=1e-12)


def test_recursive_filter_single_cell_equals_batch():
    model = make_model("ou")
    grid = make_uniform_grid(1.0, 1)
    y = sample_increments(grid, 1, seed=6, replica=1)
    count = 16
    noise = sample_ensemble_increments(grid, 1, count, seed=6, replica=0)
    g = make_test_function("identity")
    traj = run_recursive_filter(model, y, g, count, 1, seed=6, noise=noise)
    paths = euler_paths(model, grid, noise)
    lw = picard_log_weights(paths, y, model.observation)
    batch = weighted_mean_exp(g(paths[-1]), lw)
    assert traj.unnormalized[-1] == pytest.approx(batch, rel=1e-12)


def test_recursive_filter_silent_observation_normalizes_to_one():
    model = make_model("ou", kappa=0.0)
    grid = _grid(4)
    y = sample_increments(grid, 1, seed=7, replica=1)
    traj = run_recursive_filter(model, y, make_test_function("one"), 8, 1, seed=7)
    assert np.array_equal(traj.normalized, np.ones(5))
    assert np.array_equal(traj.unnormalized, np.ones(5))


def test_recursive_filter_matches_batch_with_shared_noise():
    model = make_model("ou")
    grid = _grid(4)
    y = sample_increments(grid, 1, seed=8, replica=1)
    count = 4
    substeps = 2
    fine = make_uniform_grid(1.0, 8)
    noise = sample_ensemble_increments(fine, 1, count, seed=8, replica=0)
    g = make_test_function("identity")
    traj = run_recursive_filter(model, y, g, count, substeps, seed=8, noise=noise)
    paths = euler_paths(model, fine, noise)
    assert np.array_equal(traj.final_ensemble.particles, paths[-1])
    lw = picard_log_weights(paths[::substeps], y, model.observation)
    batch = weighted_mean_exp(g(paths[-1]), lw)
    assert traj.unnormalized[-1] == pytest.approx(batch, rel=1e-12)


def test_recursive_filter_lazy_noise_matches_explicit():
    model = make_model("ou")
    grid = _grid(4)
    y = sample_increments(grid, 1, seed=9, replica=1)
    fine = make_uniform_grid(1.0, 12)
    noise = sample_ensemble_increments(fine, 1, 5, seed=9, replica=0)
    g = make_test_function("identity")
    lazy = run_recursive_filter(model, y, g, 5, 3, seed=9)
    explicit = run_recursive_filter(model, y, g, 5, 3, seed=9, noise=noise)
    assert np.array_equal(lazy.unnormalized, explicit.unnormalized)
    assert np.array_equal(lazy.final_ensemble.particles, explicit.final_ensemble.particles)


def test_resample_preserves_total_mass():
    rng = Generator(Philox(key=(10, 0)))
    ens = WeightedEnsemble(rng.standard_normal((64, 1)), rng.standard_normal(64), 2, _grid())
    one = make_test_function("one")
    before = unnormalized_estimate(one, ens)
    after = unnormalized_estimate(one, resample_multinomial(ens, seed=3))
    assert after == pytest.approx(before, rel=1e-12)


def test_resample_degenerate_weight_copies_dominant_particle():
    states = np.array([[1.0], [2.0], [3.0]])
    lw = np.array([0.0, 80.0, 0.0])  # gap > 50
    ens = WeightedEnsemble(states, lw, 1, _grid())
    out = resample_multinomial(ens, seed=4)
    assert np.array_equal(out.particles, np.full((3, 1), 2.0))
    assert np.allclose(out.log_weights, out.log_weights[0])


def test_resample_equal_weights_keeps_unit_estimate():
    states = np.arange(8.0).reshape(8, 1)
    ens = WeightedEnsemble(states, np.zeros(8), 0, _grid())
    out = resample_multinomial(ens, seed=5)
    one = make_test_function("one")
    assert unnormalized_estimate(one, out) == pytest.approx(1.0, rel=1e-14)
    assert set(out.particles[:, 0]).issubset(set(states[:, 0]))


def test_resample_is_statistically_unbiased():
    rng = Generator(Philox(key=(11, 0)))
    states = rng.standard_normal((32, 1))
    lw = rng.standard_normal(32)
    ens = WeightedEnsemble(states, lw, 0, _grid())
    g = make_test_function("identity")
    target = unnormalized_estimate(g, ens)
    reps = 10000
    values = np.empty(reps)
    for k in range(reps):
        shifted = WeightedEnsemble(states, lw, k, ens.grid)  # vary the draw key
        values[k] = unnormalized_estimate(g, resample_multinomial(shifted, seed=12))
    se = float(np.std(values, ddof=1)) / math.sqrt(reps)
    assert abs(float(np.mean(values)) - target) < 4.0 * se
