import math

import numpy as np
import pytest

from picard_lab.filter_engine import make_test_function
from picard_lab.model_core import (
    FilteringModel,
    NoiseTable,
    make_model,
    make_uniform_grid,
    sample_increments,
)
from picard_lab.oracles import kalman_bucy, single_step_quadrature


def _linear_2d():
    a = np.array([[-1.0, 0.3], [0.0, -0.7]])
    s = 0.8 * np.eye(2)
    h = np.eye(2)
    return FilteringModel(
        2, 2,
        drift=lambda x: x @ a.T,
        diffusion=lambda x: s,
        observation=lambda x: x @ h.T,
        x0=np.array([0.5, -0.25]),
        linear_gaussian=True,
        drift_matrix=a,
        obs_matrix=h,
        diffusion_matrix=s,
    )


def test_requires_linear_model():
    grid = make_uniform_grid(1.0, 8)
    y = sample_increments(grid, 1, seed=1, replica=0)
    with pytest.raises(ValueError):
        kalman_bucy(make_model("ou"), y)


def test_unobserved_mean_follows_drift_flow():
    model = make_model("linear", a=-0.5, sigma=1.0, h=0.0, x0=2.0)
    grid = make_uniform_grid(1.0, 128)
    y = sample_increments(grid, 1, seed=2, replica=0)
    state = kalman_bucy(model, y)
    flow = 2.0 * (1.0 + (-0.5) * grid.dt) ** np.arange(129)
    assert np.allclose(state.means[:, 0], flow, rtol=1e-12)


def test_static_fully_observed_state_stays_put():
    model = make_model("linear", a=0.0, sigma=0.0, h=1.0, x0=1.0)
    grid = make_uniform_grid(1.0, 64)
    y = sample_increments(grid, 1, seed=3, replica=0)
    state = kalman_bucy(model, y)
    assert np.allclose(state.means, 1.0, atol=1e-14)
    assert np.allclose(state.covariances, 0.0, atol=1e-14)


def test_scalar_riccati_steady_state():
    a, sig, hbar = -0.5, 1.0, 1.0
    model = make_model("linear", a=a, sigma=sig, h=hbar, x0=0.0)
    grid = make_uniform_grid(20.0, 20000)
    y = sample_increments(grid, 1, seed=4, replica=0)
    state = kalman_bucy(model, y)
    fixed_point = (a + math.sqrt(a * a + sig * sig * hbar * hbar)) / (hbar * hbar)
    assert abs(state.covariances[-1, 0, 0] - fixed_point) < 1e-4


def test_covariance_symmetric_and_psd():
    model = _linear_2d()
    grid = make_uniform_grid(2.0, 512)
    y = sample_increments(grid, 2, seed=5, replica=0)
    state = kalman_bucy(model, y)
    for p in state.covariances:
        assert np.max(np.abs(p - p.T)) < 1e-12
        assert np.min(np.linalg.eigvalsh(p)) >= -1e-10


def test_mean_is_affine_in_observations():
    model = _linear_2d()
    grid = make_uniform_grid(1.0, 256)
    y = sample_increments(grid, 2, seed=6, replica=0)
    doubled = NoiseTable(grid, 2, 2.0 * y.increments, seed=0, replica=0)
    silent = NoiseTable(grid, 2, np.zeros_like(y.increments), seed=0, replica=0)
    m1 = kalman_bucy(model, y).means
    m2 = kalman_bucy(model, doubled).means
    m0 = kalman_bucy(model, silent).means
    assert np.allclose(m2, 2.0 * m1 - m0, atol=1e-10)


def _driftless(sigma=1.0, kappa=1.0, x0=1.0):
    return make_model("ou", theta=0.0, sigma=sigma, kappa=kappa, x0=x0)


def test_quadrature_weight_factor_is_exact():
    model = _driftless()
    got = single_step_quadrature(model, make_test_function("one"), np.array([0.4]), 1.0)
    h = math.tanh(1.0)
    assert got == math.exp(h * 0.4 - 0.5 * h * h * 1.0)


def test_quadrature_identity_under_silent_observation():
    model = _driftless(kappa=0.0, x0=0.7)
    got = single_step_quadrature(model, make_test_function("identity"), np.array([0.0]), 1.0)
    assert got == pytest.approx(0.7, abs=1e-12)


def test_quadrature_second_moment():
    model = _driftless(kappa=0.0, x0=0.0)
    got = single_step_quadrature(model, make_test_function("square"), np.array([0.0]), 1.0)
    assert got == pytest.approx(1.0, abs=1e-10)


def test_quadrature_node_doubling_converges():
    model = _driftless()
    g = make_test_function("tanh")
    a = single_step_quadrature(model, g, np.array([0.2]), 1.0, order=64)
    b = single_step_quadrature(model, g, np.array([0.2]), 1.0, order=128)
    assert abs(a - b) < 1e-10


def test_quadrature_two_dimensional_moment():
    s = np.eye(2)
    model = FilteringModel(
        2, 1,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: s,
        observation=lambda x: np.zeros(x.shape[:-1] + (1,)),
        x0=np.array([0.3, -0.2]),
    )
    got = single_step_quadrature(model, make_test_function("square"), np.array([0.0]), 1.0)
    assert got == pytest.approx(0.3**2 + 1.0, abs=1e-10)


def test_quadrature_rejects_high_dimension():
    s = np.eye(3)
    model = FilteringModel(
        3, 1,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: s,
        observation=lambda x: np.zeros(x.shape[:-1] + (1,)),
        x0=np.zeros(3),
    )
    with pytest.raises(ValueError):
        single_step_quadrature(model, make_test_function("one"), np.array([0.0]), 1.0)
