"""Built-in example suite: small, fast checks of documented behavior.

Each check recomputes a documented example or identity and compares against
an independently stated expectation.  `picard-lab selftest` prints one
PASS/FAIL line per check and exits nonzero if anything fails.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from numpy.random import Generator, Philox

from . import experiments, filter_engine, model_core, oracles, weights


def _frozen_model(h_value: Callable[[np.ndarray], np.ndarray] | None = None) -> model_core.FilteringModel:
    zero = model_core._constant_matrix(0.0, 1)
    return model_core.FilteringModel(
        state_dim=1,
        obs_dim=1,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: zero,
        observation=h_value if h_value is not None else (lambda x: np.tanh(x)),
        x0=np.array([1.0]),
        h_bounded=True,
    )


def _checks() -> list[tuple[str, Callable[[], None]]]:
    checks: list[tuple[str, Callable[[], None]]] = []

    def check(name: str):
        def wrap(fn):
            checks.append((name, fn))
            return fn
        return wrap

    @check("grid nodes and left-endpoint lookup")
    def _():
        grid = model_core.make_uniform_grid(1.0, 4)
        assert np.allclose(grid.nodes, [0, 0.25, 0.5, 0.75, 1.0])
        assert grid.cell_left(0.6) == 0.5
        single = model_core.make_uniform_grid(1.0, 1)
        assert all(single.cell_left(t) == 0.0 for t in (0.0, 0.3, 0.999))
        wide = model_core.make_uniform_grid(2.0, 8)
        assert abs(wide.dt - 0.25) < 1e-15
        assert wide.cell_left(1.99) == 1.75

    @check("increment tables regenerate bit-identically")
    def _():
        grid = model_core.make_uniform_grid(1.0, 16)
        a = model_core.sample_increments(grid, 2, seed=9, replica=3)
        b = model_core.sample_increments(grid, 2, seed=9, replica=3)
        c = model_core.sample_increments(grid, 2, seed=9, replica=4)
        assert np.array_equal(a.increments, b.increments)
        assert not np.array_equal(a.increments, c.increments)

    @check("coarsening sums cells left to right")
    def _():
        grid = model_core.make_uniform_grid(1.0, 4)
        table = model_core.NoiseTable(
            grid, 1, np.array([[0.1], [0.2], [-0.3], [0.4]]), seed=0, replica=0
        )
        out = model_core.coarsen_increments(table, 2)
        assert np.allclose(out.increments[:, 0], [0.3, 0.1], atol=1e-15)
        same = model_core.coarsen_increments(table, 1)
        assert np.array_equal(same.increments, table.increments)

    @check("euler path with pure drift")
    def _():
        one = model_core._constant_matrix(0.0, 1)
        model = model_core.FilteringModel(
            1, 1, lambda x: np.ones_like(x), lambda x: one, lambda x: np.tanh(x), np.array([0.0])
        )
        grid = model_core.make_uniform_grid(1.0, 4)
        noise = model_core.sample_increments(grid, 1, seed=1, replica=0)
        path = model_core.euler_maruyama(model, noise)
        assert np.allclose(path[:, 0], [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)

    @check("euler additive-noise closed form is exact")
    def _():
        smat = model_core._constant_matrix(1.5, 1)
        model = model_core.FilteringModel(
            1, 1, lambda x: np.zeros_like(x), lambda x: smat, lambda x: np.tanh(x), np.array([2.0])
        )
        grid = model_core.make_uniform_grid(1.0, 32)
        noise = model_core.sample_increments(grid, 1, seed=5, replica=1)
        path = model_core.euler_maruyama(model, noise)
        closed = np.cumsum(np.concatenate([[2.0], 1.5 * noise.increments[:, 0]]))
        assert np.array_equal(path[:, 0], closed)

    @check("riemann log-weight: zero and constant observation")
    def _():
        grid = model_core.make_uniform_grid(1.0, 8)
        y = model_core.sample_increments(grid, 1, seed=3, replica=0)
        x_nodes = np.zeros((9, 1))
        zero = weights.picard_log_weight(x_nodes, y, lambda x: np.zeros(x.shape[:-1] + (1,)))
        assert zero == 0.0
        total = float(np.sum(y.increments))
        const = weights.picard_log_weight(
            x_nodes, y, lambda x: 2.0 * np.ones(x.shape[:-1] + (1,))
        )
        assert abs(const - (2.0 * total - 2.0)) < 1e-12

    @check("riemann log-weight matches a scalar double loop")
    def _():
        rng = Generator(Philox(key=(11, 0)))
        grid = model_core.make_uniform_grid(1.0, 8)
        y = model_core.sample_increments(grid, 2, seed=12, replica=0)
        x_nodes = rng.standard_normal((9, 1))
        h = lambda x: np.stack([np.tanh(x[..., 0]), np.sin(x[..., 0])], axis=-1)
        got = weights.picard_log_weight(x_nodes, y, h)
        want = 0.0
        for j in range(2):
            for i in range(8):
                hij = float(h(x_nodes[i])[..., j])
                want += hij * y.increments[i, j] - 0.5 * hij * hij * grid.dt
        assert abs(got - want) <= 1e-13 * max(1.0, abs(want))

    @check("reference weight on a coincident grid is bit-equal")
    def _():
        rng = Generator(Philox(key=(13, 0)))
        grid = model_core.make_uniform_grid(1.0, 16)
        y = model_core.sample_increments(grid, 1, seed=14, replica=0)
        x_nodes = rng.standard_normal((17, 1))
        h = lambda x: np.tanh(x)
        assert weights.reference_log_weight(x_nodes, y, h) == weights.picard_log_weight(x_nodes, y, h)

    @check("weighted estimates: hand example and normalization")
    def _():
        ens = filter_engine.WeightedEnsemble(
            np.array([[0.0], [1.0], [2.0]]),
            np.array([0.0, math.log(2.0), math.log(4.0)]),
            0,
            model_core.make_uniform_grid(1.0, 1),
        )
        ident = filter_engine.make_test_function("identity")
        one = filter_engine.make_test_function("one")
        assert abs(filter_engine.unnormalized_estimate(ident, ens) - 10.0 / 3.0) < 1e-14
        assert filter_engine.normalized_estimate(one, ens) == 1.0
        shifted = filter_engine.WeightedEnsemble(
            ens.particles, ens.log_weights + 100.0, 0, ens.grid
        )
        a = filter_engine.normalized_estimate(ident, ens)
        b = filter_engine.normalized_estimate(ident, shifted)
        assert abs(a - b) <= 1e-12 * abs(a)

    @check("recursive update with silent observation leaves weights alone")
    def _():
        model = _frozen_model(lambda x: np.zeros(x.shape[:-1] + (1,)))
        grid = model_core.make_uniform_grid(1.0, 2)
        ens = filter_engine.initial_ensemble(model, 4, grid)
        noise = np.zeros((1, 4, 1))
        out = filter_engine.recursive_update(ens, model, np.array([0.7]), 1, noise)
        assert np.array_equal(out.log_weights, ens.log_weights)
        assert np.array_equal(out.particles, ens.particles)

    @check("recursive filter equals the batch computation")
    def _():
        model = model_core.make_model("ou")
        grid = model_core.make_uniform_grid(1.0, 4)
        y = model_core.sample_increments(grid, 1, seed=21, replica=1)
        count = 8
        fine = model_core.make_uniform_grid(1.0, 8)
        noise = model_core.sample_ensemble_increments(fine, 1, count, seed=21, replica=0)
        traj = filter_engine.run_recursive_filter(
            model, y, filter_engine.make_test_function("identity"), count, 2, seed=21, noise=noise
        )
        paths = model_core.euler_paths(model, fine, noise)
        assert np.array_equal(traj.final_ensemble.particles, paths[-1])
        lw = weights.picard_log_weights(paths[::2], y, model.observation)
        rel = np.max(np.abs(traj.final_ensemble.log_weights - lw) / np.maximum(1e-30, np.abs(lw)))
        assert rel <= 1e-12

    @check("multinomial resampling preserves total mass")
    def _():
        rng = Generator(Philox(key=(31, 0)))
        ens = filter_engine.WeightedEnsemble(
            rng.standard_normal((64, 1)),
            rng.standard_normal(64),
            3,
            model_core.make_uniform_grid(1.0, 8),
        )
        one = filter_engine.make_test_function("one")
        before = filter_engine.unnormalized_estimate(one, ens)
        after = filter_engine.unnormalized_estimate(one, filter_engine.resample_multinomial(ens, 7))
        assert abs(before - after) <= 1e-12 * abs(before)

    @check("kalman oracle: degenerate systems")
    def _():
        grid = model_core.make_uniform_grid(1.0, 64)
        y = model_core.sample_increments(grid, 1, seed=41, replica=0)
        silent = model_core.make_model("linear", a=0.0, sigma=1.0, h=0.0, x0=1.0)
        state = oracles.kalman_bucy(silent, y)
        assert np.allclose(state.means, 1.0, atol=1e-14)
        static = model_core.make_model("linear", a=0.0, sigma=0.0, h=1.0, x0=1.0)
        state = oracles.kalman_bucy(static, y)
        assert np.allclose(state.means, 1.0, atol=1e-14)
        assert np.allclose(state.covariances, 0.0, atol=1e-14)

    @check("kalman oracle: scalar steady-state variance")
    def _():
        a, sig, hbar = -0.8, 1.0, 1.3
        model = model_core.make_model("linear", a=a, sigma=sig, h=hbar, x0=0.0)
        grid = model_core.make_uniform_grid(20.0, 20000)
        y = model_core.sample_increments(grid, 1, seed=42, replica=0)
        state = oracles.kalman_bucy(model, y)
        limit = (a + math.sqrt(a * a + sig * sig * hbar * hbar)) / (hbar * hbar)
        assert abs(state.covariances[-1, 0, 0] - limit) < 1e-4

    @check("quadrature oracle: weight factor and gaussian moment")
    def _():
        model = model_core.make_model("ou", theta=0.0, sigma=1.0, kappa=1.0, x0=1.0)
        one = filter_engine.make_test_function("one")
        y_total = np.array([0.4])
        got = oracles.single_step_quadrature(model, one, y_total, 1.0)
        hx = math.tanh(1.0)
        assert got == math.exp(hx * 0.4 - 0.5 * hx * hx)
        centered = model_core.make_model("ou", theta=0.0, sigma=1.0, kappa=0.0, x0=0.0)
        square = filter_engine.make_test_function("square")
        assert abs(oracles.single_step_quadrature(centered, square, np.array([0.0]), 1.0) - 1.0) < 1e-10

    @check("lp norm examples")
    def _():
        value, se = experiments.lp_norm([0.0, 0.0, 0.0], 2.0)
        assert value == 0.0 and se == 0.0
        value, _ = experiments.lp_norm([3.0, 4.0], 2.0)
        assert abs(value - math.sqrt(12.5)) < 1e-14

    @check("slope fit recovers synthetic power laws")
    def _():
        for alpha in (0.5, 1.0, 2.0):
            pts = [(n, 3.0 * n ** (-alpha)) for n in (4, 8, 16, 32)]
            fit = experiments.fit_slope(pts)
            assert abs(fit.slope + alpha) < 1e-12
            assert fit.residual < 1e-12
        flat = experiments.fit_slope([(4, 2.0), (8, 2.0), (16, 2.0)])
        assert abs(flat.slope) < 1e-12

    @check("coupled discrepancy vanishes in the exact cases")
    def _():
        grid = model_core.make_uniform_grid(1.0, 16)
        fine = model_core.sample_ensemble_increments(grid, 1, 6, seed=51, replica=1)
        y = model_core.sample_increments(grid, 1, seed=51, replica=0)
        ident = filter_engine.make_test_function("identity")
        ou = model_core.make_model("ou")
        paths = model_core.euler_paths(ou, grid, fine)
        assert experiments.coupled_discrepancy(y, paths, ident, 16, ou.observation) == 0.0
        zero_h = lambda x: np.zeros(x.shape[:-1] + (1,))
        for n in (2, 4, 8, 16):
            assert experiments.coupled_discrepancy(y, paths, ident, n, zero_h) == 0.0
        frozen = _frozen_model()
        frozen_paths = model_core.euler_paths(frozen, grid, np.zeros_like(fine))
        for n in (2, 4, 8, 16):
            assert experiments.coupled_discrepancy(y, frozen_paths, ident, n, frozen.observation) == 0.0

    @check("exponential weight average of a two-point sample")
    def _():
        mean, _ = weights.girsanov_mean(np.array([math.log(2.0), math.log(0.5)]))
        assert abs(mean - 1.25) < 1e-14

    return checks


def run_selftest(verbose: bool = True) -> list[tuple[str, bool, str]]:
    """Run every check; returns (name, passed, detail) per check."""
    results = []
    for name, fn in _checks():
        try:
            fn()
        except AssertionError as exc:
            results.append((name, False, str(exc) or "assertion failed"))
        except Exception as exc:  # a crash is a failure, not an abort
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
        else:
            results.append((name, True, ""))
    if verbose:
        for name, ok, detail in results:
            mark = "PASS" if ok else "FAIL"
            suffix = f" ({detail})" if detail else ""
            print(f"{mark} {name}{suffix}")
    return results
