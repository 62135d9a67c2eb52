"""Time grids, Brownian increment tables, model presets, and the Euler-Maruyama
integrator for the hidden signal.

The hidden signal solves dX = b(X) dt + sigma(X) dB in R^N and the observation
process integrates h(X) plus an independent Brownian motion in R^d.  Everything
downstream consumes the signal only through node values on a uniform grid and
through tables of Brownian increments.

Randomness is counter-based: an increment table is a pure function of
(seed, replica, grid, dim).  Distinct replicas use distinct Philox key blocks,
so replicated experiments regenerate identical noise no matter how the work is
scheduled across processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.random import Generator, Philox

Array = np.ndarray

_U64 = 2**64


class IntegrationError(RuntimeError):
    """A propagation step produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state encountered at step {step}")
        self.step = step


def _check_u64(name: str, value: int) -> int:
    if not isinstance(value, (int, np.integer)) or not 0 <= int(value) < _U64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i*horizon/steps on [0, horizon]."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (isinstance(self.horizon, (int, float)) and math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be a positive finite real, got {self.horizon!r}")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> Array:
        return np.arange(self.steps + 1) * self.dt

    def cell_index(self, t: float) -> int:
        """Index i of the cell [t_i, t_{i+1}) containing t, for t in [0, horizon)."""
        if not 0.0 <= t < self.horizon:
            raise ValueError(f"t={t} outside [0, {self.horizon})")
        # clamp guards the t*steps/horizon rounding up at the right edge
        return min(int(math.floor(t * self.steps / self.horizon)), self.steps - 1)

    def cell_left(self, t: float) -> float:
        """Left node of the cell containing t (the left-endpoint lookup)."""
        return self.cell_index(t) * self.dt


def make_uniform_grid(horizon: float, steps: int) -> TimeGrid:
    """Build the uniform grid with the given horizon and cell count."""
    return TimeGrid(horizon, steps)


@dataclass(frozen=True)
class NoiseTable:
    """Brownian increments on a uniform grid.

    Row i holds the d-dimensional increment over [t_i, t_{i+1}).  The table is
    identified by (seed, replica, grid, dim): regenerating with the same
    identity yields bit-identical entries.
    """

    grid: TimeGrid
    dim: int
    increments: Array
    seed: int
    replica: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        inc = np.asarray(self.increments, dtype=np.float64)
        if inc.shape != (self.grid.steps, self.dim):
            raise ValueError(
                f"increments shape {inc.shape} does not match (steps, dim)="
                f"({self.grid.steps}, {self.dim})"
            )
        inc.flags.writeable = False
        object.__setattr__(self, "increments", inc)


def _stream(seed: int, replica: int) -> Generator:
    return Generator(Philox(key=(_check_u64("seed", seed), _check_u64("replica", replica))))


def sample_increments(grid: TimeGrid, dim: int, seed: int, replica: int) -> NoiseTable:
    """Draw a Brownian increment table; entries are N(0, dt) i.i.d.

    A pure function of (seed, replica, grid, dim).
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rows = _stream(seed, replica).standard_normal((grid.steps, dim)) * math.sqrt(grid.dt)
    return NoiseTable(grid=grid, dim=dim, increments=rows, seed=int(seed), replica=int(replica))


def sample_ensemble_increments(
    grid: TimeGrid, dim: int, count: int, seed: int, replica: int
) -> Array:
    """Increments for `count` independent paths, shape (steps, count, dim).

    Step-major layout: slicing rows [i*k, (i+1)*k) reproduces exactly the draws
    a stepwise consumer of the same stream would make, so lazily generated and
    pre-generated noise agree bit for bit.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = _stream(seed, replica).standard_normal((grid.steps, count, dim))
    out *= math.sqrt(grid.dt)
    return out


def coarsen_increments(fine: NoiseTable, factor: int) -> NoiseTable:
    """Merge consecutive cells: output row i = sum of fine rows [i*factor, (i+1)*factor).

    Per-cell sums accumulate left to right so nested grids couple exactly.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if fine.grid.steps % factor != 0:
        raise ValueError(f"steps={fine.grid.steps} not divisible by factor={factor}")
    out_steps = fine.grid.steps // factor
    blocks = fine.increments.reshape(out_steps, factor, fine.dim)
    acc = blocks[:, 0, :].copy()
    for k in range(1, factor):
        acc += blocks[:, k, :]
    coarse_grid = TimeGrid(fine.grid.horizon, out_steps)
    return NoiseTable(grid=coarse_grid, dim=fine.dim, increments=acc, seed=fine.seed, replica=fine.replica)


@dataclass(frozen=True)
class FilteringModel:
    """Signal/observation model.

    drift, diffusion and observation must accept arrays of shape (..., N) and
    return (..., N), (..., N, N) (broadcastable; constant diffusions may return
    a bare (N, N)) and (..., d) respectively.  Lipschitz regularity of the
    coefficients is the caller's responsibility for custom models; the shipped
    presets satisfy it.
    """

    state_dim: int
    obs_dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    observation: Callable[[Array], Array]
    x0: Array
    h_bounded: bool = False
    linear_gaussian: bool = False
    drift_matrix: Array | None = None
    obs_matrix: Array | None = None
    diffusion_matrix: Array | None = None

    def __post_init__(self):
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ValueError("state_dim and obs_dim must be >= 1")
        x0 = np.asarray(self.x0, dtype=np.float64).reshape(self.state_dim)
        x0.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        if self.linear_gaussian:
            for name in ("drift_matrix", "obs_matrix", "diffusion_matrix"):
                if getattr(self, name) is None:
                    raise ValueError(f"linear_gaussian model requires {name}")


def _matvec(mat: Array, vec: Array) -> Array:
    """out[..., i] = sum_j mat[..., i, j] * vec[..., j], accumulated in j order.

    The explicit j loop keeps batched and single-state evaluations bitwise
    identical (BLAS reductions would not).
    """
    out = mat[..., :, 0] * vec[..., 0:1]
    for j in range(1, vec.shape[-1]):
        out = out + mat[..., :, j] * vec[..., j : j + 1]
    return out


def euler_step(model: FilteringModel, x: Array, dt: float, db: Array) -> Array:
    """One Euler-Maruyama update, elementwise over any leading batch shape."""
    return x + model.drift(x) * dt + _matvec(model.diffusion(x), db)


def euler_maruyama(model: FilteringModel, noise: NoiseTable) -> Array:
    """Integrate the signal along one increment table.

    Returns the path at grid nodes, shape (steps+1, N), starting from model.x0.
    Raises IntegrationError (with the step index) if a state goes non-finite.
    """
    if noise.dim != model.state_dim:
        raise ValueError(f"noise dim {noise.dim} != state dim {model.state_dim}")
    steps = noise.grid.steps
    dt = noise.grid.dt
    path = np.empty((steps + 1, model.state_dim))
    x = model.x0.copy()
    path[0] = x
    for i in range(steps):
        x = euler_step(model, x, dt, noise.increments[i])
        if not np.all(np.isfinite(x)):
            raise IntegrationError(i)
        path[i + 1] = x
    return path


def euler_paths(model: FilteringModel, grid: TimeGrid, increments: Array) -> Array:
    """Integrate a whole ensemble at once.

    increments has shape (steps, M, N) (see sample_ensemble_increments); the
    returned node array has shape (steps+1, M, N).  Column k equals the
    single-path integration of increments[:, k, :] bit for bit.
    """
    increments = np.asarray(increments, dtype=np.float64)
    if increments.ndim != 3 or increments.shape[2] != model.state_dim:
        raise ValueError(f"expected increments of shape (steps, M, {model.state_dim})")
    if increments.shape[0] != grid.steps:
        raise ValueError(f"increments rows {increments.shape[0]} != grid steps {grid.steps}")
    steps, count, dim = increments.shape
    dt = grid.dt
    out = np.empty((steps + 1, count, dim))
    x = np.broadcast_to(model.x0, (count, dim)).copy()
    out[0] = x
    for i in range(steps):
        x = euler_step(model, x, dt, increments[i])
        if not np.all(np.isfinite(x)):
            raise IntegrationError(i)
        out[i + 1] = x
    return out


# ---------------------------------------------------------------------------
# Model presets


def _constant_matrix(value: float | Array, dim: int) -> Array:
    mat = np.asarray(value, dtype=np.float64)
    if mat.ndim == 0:
        mat = mat * np.eye(dim)
    mat = mat.reshape(dim, dim)
    mat.flags.writeable = False
    return mat


def _ou_model(theta: float = 1.0, sigma: float = 1.0, kappa: float = 1.0, x0: float = 1.0) -> FilteringModel:
    """Mean-reverting scalar signal with bounded observation h(x) = tanh(kappa*x)."""
    th = float(theta)
    smat = _constant_matrix(float(sigma), 1)
    kp = float(kappa)
    return FilteringModel(
        state_dim=1,
        obs_dim=1,
        drift=lambda x: -th * x,
        diffusion=lambda x: smat,
        observation=lambda x: np.tanh(kp * x),
        x0=np.array([float(x0)]),
        h_bounded=True,
    )


def _linear_model(a: float = -0.5, sigma: float = 1.0, h: float = 1.0, x0: float = 1.0) -> FilteringModel:
    """Scalar linear-Gaussian pair: b(x) = a*x, constant sigma, h(x) = h*x.

    The observation function is unbounded; this preset exists to feed the
    Kalman-Bucy oracle, not to satisfy the moment bounds the bounded presets do.
    """
    amat = _constant_matrix(float(a), 1)
    smat = _constant_matrix(float(sigma), 1)
    hmat = np.asarray([[float(h)]], dtype=np.float64)
    hmat.flags.writeable = False
    hv = float(h)
    av = float(a)
    return FilteringModel(
        state_dim=1,
        obs_dim=1,
        drift=lambda x: av * x,
        diffusion=lambda x: smat,
        observation=lambda x: hv * x,
        x0=np.array([float(x0)]),
        h_bounded=False,
        linear_gaussian=True,
        drift_matrix=amat,
        obs_matrix=hmat,
        diffusion_matrix=smat,
    )


def _sine_model(theta: float = 1.0, sigma: float = 1.0, alpha: float = 1.0, x0: float = 1.0) -> FilteringModel:
    """Mean-reverting scalar signal observed through h(x) = alpha*sin(x)."""
    th = float(theta)
    smat = _constant_matrix(float(sigma), 1)
    al = float(alpha)
    return FilteringModel(
        state_dim=1,
        obs_dim=1,
        drift=lambda x: -th * x,
        diffusion=lambda x: smat,
        observation=lambda x: al * np.sin(x),
        x0=np.array([float(x0)]),
        h_bounded=True,
    )


MODEL_PRESETS: Mapping[str, Callable[..., FilteringModel]] = {
    "ou": _ou_model,
    "linear": _linear_model,
    "sine": _sine_model,
}

MODEL_PRESET_PARAMS: Mapping[str, tuple[str, ...]] = {
    "ou": ("theta", "sigma", "kappa", "x0"),
    "linear": ("a", "sigma", "h", "x0"),
    "sine": ("theta", "sigma", "alpha", "x0"),
}


def make_model(name: str, **params: float) -> FilteringModel:
    """Instantiate a named preset with keyword parameters."""
    if name not in MODEL_PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}")
    allowed = MODEL_PRESET_PARAMS[name]
    bad = sorted(set(params) - set(allowed))
    if bad:
        raise ValueError(f"unknown parameter(s) {bad} for preset {name!r}; allowed: {list(allowed)}")
    return MODEL_PRESETS[name](**params)
