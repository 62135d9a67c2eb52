"""Log-domain likelihood weights for the change of measure.

The central quantity is the left-endpoint Riemann-sum log-likelihood

    log W = sum_i [ h(X_{t_i}) . dY_i  -  0.5 * |h(X_{t_i})|^2 * dt ]

with the observation function frozen at the left node of each grid cell.
Freezing turns the stochastic integral into a finite sum over the increment
table, so the value is exact given the node states; there is no further
time-discretization error at this layer.

Because the integrand is piecewise constant, the same sum may be evaluated on
any refinement of the weight grid: summing h(X_{t_i}) against the fine
increments inside cell i gives the identical mathematical value.  The routines
here accept an observation table on the weight grid itself or on any nested
finer grid, which is what lets coupled reference/approximation estimates share
one noise realization exactly.

All weights stay in log scale end to end; averaging exponentiates through a
max-shift so large weights cannot overflow.  Sums over grid cells accumulate
left to right along the time axis (a fixed fold, independent of batch shape),
so identical inputs reduce to identical bits everywhere in the package.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .model_core import NoiseTable

Array = np.ndarray

# A log-scale likelihood weight is represented as a plain float (or a float
# array for a batch); exp of it is strictly positive by construction.
LogWeight = float


def cell_term(h_values: Array, dy: Array, dt: float) -> Array:
    """Per-cell weight contribution h.dy - 0.5*|h|^2*dt.

    h_values: (..., d) observation values frozen at the cell's left node.
    dy:       (..., d) observation increment over the cell (broadcastable).
    Accumulates the d components in fixed order so every caller agrees bitwise.
    """
    dot = h_values[..., 0] * dy[..., 0]
    sq = h_values[..., 0] * h_values[..., 0]
    for j in range(1, h_values.shape[-1]):
        dot = dot + h_values[..., j] * dy[..., j]
        sq = sq + h_values[..., j] * h_values[..., j]
    return dot - (0.5 * dt) * sq


def _fold_rows(terms: Array) -> Array:
    """Left-to-right sum over axis 0; the package's one summation order."""
    acc = terms[0].copy()
    for i in range(1, terms.shape[0]):
        acc += terms[i]
    return acc


def log_weights_from_node_values(h_nodes: Array, y: NoiseTable) -> Array:
    """Batch log-weights from pre-evaluated observation values.

    h_nodes has shape (steps_x, M, d): observation values at the left nodes of
    a weight grid whose step count divides y.grid.steps.  When the weight grid
    is coarser than the table, each frozen value is paired with every fine
    increment inside its cell, which evaluates the same Riemann sum on the
    finer partition.
    """
    h_nodes = np.asarray(h_nodes, dtype=np.float64)
    if h_nodes.ndim != 3:
        raise ValueError(f"h_nodes must have shape (steps, M, d), got {h_nodes.shape}")
    steps_x = h_nodes.shape[0]
    steps_y = y.grid.steps
    if h_nodes.shape[2] != y.dim:
        raise ValueError(f"observation dim {h_nodes.shape[2]} != table dim {y.dim}")
    if steps_y % steps_x != 0:
        raise ValueError(f"table steps {steps_y} not a multiple of weight-grid steps {steps_x}")
    stride = steps_y // steps_x
    if y.dim == 1:
        return _log_weights_scalar_obs(h_nodes[:, :, 0], y.increments[:, 0], stride, y.grid.dt)
    if stride > 1:
        h_nodes = np.repeat(h_nodes, stride, axis=0)
    terms = cell_term(h_nodes, y.increments[:, None, :], y.grid.dt)
    return _fold_rows(terms)


def _log_weights_scalar_obs(h2: Array, dy: Array, stride: int, dt: float) -> Array:
    """d = 1 evaluation without materializing the expanded value table.

    Entry (k, s, m) of the product block equals the expanded-table term matrix
    at fine row k*stride + s, and the final reduction runs over the identical
    C-contiguous (fine steps, M) layout, so the result is bit-identical to the
    generic path.
    """
    steps_x, count = h2.shape
    blocks = h2[:, None, :] * dy.reshape(steps_x, stride, 1)
    sq = (0.5 * dt) * (h2 * h2)
    np.subtract(blocks, sq[:, None, :], out=blocks)
    return _fold_rows(blocks.reshape(steps_x * stride, count))


def picard_log_weights(x_nodes: Array, y: NoiseTable, observation: Callable[[Array], Array]) -> Array:
    """Batch form of picard_log_weight for node arrays of shape (steps+1, M, N)."""
    x_nodes = np.asarray(x_nodes, dtype=np.float64)
    if x_nodes.ndim != 3:
        raise ValueError(f"x_nodes must have shape (steps+1, M, N), got {x_nodes.shape}")
    if x_nodes.shape[0] < 2:
        raise ValueError("need at least one grid cell (two node rows)")
    h_nodes = np.asarray(observation(x_nodes[:-1]), dtype=np.float64)
    return log_weights_from_node_values(h_nodes, y)


def picard_log_weight(x_nodes: Array, y: NoiseTable, observation: Callable[[Array], Array]) -> LogWeight:
    """log of the Riemann-sum likelihood weight for one signal path.

    x_nodes: (steps+1, N) node states on the weight grid; y may live on the
    same grid or on a nested finer one (step count an integer multiple).
    """
    x_nodes = np.asarray(x_nodes, dtype=np.float64)
    if x_nodes.ndim != 2:
        raise ValueError(f"x_nodes must have shape (steps+1, N), got {x_nodes.shape}")
    return float(picard_log_weights(x_nodes[:, None, :], y, observation)[0])


def reference_log_weight(x_fine: Array, y_fine: NoiseTable, observation: Callable[[Array], Array]) -> LogWeight:
    """Fine-grid realization of the exact log-likelihood.

    Identical formula to picard_log_weight, evaluated at the reference
    resolution; it stands proxy for the continuous-time weight, whose
    stochastic integral is not computable exactly.
    """
    x_fine = np.asarray(x_fine, dtype=np.float64)
    if x_fine.shape[0] != y_fine.grid.steps + 1:
        raise ValueError(
            f"path rows {x_fine.shape[0]} != reference steps+1 = {y_fine.grid.steps + 1}"
        )
    return picard_log_weight(x_fine, y_fine, observation)


def reference_log_weights(x_fine: Array, y_fine: NoiseTable, observation: Callable[[Array], Array]) -> Array:
    """Batch form of reference_log_weight, x_fine of shape (steps+1, M, N)."""
    x_fine = np.asarray(x_fine, dtype=np.float64)
    if x_fine.shape[0] != y_fine.grid.steps + 1:
        raise ValueError(
            f"path rows {x_fine.shape[0]} != reference steps+1 = {y_fine.grid.steps + 1}"
        )
    return picard_log_weights(x_fine, y_fine, observation)


def log_weights_joint(h_nodes: Array, y_increments: Array, dt: float) -> Array:
    """Log-weights for joint draws where every path has its own observation noise.

    h_nodes and y_increments both have shape (steps, M, d); entry (i, k) pairs
    path k's frozen observation value with path k's increment over cell i.
    """
    h_nodes = np.asarray(h_nodes, dtype=np.float64)
    y_increments = np.asarray(y_increments, dtype=np.float64)
    if h_nodes.shape != y_increments.shape or h_nodes.ndim != 3:
        raise ValueError(
            f"h_nodes {h_nodes.shape} and y_increments {y_increments.shape} must share "
            "shape (steps, M, d)"
        )
    return _fold_rows(cell_term(h_nodes, y_increments, dt))


def girsanov_mean(log_weights: Array) -> tuple[float, float]:
    """Sample mean of exp(log weight) with its Monte Carlo standard error.

    Computed through a max-shift so the exponentials cannot overflow for
    bounded observation functions.  Fixing the signal path, the weight is an
    exponential martingale in the observation noise, so over joint draws the
    mean estimates 1.
    """
    lw = np.asarray(log_weights, dtype=np.float64).ravel()
    if lw.size < 2:
        raise ValueError(f"need at least 2 samples, got {lw.size}")
    c = float(np.max(lw))
    w = np.exp(lw - c)
    m = float(np.mean(w))
    var = float(np.sum((w - m) ** 2)) / (lw.size - 1)
    scale = math.exp(c)
    return scale * m, scale * math.sqrt(var / lw.size)
