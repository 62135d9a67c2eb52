"""Independent ground truths for the estimator pipeline.

kalman_bucy integrates the exact linear-Gaussian filter (mean ODE driven by
the observation increments plus the matrix Riccati flow) on the fine grid, and
single_step_quadrature evaluates the one-cell approximate filter for driftless
constant-diffusion models by Gauss-Hermite quadrature.  Neither shares any
estimator code path beyond the one-cell weight formula, which both sides of
the oracle comparison must spell identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .filter_engine import TestFunction
from .model_core import FilteringModel, NoiseTable, TimeGrid
from .weights import cell_term

Array = np.ndarray


@dataclass(frozen=True)
class KalmanState:
    """Posterior mean and covariance trajectories of the exact linear filter."""

    grid: TimeGrid
    means: Array          # (steps+1, N)
    covariances: Array    # (steps+1, N, N)


def kalman_bucy(model: FilteringModel, y: NoiseTable) -> KalmanState:
    """Exact filter for b(x)=Ax, constant diffusion, h(x)=Hx, unit observation noise.

    Explicit Euler on dm = A m dt + P H'(dY - H m dt) and
    dP = (A P + P A' + S S' - P H' H P) dt, started from the deterministic
    initial state (P_0 = 0), with the covariance symmetrized every step.
    """
    if not model.linear_gaussian:
        raise ValueError("kalman_bucy requires a linear_gaussian model")
    if y.dim != model.obs_dim:
        raise ValueError(f"observation table dim {y.dim} != model obs dim {model.obs_dim}")
    a = model.drift_matrix
    h = model.obs_matrix
    s = model.diffusion_matrix
    q = s @ s.T
    n = model.state_dim
    steps = y.grid.steps
    dt = y.grid.dt

    means = np.empty((steps + 1, n))
    covs = np.empty((steps + 1, n, n))
    m = model.x0.copy()
    p = np.zeros((n, n))
    means[0] = m
    covs[0] = p
    for i in range(steps):
        innovation = y.increments[i] - (h @ m) * dt
        m_next = m + (a @ m) * dt + (p @ h.T) @ innovation
        p_next = p + (a @ p + p @ a.T + q - p @ h.T @ h @ p) * dt
        p_next = 0.5 * (p_next + p_next.T)
        m, p = m_next, p_next
        means[i + 1] = m
        covs[i + 1] = p
    return KalmanState(y.grid, means, covs)


def single_step_quadrature(
    model: FilteringModel,
    g: TestFunction,
    y_total: Array,
    horizon: float,
    order: int = 64,
) -> float:
    """One-cell approximate filter value for a driftless constant-diffusion model.

    With the signal frozen at its initial state over the single cell, the
    weight factors out of the expectation:

        value = exp( h(x0).y - 0.5*|h(x0)|^2*T ) * E[ g(x0 + sigma*B_T) ]

    and the Gaussian expectation is evaluated by tensor-product Gauss-Hermite
    quadrature (supported for state dimension <= 2).  Quadrature weights are
    normalized by their own sum, so g = 1 reproduces the weight factor exactly.
    """
    if model.state_dim > 2:
        raise ValueError("quadrature oracle supports state dimension <= 2")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if order < 2:
        raise ValueError(f"order must be >= 2, got {order}")
    y_total = np.asarray(y_total, dtype=np.float64).reshape(-1)
    if y_total.shape[0] != model.obs_dim:
        raise ValueError(f"y_total dim {y_total.shape[0]} != model obs dim {model.obs_dim}")

    hx = np.asarray(model.observation(model.x0), dtype=np.float64).reshape(-1)
    log_weight = float(cell_term(hx, y_total, float(horizon)))

    sigma = np.asarray(model.diffusion(model.x0), dtype=np.float64).reshape(
        model.state_dim, model.state_dim
    )
    nodes, wts = np.polynomial.hermite.hermgauss(order)
    scale = math.sqrt(2.0 * horizon)
    if model.state_dim == 1:
        points = model.x0[0] + scale * sigma[0, 0] * nodes
        g_values = g(points[:, None])
        expectation = float(np.sum(wts * g_values)) / float(np.sum(wts))
    else:
        u1, u2 = np.meshgrid(nodes, nodes, indexing="ij")
        u = np.stack([u1.ravel(), u2.ravel()], axis=-1)
        points = model.x0 + scale * (u @ sigma.T)
        w2 = np.outer(wts, wts).ravel()
        g_values = g(points)
        expectation = float(np.sum(w2 * g_values)) / float(np.sum(w2))
    return math.exp(log_weight) * expectation
