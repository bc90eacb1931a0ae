"""Closed-form Gaussian oracles for the optimal-control view of guided denoising.

Time runs on the unit interval: t = 0 is pure noise and t = 1 is data, with
X_t = X_1 + (1 - t) eps. The controlled system is dX = c dt with running cost
1/2 |c|^2 and terminal cost r/2 |X_1 - x1|^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ControlProblem:
    r: float
    x1: np.ndarray
    X0: np.ndarray

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("terminal cost coefficient r must be positive")
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=np.float64))
        X0 = np.atleast_1d(np.asarray(self.X0, dtype=np.float64))
        if x1.shape != X0.shape:
            raise ValueError("x1 and X0 must have the same shape")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "X0", X0)

    @property
    def dim(self) -> int:
        return self.x1.size


@dataclass(frozen=True)
class GaussianToy:
    """Data N(mu0, tau^2) observed through additive N(0, sigma^2) noise."""
    mu0: float
    tau: float
    sigma: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def with_noise(self, sigma: float) -> "GaussianToy":
        return GaussianToy(self.mu0, self.tau, sigma)


def hamiltonian(c, gamma) -> float:
    c, gamma = np.asarray(c, dtype=np.float64), np.asarray(gamma, dtype=np.float64)
    if c.shape != gamma.shape:
        raise ValueError("c and gamma must have the same shape")
    return float(-0.5 * np.sum(c * c) + np.sum(gamma * c))


def optimal_control(t: float, X_t, x1, r: float) -> np.ndarray:
    """c*_t = r (x1 - X_t) / (1 + r (1 - t))"""
    return r * (np.asarray(x1, dtype=np.float64) - X_t) / (1.0 + r * (1.0 - t))


def integrate_controlled_ode(p: ControlProblem, n_steps: int) -> np.ndarray:
    """Forward Euler for dX/dt = c*(t, X_t) on a uniform grid; returns [N+1, dim]."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = 1.0 / n_steps
    traj = np.empty((n_steps + 1, p.dim))
    traj[0] = p.X0
    for n in range(n_steps):
        traj[n + 1] = traj[n] + h * optimal_control(n * h, traj[n], p.x1, p.r)
    return traj


def analytic_trajectory(p: ControlProblem, t) -> np.ndarray:
    """Exact solution: the gap u = x1 - X shrinks as u0 (1 + r(1-t)) / (1 + r)."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    u0 = p.x1 - p.X0
    return p.x1 - u0 * (1.0 + p.r * (1.0 - t)) / (1.0 + p.r)


def control_cost(p: ControlProblem, n_steps: int,
                 control: Callable[[float, np.ndarray], np.ndarray] | None = None) -> float:
    """Left-Riemann running cost plus terminal cost along an Euler trajectory."""
    if control is None:
        control = lambda t, X: optimal_control(t, X, p.x1, p.r)  # noqa: E731
    h = 1.0 / n_steps
    X, running = p.X0.copy(), 0.0
    for n in range(n_steps):
        c = control(n * h, X)
        running += 0.5 * float(np.sum(c * c)) * h
        X = X + h * c
    return running + 0.5 * p.r * float(np.sum((X - p.x1) ** 2))


def gaussian_score(x, g: GaussianToy):
    """Score of the noisy marginal N(mu0, tau^2 + sigma^2)."""
    var = g.tau ** 2 + g.sigma ** 2
    if var <= 0:
        raise ValueError("degenerate marginal variance")
    return -(np.asarray(x, dtype=np.float64) - g.mu0) / var


def tweedie_posterior_mean(x, g: GaussianToy):
    """E[theta | x] = x + sigma^2 * score(x)"""
    return np.asarray(x, dtype=np.float64) + g.sigma ** 2 * gaussian_score(x, g)


def unit_time_score(g: GaussianToy, t: float) -> Callable[[np.ndarray], np.ndarray]:
    """Score of X_t = X_1 + (1 - t) eps with X_1 ~ N(mu0, tau^2)."""
    noisy = g.with_noise(1.0 - t)
    return lambda x: gaussian_score(x, noisy)


def hjb_drift(X_t, t: float, score: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """(1 - t) * score(X_t); the Brownian increment is added by the caller."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - t) * np.asarray(score(X_t), dtype=np.float64)


def bridge_drift(X_t, t: float, x1) -> np.ndarray:
    """Large-r limit of the optimal control: (x1 - X_t) / (1 - t)."""
    return (np.asarray(x1, dtype=np.float64) - X_t) / (1.0 - t)


def gaussian_denoiser(g: GaussianToy):
    """EDM-style D(x; sigma) for Gaussian data: the exact posterior mean."""
    def D(x, sigma, cond=None):
        return tweedie_posterior_mean(x, g.with_noise(sigma))
    return D


def flow_endpoint(g: GaussianToy, x_start, sigma_start: float):
    """Exact probability-flow map from noise level sigma_start down to 0."""
    return g.mu0 + (np.asarray(x_start) - g.mu0) * g.tau / np.sqrt(g.tau ** 2 + sigma_start ** 2)


@dataclass
class SdeReport:
    n_steps: int
    n_paths: int
    terminal_mean: float
    terminal_std: float
    data_mean: float
    data_std: float
    mean_gap: float
    std_gap: float
    mean_stderr: float

    @property
    def mean_z(self) -> float:
        return self.mean_gap / self.mean_stderr if self.mean_stderr > 0 else float("inf")


def sde_terminal_moments(g: GaussianToy, n_steps: int, n_paths: int,
                                   seed: int = 0) -> SdeReport:
    """Euler-Maruyama on dX = (1 - t) score(X_t) dt + dw from t = 0 to 1.

    Paths start from the t = 0 marginal N(mu0, tau^2 + 1). Terminal moments are
    compared with the data distribution; the report carries both gaps.
    """
    rng = np.random.default_rng(seed)
    h = 1.0 / n_steps
    X = g.mu0 + np.sqrt(g.tau ** 2 + 1.0) * rng.standard_normal(n_paths)
    for n in range(n_steps):
        t = n * h
        X = X + hjb_drift(X, t, unit_time_score(g, t)) * h + np.sqrt(h) * rng.standard_normal(n_paths)
    mean, std = float(X.mean()), float(X.std())
    return SdeReport(n_steps, n_paths, mean, std, g.mu0, g.tau, mean - g.mu0, std - g.tau,
                     float(std / np.sqrt(n_paths)))
