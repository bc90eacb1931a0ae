"""Karras-spaced noise levels and per-step churn factors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_GAMMA = math.sqrt(2.0) - 1.0

# Documented choices; the deterministic profile disables churn entirely.
DETERMINISTIC_PROFILE = dict(s_churn=0.0, s_noise=1.0, s_tmin=0.0, s_tmax=math.inf)
STOCHASTIC_PROFILE = dict(s_churn=40.0, s_noise=1.003, s_tmin=0.05, s_tmax=50.0)


@dataclass(frozen=True)
class EdmSchedule:
    sigmas: tuple[float, ...]
    s_churn: float = 0.0
    s_noise: float = 1.0
    s_tmin: float = 0.0
    s_tmax: float = math.inf

    def __post_init__(self):
        s = self.sigmas
        if len(s) < 2 or s[-1] != 0.0:
            raise ValueError("sigmas must end with exactly 0")
        if any(a <= b for a, b in zip(s, s[1:])):
            raise ValueError("sigmas must be strictly decreasing")
        if self.s_tmin > self.s_tmax:
            raise ValueError("s_tmin must not exceed s_tmax")
        if self.s_churn < 0:
            raise ValueError("s_churn must be non-negative")
        if self.s_noise <= 0:
            raise ValueError("s_noise must be positive")

    @property
    def n_steps(self) -> int:
        return len(self.sigmas) - 1


def build_schedule(n_steps: int, sigma_min: float = 0.02, sigma_max: float = 80.0,
                   rho: float = 7.0, **churn) -> EdmSchedule:
    """t_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho, then t_N = 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if not 0.0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if n_steps == 1:
        return EdmSchedule((float(sigma_max), 0.0), **churn)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    i = np.arange(n_steps, dtype=np.float64)
    t = (hi + i / (n_steps - 1) * (lo - hi)) ** rho
    return EdmSchedule(tuple(float(v) for v in t) + (0.0,), **churn)


def churn_gamma(sched: EdmSchedule, i: int) -> float:
    if not 0 <= i < sched.n_steps:
        raise IndexError(f"step index {i} outside [0, {sched.n_steps})")
    t = sched.sigmas[i]
    if sched.s_tmin <= t <= sched.s_tmax:
        return min(sched.s_churn / sched.n_steps, MAX_GAMMA)
    return 0.0
