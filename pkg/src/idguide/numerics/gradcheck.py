"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backprop


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| scaled by the larger of max|a|, max|b|."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def tape_grads(fn: Callable[..., Tensor], *inputs: np.ndarray) -> list[np.ndarray]:
    tape = Tape()
    leaves = [tape.param(x) for x in inputs]
    grads = backprop(tape, fn(*leaves))
    return [grads[leaf] for leaf in leaves]


def check_gradients(fn: Callable[..., Tensor], *inputs: np.ndarray, h: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences over all inputs."""
    analytic = tape_grads(fn, *inputs)
    worst = 0.0
    for k, x in enumerate(inputs):
        def scalar(xk, k=k):
            args = [Tensor(v) for v in inputs]
            args[k] = Tensor(xk)
            return float(fn(*args).data)
        worst = max(worst, relative_error(analytic[k], numeric_grad(scalar, x, h)))
    return worst


def check_directional(fn: Callable[[Tensor], Tensor], x: np.ndarray, directions: int,
                      rng: np.random.Generator, h: float = 1e-5) -> float:
    """Compare grad . v with (f(x+hv) - f(x-hv)) / 2h along random unit directions."""
    (g,) = tape_grads(fn, x)
    worst = 0.0
    for _ in range(directions):
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v)
        fd = (float(fn(Tensor(x + h * v)).data) - float(fn(Tensor(x - h * v)).data)) / (2.0 * h)
        ad = float(np.sum(g * v))
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), np.linalg.norm(g) * 1e-3, 1e-12))
    return worst
