"""Adam with bias correction, operating on plain arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = field(default=None, repr=False)
    second_moment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def adam_step(state: AdamState, param, grad) -> tuple[np.ndarray, AdamState]:
    """One Adam update. Mutates ``state`` and returns the new parameter array."""
    p, g = _array(param), _array(grad)
    if p.shape != g.shape:
        raise ValueError(f"adam_step: param shape {p.shape} != grad shape {g.shape}")
    if state.first_moment is None:
        state.first_moment = np.zeros_like(p)
        state.second_moment = np.zeros_like(p)
    elif state.first_moment.shape != p.shape:
        raise ValueError("adam_step: optimizer state was built for a different shape")

    state.step_count += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


class Adam:
    """Named-parameter wrapper holding one :class:`AdamState` per array."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.states: dict[str, AdamState] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = dict(params)
        for name in sorted(grads):
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState(self.lr, self.beta1, self.beta2, self.eps)
            out[name], _ = adam_step(st, params[name], grads[name])
        return out
