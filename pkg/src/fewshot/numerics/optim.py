"""Plain gradient descent and Adam over dicts of named parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor


def _check(params: dict, grads: dict) -> None:
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor], lr: float) -> dict[str, Tensor]:
    """Return ``θ - lr·g`` for every entry.

    The result is built with tensor arithmetic, so if the gradients were
    produced with ``create_graph=True`` the new parameters stay differentiable
    with respect to the old ones (the MAML inner update).
    """
    _check(params, grads)
    return {name: p - grads[name] * lr for name, p in params.items()}


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], learning_rate: float = 1e-3, **kwargs) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kwargs)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, Tensor]) -> dict[str, Tensor]:
    """Bias-corrected Adam update. Advances ``state`` and returns fresh leaf parameters."""
    _check(params, grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name].data
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        out[name] = Tensor(p.data - update.astype(p.dtype), requires_grad=p.requires_grad, dtype=p.dtype)
    return out


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float):
    """Small stateful wrapper used by the training loops: ``opt.step(params, grads)``."""
    kind = kind.lower()
    if kind == "adam":
        return _AdamOptimizer(AdamState.create(params, lr))
    if kind == "sgd":
        return _SGDOptimizer(lr)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'adam' or 'sgd')")


class _AdamOptimizer:
    def __init__(self, state: AdamState):
        self.state = state

    def step(self, params, grads):
        return adam_step(self.state, params, grads)


class _SGDOptimizer:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        return {
            name: Tensor(p.data - self.lr * grads[name].data.astype(p.dtype),
                         requires_grad=p.requires_grad, dtype=p.dtype)
            for name, p in params.items()
        }
