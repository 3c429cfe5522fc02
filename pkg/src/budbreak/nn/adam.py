"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from budbreak.errors import ShapeError


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        state.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        state.second_moment = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Apply one in-place Adam update; increments step_count by exactly 1."""
    if set(params) != set(grads):
        raise ShapeError(f"param/grad keys differ: {sorted(params)} vs {sorted(grads)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad {name} shape {g.shape} != param shape {p.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params
