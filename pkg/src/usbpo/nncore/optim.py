from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import UsageError
from .params import ParamVector


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamVector, **kw) -> "AdamState":
        return cls(np.zeros(len(params)), np.zeros(len(params)), **kw)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState, lr: float) -> ParamVector:
    """One bias-corrected Adam update. ``state`` is advanced in place; a new ParamVector is returned."""
    if grad.layout != params.layout or state.m.shape != params.values.shape:
        raise UsageError("parameter, gradient and optimizer-state shapes differ")
    g = grad.values
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    new = ParamVector(params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps), params.layout)
    new.assert_finite()
    return new


@dataclass
class Adam:
    """Convenience wrapper pairing a learning rate with its AdamState."""

    lr: float
    state: AdamState | None = field(default=None, repr=False)

    def step(self, params: ParamVector, grad: ParamVector) -> ParamVector:
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        return adam_step(params, grad, self.state, self.lr)
