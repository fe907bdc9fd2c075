"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment estimates, one pair per parameter tensor."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(values, grads, state: AdamState, lr: float) -> None:
    """One in-place update of every parameter array.

    Standard bias-corrected Adam; raises on non-finite gradients so a
    diverging run stops at the last good parameters.
    """
    if not state.m:
        state.m = [np.zeros_like(v) for v in values]
        state.v = [np.zeros_like(v) for v in values]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for val, g, m, v in zip(values, grads, state.m, state.v):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("diverged gradient")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        val -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper around a list of parameter nodes."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        adam_step([p.value for p in self.params],
                  [p.grad for p in self.params], self.state, lr)
