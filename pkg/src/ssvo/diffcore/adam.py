"""Adam optimizer with bias correction, operating on named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamState:
    """First/second moment buffers plus hyperparameters for one parameter set.

    Buffers are keyed by parameter name so the state survives serialization
    independently of construction order.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1): got {beta1}, {beta2}")
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive: got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """Apply one Adam update in place.

    Parameters without an entry in ``grads`` (or with a None gradient) are
    left untouched, as are their moment buffers.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    mc = 1.0 - b1 ** t
    vc = 1.0 - b2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / mc) / (np.sqrt(v / vc) + state.eps)
