"""Adam with bias correction."""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from src.errors import NumericalError


@dataclass
class AdamState:
    """Optimizer state, one moment pair per named parameter"""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
) -> Dict[str, np.ndarray]:
    """Update `params` in place from `grads` and return them.

    Moments are kept in float64. A parameter without a gradient is left alone.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for parameter {name}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter {name} {param.shape}"
            )
        g = grad.astype(np.float64)
        m = state.m.setdefault(name, np.zeros(param.shape, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros(param.shape, dtype=np.float64))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param[...] = (param.astype(np.float64) - update).astype(param.dtype)
    return params
