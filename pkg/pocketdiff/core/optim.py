"""Bias-corrected Adam over named float64 parameter arrays."""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from pocketdiff.api.dependencies.custom_exception import ShapeMismatchError


@dataclass
class AdamState:
    """First/second moment estimates per parameter name plus the step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.95,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Apply one Adam update and return new parameter arrays and a new state.

    Inputs are left untouched. Parameters missing from ``grads`` receive a zero gradient.

    Raises:
        ShapeMismatchError: a gradient's shape differs from its parameter's.
    """
    new_state = state.copy()
    new_state.step += 1
    t = new_state.step

    # precompute bias corrections once per step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t

    updated: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param)
        if g.shape != param.shape:
            raise ShapeMismatchError(
                f"adam_step: gradient for '{name}' has shape {g.shape}, parameter has {param.shape}",
                errors={"param": name, "param_shape": list(param.shape), "grad_shape": list(g.shape)},
            )
        m = new_state.m.get(name)
        v = new_state.v.get(name)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)

        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_state.m[name] = m
        new_state.v[name] = v

        m_hat = m / bc1
        v_hat = v / bc2
        updated[name] = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated, new_state
