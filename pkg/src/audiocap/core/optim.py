"""Adam on named parameter arrays.

The update is a pure function of (params, grads, state): it returns fresh
arrays and a fresh state, leaving its inputs untouched.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """Inputs violate an operation's precondition (names, shapes, ranges)."""


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def _check_compatible(params, grads) -> None:
    if list(params) != list(grads):
        raise ContractError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        if np.shape(p) != np.shape(grads[name]):
            raise ContractError(
                f"shape mismatch for {name!r}: {np.shape(p)} vs {np.shape(grads[name])}"
            )


def optimizer_step(params, grads, state: AdamState | None, lr: float,
                   config: AdamConfig = AdamConfig()):
    """One Adam update. Returns ``(new_params, new_state)``."""
    _check_compatible(params, grads)
    state = state or AdamState()
    t = state.step + 1
    new_params: OrderedDict[str, np.ndarray] = OrderedDict()
    new_m: OrderedDict[str, np.ndarray] = OrderedDict()
    new_v: OrderedDict[str, np.ndarray] = OrderedDict()
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)
