"""SGD and Adam update rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor],
             lr: Mapping[str, Tensor] | float) -> dict[str, Tensor]:
    """Functional ``p - lr * g``; differentiable when gradients are recorded.

    ``lr`` is a scalar or a per-parameter mapping of elementwise rates.
    """
    out = {}
    for name, p in params.items():
        g = grads[name]
        rate = lr if isinstance(lr, (int, float)) else lr[name]
        rate = as_tensor(rate)
        if g.shape != p.shape or (rate.size != 1 and rate.shape != p.shape):
            raise ShapeError("sgd_step", p.shape, g.shape, rate.shape)
        out[name] = p - rate * g
    return out


class OptimizerStateError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    # per-parameter lr overrides, e.g. a faster rate for meta-learned step sizes
    lr_by_name: dict[str, float] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: Mapping[str, Tensor], **hyper) -> AdamState:
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        return state


def adam_step(state: AdamState, params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray | Tensor]) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam. Returns fresh leaf tensors; ``state`` is advanced in place."""
    missing = [n for n in params if n not in state.m]
    if missing:
        raise OptimizerStateError(f"adam_step: state not initialized for {missing}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, m.shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr_by_name.get(name, state.lr) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = Tensor(p.data - update, requires_grad=p.requires_grad)
    return out, state
