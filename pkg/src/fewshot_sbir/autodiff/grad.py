"""Reverse-mode gradient over the dynamic record."""

from __future__ import annotations

import warnings
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, enable_grad, no_grad


class UnreachableParameterWarning(UserWarning):
    pass


class Gradients(dict):
    """Mapping key -> gradient tensor; ``unreachable`` lists keys given a zero gradient."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.unreachable: list = []


def _reachable(output: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(p for p in node.parents if p.requires_grad and p.id not in seen)
    return sorted(seen.values(), key=lambda t: t.id)


def gradient(output: Tensor, wrt: Mapping | Sequence[Tensor], create_graph: bool = False) -> Gradients:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``.

    ``wrt`` may be a mapping (keys are preserved) or a sequence (keys are
    positions). With ``create_graph`` the returned tensors are recorded nodes,
    so they can be differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"gradient: output must be scalar, got shape {output.shape}")
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
    targets: dict[int, list] = {}
    for key, t in items:
        targets.setdefault(t.id, []).append(key)

    order = _reachable(output) if output.requires_grad else []
    # prune to nodes lying on some path output -> target
    useful: set[int] = set()
    for node in order:
        if node.id in targets or any(p.id in useful for p in node.parents):
            useful.add(node.id)

    found: dict[int, Tensor] = {}
    pending: dict[int, Tensor] = {output.id: Tensor(np.ones(output.shape))}
    with (enable_grad() if create_graph else no_grad()):
        for node in reversed(order):
            g = pending.pop(node.id, None)
            if g is None or node.id not in useful:
                continue
            if node.id in targets:
                found[node.id] = g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g, node)):
                if pg is None or parent.id not in useful:
                    continue
                prev = pending.get(parent.id)
                pending[parent.id] = pg if prev is None else prev + pg

    result = Gradients()
    for key, t in items:
        g = found.get(t.id)
        if g is None:
            result.unreachable.append(key)
            g = Tensor(np.zeros(t.shape))
        result[key] = g
    if result.unreachable:
        warnings.warn(f"gradient: no path to {result.unreachable}; returning zeros",
                      UnreachableParameterWarning, stacklevel=2)
    return result
