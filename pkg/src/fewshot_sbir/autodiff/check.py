"""Central finite-difference verification of :func:`gradient`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .grad import gradient
from .tensor import Tensor


class OracleInvalidError(RuntimeError):
    """The function under test is not deterministic, so finite differences are meaningless."""


@dataclass
class FDReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def away_from_kinks(rng: np.random.Generator, shape, margin: float = 1e-3,
                    scale: float = 1.0) -> np.ndarray:
    """Gaussian sample with every entry at least ``margin`` away from 0.

    Used for inputs to relu-like ops, whose derivative jumps at exactly 0.
    """
    x = rng.normal(scale=scale, size=shape)
    small = np.abs(x) < margin
    x[small] = np.copysign(margin + np.abs(x[small]), x[small] + 0.0)
    return x


def numeric_gradient(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                     step: float = 1e-5) -> dict[str, np.ndarray]:
    base = {k: v.data.copy() for k, v in params.items()}
    out = {}
    for name in params:
        g = np.zeros_like(base[name])
        flat = g.reshape(-1)
        for i in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = {k: Tensor(v) for k, v in base.items()}
                probe[name].data.reshape(-1)[i] += sign * step
                vals.append(f(probe).item())
            flat[i] = (vals[0] - vals[1]) / (2.0 * step)
        out[name] = g
    return out


def finite_difference_check(f: Callable[[dict[str, Tensor]], Tensor],
                            params: Mapping[str, Tensor], step: float = 1e-5,
                            tolerance: float = 1e-5, floor: float = 1e-6) -> FDReport:
    """Compare :func:`gradient` of ``f`` at ``params`` with central differences.

    ``f`` receives a dict of fresh leaf tensors and must return a scalar tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
    first = f(leaves)
    again = f({k: Tensor(v.data) for k, v in params.items()})
    if first.item() != again.item():
        raise OracleInvalidError(f"two evaluations differ: {first.item()!r} vs {again.item()!r}")
    analytic = gradient(first, leaves)
    numeric = numeric_gradient(f, params, step)
    report = FDReport(max_rel_error=0.0, tolerance=tolerance)
    for name in params:
        err = float(rel_error(analytic[name].data, numeric[name], floor).max(initial=0.0))
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
