"""Composite ops built from the primitives in :mod:`.tensor`.

Gradients of these follow from the primitives, including higher orders.
"""

from __future__ import annotations

import warnings

import numpy as np

from .tensor import (Tensor, as_tensor, clip, concat, exp, log, matmul, sigmoid, sqrt,
                     tanh, tmax, tsum)

NORM_EPS = 1e-12


class DegenerateNormWarning(UserWarning):
    """A vector with (near) zero norm was normalized with the epsilon floor."""


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    norm = sqrt(tsum(x * x, axis=-1, keepdims=True))
    if np.any(norm.data < eps):
        warnings.warn("l2_normalize: zero vector, using epsilon floor", DegenerateNormWarning,
                      stacklevel=2)
        norm = clip(norm, eps, np.inf)
    return x / norm


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance over the last axis."""
    d = as_tensor(a) - as_tensor(b)
    return sqrt(tsum(d * d, axis=-1))


def distance_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs Euclidean distances between rows of ``a`` (n, k) and ``b`` (m, k)."""
    d = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return sqrt(tsum(d * d, axis=-1))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    return tsum(l2_normalize(as_tensor(a), eps) * l2_normalize(as_tensor(b), eps), axis=-1)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    return log(tsum(exp(x - shift), axis=axis, keepdims=True)) + shift


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / tsum(e, axis=axis, keepdims=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def gru_cell(x_proj: Tensor, h: Tensor, w_hh: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step (reset, update, candidate gate order).

    ``x_proj`` is the precomputed input projection ``x @ W_ih + b_ih`` of shape
    (1, 3H); ``h`` is (1, H).
    """
    H = h.shape[-1]
    hp = matmul(h, w_hh) + b_hh
    r = sigmoid(x_proj[:, :H] + hp[:, :H])
    z = sigmoid(x_proj[:, H:2 * H] + hp[:, H:2 * H])
    n = tanh(x_proj[:, 2 * H:] + r * hp[:, 2 * H:])
    return (1.0 - z) * n + z * h


def gru_sequence(xs: Tensor, w_ih: Tensor, b_ih: Tensor, w_hh: Tensor, b_hh: Tensor,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over rows of ``xs`` (T, I); returns hidden states (T, H) in input order."""
    T = xs.shape[0]
    H = w_hh.shape[0]
    proj = matmul(xs, w_ih) + b_ih
    h = Tensor(np.zeros((1, H)))
    states: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = gru_cell(proj[t:t + 1], h, w_hh, b_hh)
        states[t] = h
    return concat(states, axis=0)


def max_over_time(x: Tensor) -> Tensor:
    return tmax(x, axis=0)
