"""Small reverse-mode autodiff engine on numpy float64 arrays, with higher-order support."""

from .check import (FDReport, OracleInvalidError, away_from_kinks, finite_difference_check,
                    numeric_gradient, rel_error)
from .functional import (DegenerateNormWarning, cosine_similarity, euclidean_distance,
                         gru_cell, gru_sequence, linear, log_softmax, logsumexp, l2_normalize,
                         max_over_time, softmax, distance_matrix)
from .grad import Gradients, UnreachableParameterWarning, gradient
from .optim import AdamState, OptimizerStateError, adam_step, sgd_step
from .tensor import (NumericDomainError, ShapeError, Tensor, add, as_tensor, broadcast_to,
                     clip, concat, div, enable_grad, exp, getitem, grad_reverse, is_grad_enabled,
                     log, matmul, mean, mul, neg, no_grad, reciprocal0, relu, reshape, scatter,
                     sigmoid, softplus, sqrt, sub, sum_to, tanh, tmax, transpose, tsum)

__all__ = [name for name in dir() if not name.startswith("_")]
