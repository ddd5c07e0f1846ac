"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backpropagate


def finite_difference_check(function, inputs, epsilon: float = 1e-3) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    `function(tape, tensors)` must return a scalar Tensor and be evaluable
    at perturbed inputs; `inputs` is a sequence of arrays treated as the
    differentiable arguments. Returns the max over all coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    tape = Tape()
    loss = function(tape, tensors)
    if loss.data.size != 1:
        raise ContractError(f"function must be scalar-valued, got shape {loss.data.shape}")
    backpropagate(tape, loss, params=tuple(tensors))

    worst = 0.0
    for t in tensors:
        analytic = t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            f_plus = float(function(None, tensors).data)
            flat[i] = original - epsilon
            f_minus = float(function(None, tensors).data)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
