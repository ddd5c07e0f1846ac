"""Differentiable primitives. Each op takes the tape first; pass None for inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateWeightsError, ShapeError
from .tensor import Tape, Tensor, check_finite


def _result(tape: Tape | None, data, inputs, backward) -> Tensor:
    out = Tensor(data, requires_grad=any(t is not None and t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    data = check_finite("add", a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(tape, data, (a, b), backward)


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    data = check_finite("mul", a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _result(tape, data, (a, b), backward)


def maximum(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the first argument carries the gradient."""
    take_a = a.data >= b.data
    data = check_finite("maximum", np.where(take_a, a.data, b.data))

    def backward(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.data.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.data.shape)
        return ga, gb

    return _result(tape, data, (a, b), backward)


def scale(tape, x: Tensor, factor: float) -> Tensor:
    data = check_finite("scale", x.data * factor)

    def backward(g):
        return (g * factor,)

    return _result(tape, data, (x,), backward)


def relu(tape, x: Tensor) -> Tensor:
    """max(x, 0) with subgradient 0 at exactly 0."""
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return _result(tape, data, (x,), backward)


def sum_all(tape, x: Tensor) -> Tensor:
    data = check_finite("sum_all", np.asarray(x.data.sum()))

    def backward(g):
        return (np.full_like(x.data, float(g)),)

    return _result(tape, data, (x,), backward)


def mean_all(tape, x: Tensor) -> Tensor:
    n = x.data.size
    data = check_finite("mean_all", np.asarray(x.data.mean()))

    def backward(g):
        return (np.full_like(x.data, float(g) / n),)

    return _result(tape, data, (x,), backward)


def linear(tape, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x of shape (B, D), weight (D, M), bias (M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear: incompatible shapes {x.data.shape} and {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.data.shape} does not match output")
    data = check_finite("linear", x.data @ weight.data + bias.data)

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(tape, data, (x, weight, bias), backward)


def conv2d(tape, x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution over (B, C, H, W) input, via the active kernel backend."""
    data = check_finite(
        "conv2d", kernels.conv2d_forward(x.data, weight.data, bias.data, stride, padding)
    )

    def backward(g):
        return kernels.conv2d_backward(x.data, weight.data, g, stride, padding)

    return _result(tape, data, (x, weight, bias), backward)


def global_avg_pool(tape, x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.data.ndim}-d")
    cells = x.data.shape[2] * x.data.shape[3]
    data = check_finite("global_avg_pool", x.data.mean(axis=(2, 3)))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / cells, x.data.shape).copy(),)

    return _result(tape, data, (x,), backward)


def weighted_pool(tape, x: Tensor, weights: Tensor) -> Tensor:
    """Weighted spatial mean: out[b,c] = Σ_hw w[b,h,w]·x[b,c,h,w] / Σ_hw w[b,h,w].

    Images whose weight grid is a single constant take the exact
    global_avg_pool code path, so uniform weights reproduce the average
    embedding bit for bit.
    """
    xd, wd = x.data, weights.data
    if xd.ndim != 4 or wd.ndim != 3 or xd.shape[0] != wd.shape[0] or xd.shape[2:] != wd.shape[1:]:
        raise ShapeError(
            f"weighted_pool: incompatible shapes {xd.shape} and {wd.shape}"
        )
    if np.any(wd < 0):
        raise ContractError("weighted_pool: weights must be nonnegative")
    wsum = wd.sum(axis=(1, 2))
    if np.any(wsum <= 0):
        bad = int(np.argmax(wsum <= 0))
        raise DegenerateWeightsError(f"weight grid sums to zero for batch item {bad}")

    wmin = wd.min(axis=(1, 2))
    wmax = wd.max(axis=(1, 2))
    uniform = wmin == wmax
    if uniform.all():
        data = xd.mean(axis=(2, 3))
    else:
        weighted = (xd * wd[:, None, :, :]).sum(axis=(2, 3)) / wsum[:, None]
        if uniform.any():
            data = np.where(uniform[:, None], xd.mean(axis=(2, 3)), weighted)
        else:
            data = weighted
    data = check_finite("weighted_pool", data)

    def backward(g):
        gx = g[:, :, None, None] * (wd[:, None, :, :] / wsum[:, None, None, None])
        gw = np.einsum("bc,bchw->bhw", g, xd - data[:, :, None, None]) / wsum[:, None, None]
        return gx, gw

    return _result(tape, data, (x, weights), backward)


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer; mutated only in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    batches_seen: int = 0

    @classmethod
    def create(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(dim, dtype=np.float64),
            running_var=np.ones(dim, dtype=np.float64),
            momentum=momentum,
            eps=eps,
        )


def batchnorm_vec(
    tape,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    update_running: bool = True,
) -> Tensor:
    """Batch normalization over (B, D) vectors.

    Train mode normalizes with batch statistics and (optionally) folds them
    into the running estimates; eval mode is the fixed affine map defined by
    the running statistics.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"batchnorm_vec expects (B, D) input, got shape {xd.shape}")
    dim = xd.shape[1]
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise ShapeError("batchnorm_vec: gamma/beta shape does not match feature dim")

    if training:
        if xd.shape[0] < 2:
            raise ContractError("batchnorm_vec needs batch size >= 2 in train mode")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mu) * inv_std
        if update_running:
            m = state.momentum
            n = xd.shape[0]
            unbiased = var * n / (n - 1)
            state.running_mean = (1 - m) * state.running_mean + m * mu
            state.running_var = (1 - m) * state.running_var + m * unbiased
            state.batches_seen += 1
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv_std

    data = check_finite("batchnorm_vec", gamma.data * xhat + beta.data)

    def backward(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            n = xd.shape[0]
            dx = (
                inv_std
                / n
                * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(tape, data, (x, gamma, beta), backward)


def softmax_cross_entropy(tape, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class, max-stabilized."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, N) logits, got {z.shape}")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ShapeError("labels must be one integer per batch row")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ContractError(
            f"label out of range [0, {z.shape[1]}): {labels.min()}..{labels.max()}"
        )
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    batch = z.shape[0]
    data = check_finite(
        "softmax_cross_entropy", np.asarray(-log_probs[np.arange(batch), labels].mean())
    )

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(batch), labels] -= 1.0
        return (float(g) * probs / batch,)

    return _result(tape, data, (logits,), backward)


def sigmoid_bce(tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean stabilized binary cross entropy of sigmoid(logit) against 0/1 targets."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {z.shape}")
    per_elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    data = check_finite("sigmoid_bce", np.asarray(per_elem.mean()))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (float(g) * (sig - t) / z.size,)

    return _result(tape, data, (logits,), backward)


def pairwise_sq_distances(tape, x: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances of (B, D) rows -> (B, B)."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"pairwise_sq_distances expects (B, D) input, got {xd.shape}")
    diff = xd[:, None, :] - xd[None, :, :]
    data = check_finite("pairwise_sq_distances", np.einsum("ijd,ijd->ij", diff, diff))

    def backward(g):
        gx = 2.0 * (
            np.einsum("ij,ijd->id", g, diff) - np.einsum("ij,ijd->jd", g, diff)
        )
        return (gx,)

    return _result(tape, data, (x,), backward)
