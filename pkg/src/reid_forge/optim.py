"""Adam optimizer with the staged exponential learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Apply one Adam update in place; gradients are read from each .grad slot."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise NumericError(f"gradient shape {g.shape} mismatches parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_schedule(epoch: int, total_epochs: int, lr0: float, decay_start: int) -> float:
    """Constant lr0 before decay_start, then exponential decay to lr0/1000 at the end.

    lr(t) = lr0 for t < decay_start, else lr0 * 0.001^((t - t0) / (T - t0)),
    with epochs counted from 1; lr(decay_start) = lr0 and lr(T) = lr0 / 1000.
    """
    if total_epochs < 1 or epoch < 1 or epoch > total_epochs:
        raise ConfigurationError(
            f"epoch {epoch} outside 1..{total_epochs} (epochs are counted from 1)"
        )
    if epoch < decay_start:
        return lr0
    span = max(total_epochs - decay_start, 1)
    return lr0 * 0.001 ** ((epoch - decay_start) / span)
