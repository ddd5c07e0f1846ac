"""Dense float64 tensors with reverse-mode differentiation over a recorded tape."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Single-owner while recording; once a forward pass is done the tape is
    only read (by backpropagate) and can be shared freely.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        """Register one primitive.

        backward receives the output gradient array and must return one
        gradient array (or None) per input, in input order.
        """
        self.nodes.append(_Node(output, inputs, backward))

    def __len__(self):
        return len(self.nodes)


def check_finite(name: str, array: np.ndarray) -> np.ndarray:
    """Trap NaN/Inf escaping any primitive."""
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} produced non-finite values")
    return array


def backpropagate(tape: Tape, loss: Tensor, params: tuple[Tensor, ...] = ()) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every leaf on the tape.

    Nodes are replayed in reverse recording order, so a node's output
    gradient is fully accumulated before its backward closure runs.
    Parameters listed in `params` that the sweep never reaches get explicit
    zero gradients, so optimizers can treat .grad as always present.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        grad_out = grads.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if grad_out is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(grad_out)):
            if tensor is None or grad is None:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                holders[key] = tensor

    # Whatever the sweep did not pop was never produced by a node: a leaf.
    for key, tensor in holders.items():
        if not tensor.requires_grad:
            continue
        total = grads[key]
        tensor.grad = total if tensor.grad is None else tensor.grad + total

    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
