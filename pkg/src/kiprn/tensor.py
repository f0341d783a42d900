"""Dense tensors and a reverse-mode tape.

Ops in :mod:`kiprn.ops` record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient.  Outside a
tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients.

    Tensors hash by identity so they can key gradient dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("out", "inputs", "backward_fn", "kind")

    def __init__(self, kind: str, out: Tensor, inputs: tuple, backward_fn: BackwardFn):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, so every node's inputs precede it.
    Backward never mutates the tape, so it may be replayed.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, kind: str, out: Tensor, inputs: tuple, backward_fn: BackwardFn) -> None:
        self.nodes.append(Node(kind, out, inputs, backward_fn))

    def backward(self, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
        return backward(self, root, wrt)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(kind: str, out: Tensor, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Attach ``out`` to the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, out, inputs, backward_fn)
    return out


def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
    """Reverse accumulation from a scalar ``root``.

    Returns a dict mapping every leaf tensor that requires a gradient (or
    only those in ``wrt``) to its gradient array.  Leaves the root does not
    depend on get zeros.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        produced.add(id(node.out))
    for node in tape.nodes:
        for t in node.inputs:
            if t is not None and t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t

    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if t is None or gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi

    targets = list(wrt) if wrt is not None else list(leaves.values())
    out = {}
    for t in targets:
        g = grads.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else g
    return out
