"""Dense float64 tensors and a reverse-mode tape."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible extents for an operation."""


class AutodiffError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.shift(self, -other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass(eq=False)
class Node:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Tape:
    """Ordered record of operations. Use as a context manager to record."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _state.stack.pop()
        assert popped is self

    def __len__(self):
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.stack = []
        self.paused = 0


_state = _State()


def active_tape() -> Optional[Tape]:
    if _state.paused or not _state.stack:
        return None
    return _state.stack[-1]


def is_recording() -> bool:
    return active_tape() is not None


class no_grad:
    """Suspend recording on the current thread's tape."""

    def __enter__(self):
        _state.paused += 1

    def __exit__(self, *exc):
        _state.paused -= 1


def record(name, inputs, out_data, backward_fn) -> Tensor:
    """Wrap ``out_data`` and, if recording and any input needs grad, log a node."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(name, tuple(inputs), out, backward_fn)
        tape.nodes.append(out._node)
    return out


def backward(root: Tensor, tape: Tape) -> None:
    """Assign d(root)/d(leaf) to ``.grad`` of every requires-grad leaf on the tape.

    Leaves recorded on the tape but unreachable from root receive zeros.
    """
    if root.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None or not any(n is root._node for n in tape.nodes):
        raise AutodiffError("root was not produced on this tape")
    grads = {id(root): np.ones(root.shape)}
    leaves = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._node is None:
                leaves[id(t)] = t
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise AutodiffError(f"{node.name}: gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64)

