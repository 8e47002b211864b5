"""Tensor value type and the recording tape behind reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one of their inputs requires a gradient. Outside a tape every
operation is a plain numpy computation, which is how inference runs.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class Tensor:
    """Row-major real array with an optional gradient buffer.

    Storage is float32 unless built from float64 data (the 64-bit mode used
    by gradient checks). Values are never mutated by operations; only
    ``grad`` changes, during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered log of the differentiable operations executed in one forward pass.

    Use as a context manager; operations executed inside the block are
    recorded, then ``tape.backward(loss)`` runs the reverse pass. A tape is
    single-threaded and meant to be discarded after its backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self.nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in node.inputs]
            in_grads = node.backward(g, needs)
            for t, gi, need in zip(node.inputs, in_grads, needs):
                if gi is None or not need:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls until zeroed.
    """
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ValueError("no tape given and none active")
    tape.backward(loss)


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and a gradient is needed.

    ``backward(g, needs)`` receives the upstream gradient and one flag per
    input and must return one gradient array (or None) per input.
    """
    inputs = tuple(inputs)
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward)
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else None), dtype=dtype)
