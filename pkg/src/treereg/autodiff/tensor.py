"""Tensor and tape for reverse-mode differentiation."""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

_PROFILES = {"float64": np.float64, "float32": np.float32}
_state = threading.local()


def set_profile(name: str) -> None:
    """Select the default dtype for new tensors: 'float64' or 'float32'."""
    if name not in _PROFILES:
        raise ValueError(f"unknown profile {name!r}")
    _state.dtype = _PROFILES[name]


def get_dtype():
    return getattr(_state, "dtype", np.float64)


class profile:
    """Context manager that temporarily switches the dtype profile."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.prev = get_dtype()
        set_profile(self.name)

    def __exit__(self, *exc):
        _state.dtype = self.prev


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim and 0 in arr.shape:
            raise ValueError("tensor dimensions must be positive")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
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

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops

        return ops.getitem(self, key)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Records differentiable operations while active.

    Use as a context manager; operations whose inputs require gradients are
    appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def reset(self) -> None:
        self.nodes.clear()
        self.used = False

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        self.saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self.saved)


def record(
    inputs: Sequence[Tensor],
    outputs: Sequence[Tensor],
    backward: Callable[[list], Sequence[Optional[np.ndarray]]],
) -> None:
    """Register an op; ``backward`` maps output grads to input grads."""
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape.nodes.append(_Node(tuple(inputs), tuple(outputs), backward))


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` of every tensor on ``tape`` with d loss / d tensor.

    Gradients of leaf tensors accumulate across tapes until zeroed.
    """
    if loss.data.size != 1:
        raise AutodiffError("backward needs a scalar loss")
    if tape.used:
        raise AutodiffError("backward already ran on this tape; call reset() first")
    tape.used = True
    for n in tape.nodes:
        for o in n.outputs:
            o.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        gouts = [o.grad for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gouts)]
        gins = node.backward(gouts)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise AutodiffError(f"gradient shape {g.shape} does not match tensor {t.data.shape}")
            if t.grad is None:
                t.grad = np.asarray(g, dtype=t.data.dtype)  # grads are never updated in place
            else:
                t.grad = t.grad + g
