"""Dense f32 tensors and a define-by-run reverse-mode tape.

Operations in :mod:`retro.ops` record a node on the active :class:`Tape`
whenever at least one input requires a gradient. Outside a tape (or when no
input requires grad) nothing is recorded, which is how the teacher and
mean-student paths stay gradient-free.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Raised for inputs an op refuses to handle silently (e.g. zero rows)."""


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, double backward, foreign loss."""


class Tensor:
    """An n-dimensional f32 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        if not np.isfinite(self.data).all():
            return False
        return self.grad is None or bool(np.isfinite(self.grad).all())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the real work lives in retro.ops
    def __add__(self, other):
        from retro import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from retro import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from retro import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from retro import ops
        return ops.scale(self, -1.0)

    def sum(self):
        from retro import ops
        return ops.sum(self)

    def mean(self):
        from retro import ops
        return ops.mean(self)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. A tape can be run backward exactly once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that already ran backward")
        output.requires_grad = True
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> Tensor:
    """Attach ``output`` to the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, output, backward_fn)
    return output


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in grads:
        grads[key][1] += g
    else:
        grads[key] = [t, np.array(g, dtype=DTYPE, copy=True)]


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaves whose ``requires_grad`` is False are never touched, so frozen
    parameters keep ``grad is None``.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; run a new forward pass")
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True

    grads: dict = {id(loss): (loss, np.ones_like(loss.data))}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        entry = grads.pop(id(node.output), None)
        if entry is None:
            continue
        in_grads = node.backward(entry[1])
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != input shape {t.data.shape}")
            if t._tape is tape:
                _accumulate(grads, t, g)
            else:
                t.grad = g.astype(DTYPE, copy=True) if t.grad is None else t.grad + g


@dataclass
class Parameter:
    """A named, optionally trainable tensor plus its SGD momentum buffer."""

    tensor: Tensor
    name: str = ""
    momentum_buffer: Optional[np.ndarray] = None

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = bool(flag)
        if not flag:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.shape
