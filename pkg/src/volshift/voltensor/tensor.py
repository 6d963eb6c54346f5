"""Tensor container and the tape that records differentiable operations."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from volshift.errors import PreconditionError

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    """Innermost tape currently recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float grid that can take part in reverse-mode differentiation.

    Shapes follow ``[batch, channels, depth, height, width]`` for volumetric
    data. Float64 arrays keep their precision (gradient checks rely on
    this); everything else is stored as float32 unless a dtype is given.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        arr = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) else data.astype(dtype, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s < 1 for s in arr.shape):
            raise PreconditionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar, implemented in ops
    def __add__(self, other):
        from volshift.voltensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from volshift.voltensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from volshift.voltensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from volshift.voltensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from volshift.voltensor import ops
        return ops.mul(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    op: str


class Tape:
    """Ordered log of executed operations.

    Operations are only recorded while a tape is entered as a context
    manager and at least one input requires a gradient::

        with Tape() as tape:
            loss = l1_loss(net(x), x)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.records.append(Record(tuple(inputs), output, backward, op))

    def backward(self, loss: Tensor, retain: bool = False) -> dict[Tensor, np.ndarray]:
        return backward(self, loss, retain=retain)


def backward(tape: Tape, loss: Tensor, retain: bool = False) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(loss) = 1 back through ``tape``.

    Leaf tensors (requires_grad, not produced on this tape) get their
    gradient accumulated into ``.grad``; the same arrays are returned keyed
    by tensor. The tape is cleared afterwards unless ``retain`` is set.
    """
    if loss.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise PreconditionError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:  # pragma: no cover - op bug guard
                raise RuntimeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = t.grad
    if not retain:
        tape.records.clear()
    return out
