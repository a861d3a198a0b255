"""Dense float64 tensors recorded on an explicit reverse-mode tape.

Every primitive appends one :class:`Node` to the active :class:`Tape` when at
least one input requires a gradient. :func:`backward` walks the tape in exact
reverse recording order, so the recording order is already a topological
order of the graph.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN/Inf shows up where finite values are required."""


class Tensor:
    """N-d float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no-copy constructor for op outputs
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> None:
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the actual rules live in ops
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.shift(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        return ops.shift(ops.scale(self, -1.0), float(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


BackwardFn = Callable[[list], Sequence]


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


# one tape per thread, so independent graphs (e.g. registration pairs) can run concurrently
_LOCAL = threading.local()


def get_tape() -> Tape:
    tape = getattr(_LOCAL, "tape", None)
    if tape is None:
        tape = _LOCAL.tape = Tape()
    return tape


def reset_tape() -> None:
    get_tape().reset()


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference, metric evaluation)."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def record(op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
    """Register ``outputs`` as produced by ``op`` from ``inputs``.

    ``backward_fn`` receives one upstream gradient per output (zeros filled in
    for outputs that received none) and returns one gradient or ``None`` per
    input.
    """
    tape = get_tape()
    if not tape.enabled:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    tape.record(Node(op, tuple(inputs), tuple(outputs), backward_fn))


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients are accumulated into existing ``.grad`` arrays, so two calls
    without :meth:`Tensor.zero_grad` add up.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(get_tape().nodes):
        ups = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in ups):
            continue
        ups = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, ups)]
        in_grads = node.backward(ups)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"{node.op}: backward produced grad of shape {g.shape} "
                    f"for input of shape {t.data.shape}"
                )
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                seen[key] = t
    for key, t in seen.items():
        if not t.requires_grad and t is not loss:
            continue
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
