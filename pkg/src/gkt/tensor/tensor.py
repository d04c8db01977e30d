"""Dense tensors and the reverse-mode tape that differentiates them."""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class TapeError(RuntimeError):
    """Raised when backward is asked for something the tape cannot provide."""


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array with an optional gradient.

    ``data`` is always a numpy array whose size equals ``prod(shape)``. The
    compute dtype is float32; float64 is kept only when explicitly requested,
    which the gradient tests use as a high-precision shadow.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DEFAULT_DTYPE if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar; the actual ops live in functional ----------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis=axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def relu(self):
        from . import functional as F
        return F.relu(self)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape", "op")

    def __init__(self, out, inputs, backward_fn, tape, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape
        self.op = op


class Tape:
    """Ordered record of differentiable operations.

    Operations are recorded only while a tape is active (``with Tape() as
    tape:``) and only when at least one input requires a gradient; outside a
    tape every op runs as plain inference. Each thread has its own stack of
    active tapes.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    def record(self, out: Tensor, inputs: Sequence, backward_fn: Callable, op: str) -> None:
        node = _Node(out, tuple(inputs), backward_fn, self, op)
        out._node = node
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise TapeError(f"backward needs a scalar loss, got shape {shape}")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss tensor was not produced on this tape")
        if self._consumed:
            raise TapeError("tape was already replayed; record a new forward pass")
        self._consumed = True

        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise TapeError(
                        f"{node.op}: gradient shape {gi.shape} does not match input {t.data.shape}"
                    )
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            node.backward_fn = None
        self._nodes = []


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Replay ``tape`` (default: the tape that produced ``loss``) in reverse."""
    if tape is None:
        if not isinstance(loss, Tensor) or loss._node is None:
            raise TapeError("loss tensor is not on any tape")
        tape = loss._node.tape
    tape.backward(loss)


def make_result(data: np.ndarray, inputs: Sequence, backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording it when a tape is active."""
    tape = current_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out._node = None
    out.name = None
    if needs:
        tape.record(out, inputs, backward_fn, op)
    return out
