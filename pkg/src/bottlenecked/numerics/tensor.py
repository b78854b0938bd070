"""Dense tensor with reverse-mode gradient recording.

A :class:`Tensor` wraps a numpy array. When any input of a primitive requires
a gradient (and recording is enabled) the output keeps a reference to its
parents plus a closure mapping the output gradient to parent gradients.
:func:`backward` linearises that graph into a :class:`Tape` and runs it in
reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericsError",
    "backward",
    "default_dtype",
    "precision",
    "no_grad",
    "is_recording",
    "as_tensor",
]


class NumericsError(ValueError):
    """Raised for shape mismatches, non-finite results and tape misuse."""


_state = threading.local()
_ids = itertools.count()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Switch the default float dtype for tensors created inside the block."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise NumericsError(f"unsupported dtype {dtype}")
    old = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = old


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    old = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar; implementations live in ops.py --------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(
    op: str,
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a primitive's output, check finiteness and record it if needed."""
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"non-finite value produced by {op}")
    result = Tensor(out, dtype=out.dtype)
    result.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = backward_fn
    return result


class Tape:
    """Topologically ordered record of the primitives feeding one output.

    Nodes are ordered so that every node's inputs precede it; :meth:`run`
    walks the list in reverse and visits each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p._id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        """Propagate ``seed`` from the last node; returns gradients by node id."""
        grads: dict[int, np.ndarray] = {self.nodes[-1]._id: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None) if node._parents else grads.get(node._id)
            if g is None or not node._parents:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise NumericsError(
                        f"backward of {node.op} produced grad {pg.shape} for input {parent.shape}"
                    )
                acc = grads.get(parent._id)
                grads[parent._id] = pg if acc is None else acc + pg
        return grads


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves named in ``leaves`` that the loss does not depend on get an
    all-zero gradient. A loss can be back-propagated only once.
    """
    if loss.data.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise NumericsError("backward already ran on this loss; rebuild the graph first")
    loss._consumed = True
    if loss.requires_grad:
        tape = Tape.from_output(loss)
        grads = tape.run(np.ones_like(loss.data))
        for node in tape.nodes:
            if node.is_leaf and node._id in grads:
                g = grads[node._id]
                node.grad = g.copy() if node.grad is None else node.grad + g
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
