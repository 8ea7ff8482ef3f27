"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive in :mod:`tokenlearner.ops`
returns a new tensor that remembers its parents and a backward rule; nothing
is mutated in place. :class:`Tape` linearizes the recorded graph behind a
scalar output and replays the backward rules in reverse order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float64


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """An immutable n-dimensional float array that may take part in autodiff.

    ``requires_grad`` marks a leaf as a parameter. Results of primitives
    require grad whenever any input does.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 copy: bool = True):
        arr = _as_array(data, dtype)
        if copy and arr is data:
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; the primitives live in ops
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
        if np.isscalar(other):
            return ops.scale(self, other)
        return ops.hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if not np.isscalar(other):
            raise TypeError("tensors divide only by scalars")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a primitive's result, attaching ``backward`` when any parent needs it.

    ``backward(g)`` receives the output gradient and returns one gradient
    array (or None) per parent, in order.
    """
    out = Tensor(data, copy=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable


class Tape:
    """The primitives behind one output, in an order where inputs precede outputs."""

    def __init__(self, entries: list[TapeEntry], output: Tensor):
        self.entries = entries
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        entries = [TapeEntry(t, t._parents, t._backward) for t in order if t._backward is not None]
        return cls(entries, output)

    def __len__(self):
        return len(self.entries)

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Replay backward rules in reverse; returns gradients keyed by ``id(tensor)``."""
        out = self.output
        grads: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=out.dtype)
        }
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for parent, pg in zip(entry.inputs, entry.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ContractError(
                        f"backward produced grad of shape {pg.shape} for input of shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return grads


def grad(output: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``params``."""
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    grads = Tape.from_output(output).backward()
    return [Tensor(grads.get(id(p), np.zeros_like(p.data))) for p in params]


def backward(output: Tensor, params: Sequence[Tensor]) -> None:
    """Like :func:`grad` but stores results in each parameter's ``grad`` slot."""
    for p, g in zip(params, grad(output, params)):
        p.grad = g.data
