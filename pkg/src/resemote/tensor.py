"""Dense tensors with a reverse-mode tape.

Every differentiable op in :mod:`resemote.functional` produces a :class:`Tensor`
carrying an :class:`OpRecord`. ``Tensor.backward`` walks the records in reverse
topological order and hands each backward function only what its forward saved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an op would store NaN or Inf."""


@dataclass(eq=False)
class OpRecord:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[..., tuple[np.ndarray | None, ...]]
    saved: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Storage is float32 by default. float64 is accepted so the finite-difference
    checks can run in double precision; ops preserve the dtype of their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; Python scalars and lists get the float32 default
            dtype = arr.dtype if isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"tensor of shape {self.data.shape} holds NaN or Inf")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.record: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        kind = f", op={self.record.kind}" if self.record else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{kind})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an upstream gradient needs a single-element tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"upstream gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.record is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            input_grads = node.record.backward(g, **node.record.saved)
            for inp, ig in zip(node.record.inputs, input_grads):
                if ig is None or not _needs_grad(inp):
                    continue
                ig = ig.astype(inp.dtype, copy=False)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.record is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.record is not None:
            for inp in node.record.inputs:
                if id(inp) not in seen and _needs_grad(inp):
                    stack.append((inp, False))
    return order


class Parameter(Tensor):
    """A named, trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        if not name:
            raise ValueError("parameter name must be nonempty")
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def make_output(
    data: np.ndarray,
    kind: str,
    inputs: Sequence[Tensor],
    backward: Callable[..., tuple[np.ndarray | None, ...]],
    **saved: Any,
) -> Tensor:
    """Wrap a forward result, enforcing finiteness and attaching the tape record."""
    with np.errstate(over="ignore"):  # float64 -> float32 overflow surfaces as Inf, reported below
        data = np.asarray(data).astype(result_dtype(*inputs), copy=False)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor(data)
    if any(_needs_grad(t) for t in inputs):
        out.record = OpRecord(kind, tuple(inputs), backward, saved)
    return out
