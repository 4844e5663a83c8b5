"""Tensor type and reverse-mode differentiation engine.

Every differentiable primitive is a :class:`Function` subclass. Applying a
function wraps its NumPy result in a new :class:`Tensor` that remembers the
function instance and its inputs; :func:`backward` walks that graph in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Function",
    "ComputationRecord",
    "backward",
    "no_grad",
    "set_precision",
    "get_dtype",
    "precision",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = threading.local()
_precision = {"dtype": np.float64}


def set_precision(name: str) -> None:
    """Select the global float width (``"float64"`` or ``"float32"``)."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _precision["dtype"]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = _precision["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _precision["dtype"] = old


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Tensor:
    """N-dimensional real array with optional gradient tracking.

    ``grad`` exists iff ``requires_grad``; it is a NumPy array with the same
    shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_inputs", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=get_dtype())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or '<unnamed>'} contains non-finite values")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if self.requires_grad else None
        self._op: Function | None = None
        self._inputs: tuple[Tensor, ...] = ()
        self.name = name

    # -- construction helpers ------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, op: "Function", inputs: tuple["Tensor", ...]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = True
        out.grad = None
        out._op = op
        out._inputs = inputs
        out.name = None
        return out

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
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, leaves: Iterable["Tensor"] = ()) -> dict["Tensor", np.ndarray]:
        return backward(self, leaves=leaves)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # identity-based hashing so tensors can key gradient maps
    __hash__ = object.__hash__

    # -- operator sugar (implemented in ops) ---------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

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

    @property
    def T(self):
        from . import ops
        return ops.swap_last(self)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_dtype()))


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward`` on NumPy arrays (keyword options arrive
    through ``__init__``) and ``backward`` returning one gradient per input,
    or ``None`` where an input is not differentiable.
    """

    name = "function"

    def __init__(self, **options: Any):
        self.options = options

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **options: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(**options)
        with np.errstate(all="ignore"):
            out = fn.forward(*(t.data for t in tensors))
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{cls.name} produced non-finite output")
        if _grad_enabled() and any(t.requires_grad for t in tensors):
            return Tensor._from_op(out, fn, tensors)
        const = Tensor._from_op(out, fn, ())
        const.requires_grad = False
        const._op = None
        return const


@dataclass
class ComputationRecord:
    """Topologically ordered view of the graph that produced ``output``.

    ``nodes`` holds every op-produced tensor (inputs before outputs);
    ``leaves`` holds the gradient-tracking leaves reachable from the output.
    """

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        record = cls(output)
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                record.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.is_leaf:
                if t.requires_grad:
                    record.leaves.append(t)
                continue
            stack.append((t, True))
            for parent in t._inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return record

    def entries(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(operation name, input tensor ids, output tensor id) per node."""
        return [(t._op.name, tuple(id(p) for p in t._inputs), id(t)) for t in self.nodes]

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs; True if all outputs match bitwise."""
        for t in self.nodes:
            fresh = type(t._op)(**t._op.options).forward(*(p.data for p in t._inputs))
            if fresh.shape != t.data.shape or fresh.tobytes() != t.data.tobytes():
                return False
        return True


def backward(
    loss: Tensor,
    record: ComputationRecord | None = None,
    leaves: Iterable[Tensor] = (),
) -> dict[Tensor, np.ndarray]:
    """Populate ``grad`` on every gradient-tracking leaf with d(loss)/d(leaf).

    Gradients are written, not accumulated. ``leaves`` lists extra tensors that
    should receive a (zero) gradient even when ``loss`` does not depend on them.
    Returns the leaf-to-gradient map.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if record is None:
        record = ComputationRecord.trace(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._op.backward(g)
        for parent, pg in zip(node._inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"{node._op.name} backward produced grad {pg.shape} for input {parent.data.shape}"
                )
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    result: dict[Tensor, np.ndarray] = {}
    for leaf in list(record.leaves) + [t for t in leaves if t.requires_grad]:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)
        result[leaf] = leaf.grad
    return result
