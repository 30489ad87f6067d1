"""Reverse-mode automatic differentiation on dense float64 arrays.

Every primitive records a node on a dynamic tape: the output tensor keeps
references to its parents and a closure mapping the upstream gradient to
one gradient per parent. ``backward`` replays the reachable nodes in reverse
creation order, so each node is visited once, after all of its consumers.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them is a scalar, or one of them is a vector matching the trailing axis of
the other (a bias row).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "Graph",
    "Tensor",
    "add",
    "backward",
    "concat",
    "exp",
    "log1p",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "record",
    "relu",
    "reshape",
    "sigmoid",
    "slice_last",
    "sub",
    "tanh",
    "take",
    "tensor_sum",
    "transpose",
]


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation core."""


class DimensionError(AutodiffError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AutodiffError, ValueError):
    """An input lies outside the domain of an elementwise function."""


class ContractError(AutodiffError, RuntimeError):
    """An operation was invoked outside its contract (e.g. non-scalar loss)."""


_sequence = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """A dense float64 array that may participate in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Create the output of a primitive and register it on the tape.

    ``backward_fn`` receives the gradient with respect to the output and
    returns one gradient (or None) per parent, in order. Extension
    primitives defined outside this module use the same entry point.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_sequence)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 and a.ndim <= 1:
        return b.shape
    if b.size == 1 and b.ndim <= 1:
        return a.shape
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return a.shape
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return b.shape
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) <= 1 and int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    # bias row broadcast along the trailing axis
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return record(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return record(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record(ad * bd, (a, b), backward_fn, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return record(ad @ bd, (a, b), backward_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {original} to {tuple(shape)}") from exc
    return record(out, (a,), lambda g: (g.reshape(original),), "reshape")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # split by sign to avoid overflow in exp
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log1p(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= -1.0):
        raise DomainError("log1p: argument must be greater than -1")
    x = a.data
    return record(np.log1p(x), (a,), lambda g: (g / (1.0 + x),), "log1p")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no tensors given")
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].data.ndim
    ax = axis % ndim if ndim else 0
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(
                "concat: incompatible shapes " + ", ".join(str(x.shape) for x in tensors)
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward_fn, "concat")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the trailing axis."""
    shape = a.shape
    if not 0 <= start < stop <= shape[-1]:
        raise DimensionError(f"slice_last: [{start}:{stop}] out of range for shape {shape}")

    def backward_fn(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return record(a.data[..., start:stop].copy(), (a,), backward_fn, "slice")


def take(a: Tensor, index: int) -> Tensor:
    """Select one entry along the leading axis (e.g. one timestep)."""
    shape = a.shape
    if not -shape[0] <= index < shape[0]:
        raise DimensionError(f"take: index {index} out of range for shape {shape}")

    def backward_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return record(a.data[index].copy(), (a,), backward_fn, "take")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


class Graph:
    """Recorded operations reachable from an output, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        seen: set[int] = set()
        stack = [output]
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored, so two calls without a
    reset double them.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
