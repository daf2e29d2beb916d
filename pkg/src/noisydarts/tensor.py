"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "ShapeError",
    "backward",
    "grad_wrt",
    "flatten",
    "unflatten",
    "no_grad",
    "is_grad_enabled",
]

_GRAD_ENABLED = True
_NEXT_ID = 0


class TapeError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, consumed graph)."""


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _next_id() -> int:
    global _NEXT_ID
    _NEXT_ID += 1
    return _NEXT_ID


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    Leaves are created directly; interior nodes come from the functions in
    :mod:`noisydarts.functional`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "id",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self.id = _next_id()
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out.id = _next_id()
        out._consumed = False
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Returns a map from tensor id to gradient for every node reachable from
    the loss. Leaves with ``requires_grad`` also get ``.grad`` set
    (overwritten, not accumulated). The graph is released afterwards, so a
    second call on the same loss raises :class:`TapeError`.
    """
    if loss._consumed:
        raise TapeError("backward called on a consumed tape")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None:
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise TapeError(
                    f"{node.op}: gradient shape {pg.shape} != input shape {p.data.shape}")
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg

    for node in order:
        g = grads.get(node.id)
        if g is None:
            g = np.zeros_like(node.data)
            grads[node.id] = g
        if not node._parents:
            if node.requires_grad:
                node.grad = g
        else:
            node.grad = g
            node._backward = None
            node._parents = ()
            node._consumed = True
    return grads


def grad_wrt(loss: Tensor, params: Mapping[str, Tensor],
             names: Iterable[str] | None = None) -> np.ndarray:
    """Gradient of ``loss`` with respect to named leaves, as one flat vector.

    Order is lexicographic by name, then row-major within each leaf.
    """
    keys = sorted(params) if names is None else sorted(names)
    unknown = [k for k in keys if k not in params]
    if unknown:
        raise KeyError(f"unknown parameter name(s): {unknown}")
    grads = backward(loss)
    parts = []
    for k in keys:
        t = params[k]
        g = grads.get(t.id)
        parts.append(np.zeros(t.size) if g is None else g.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def flatten(params: Mapping[str, Tensor | np.ndarray]) -> np.ndarray:
    parts = []
    for k in sorted(params):
        v = params[k]
        arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        parts.append(arr.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vec: np.ndarray, like: Mapping[str, Tensor | np.ndarray]) -> dict[str, np.ndarray]:
    """Inverse of :func:`flatten` using the shapes in ``like``."""
    vec = np.asarray(vec, dtype=np.float64)
    out: dict[str, np.ndarray] = {}
    pos = 0
    for k in sorted(like):
        v = like[k]
        shape = v.shape
        n = int(np.prod(shape, dtype=np.int64))
        out[k] = vec[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != vec.size:
        raise ShapeError(f"vector length {vec.size} does not match parameters ({pos})")
    return out
