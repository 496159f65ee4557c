"""Dense tensors with a reverse-mode autodiff tape.

Every operation that produces a :class:`Tensor` from inputs that require
gradients records a backward closure on the output. :meth:`Tensor.backward`
walks the recorded graph in reverse topological order and accumulates
gradients into the ``grad`` buffers of the leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "debug_checks",
    "zeros",
    "stack_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised in debug mode when an operation produces NaN or Inf."""


_state = {"grad": True, "dtype": np.dtype(np.float32), "debug": False}


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (float64 is meant for gradient checks)."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Verify every produced value is finite while active."""
    prev = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = prev


class Tensor:
    """N-dimensional array that can take part in reverse-mode differentiation.

    ``data`` is always a contiguous-or-not numpy array of the default dtype at
    construction time. ``grad`` is allocated lazily on the first backward pass
    that reaches this tensor and has exactly ``data.shape``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name
        if _state["debug"]:
            _check_finite(arr, name or "tensor")

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = op
        parents = tuple(parents)
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        if _state["debug"]:
            _check_finite(data, op)
        return out

    # -- basic properties -----------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Only scalar outputs are accepted. Leaf gradients accumulate across
        calls until cleared.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic (same-shape tensors or numeric constants) -----
    def __add__(self, other):
        if isinstance(other, Tensor):
            _same_shape(self, other, "add")
            return Tensor._from_op(self.data + other.data, (self, other), lambda g: (g, g), "add")
        c = _const(other, self.dtype)
        return Tensor._from_op(self.data + c, (self,), lambda g: (g,), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _same_shape(self, other, "mul")
            a, b = self.data, other.data
            return Tensor._from_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")
        c = _const(other, self.dtype)
        return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,), "mul")

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.shape
        dt = self.dtype
        return Tensor._from_op(
            np.asarray(self.data.sum(), dtype=dt), (self,), lambda g: (np.broadcast_to(g, shape).astype(dt),), "sum"
        )

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {src} to {shape}") from exc
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def flatten_rows(self) -> "Tensor":
        """Collapse every axis but the first: (N, ...) -> (N, prod(...))."""
        return self.reshape(self.shape[0], -1)

    def __getitem__(self, index) -> "Tensor":
        src_shape = self.shape
        dt = self.dtype

        def backward(g):
            full = np.zeros(src_shape, dtype=dt)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.asarray(self.data[index]), (self,), backward, "getitem")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack_rows needs at least one tensor")
    first = tensors[0].shape
    for t in tensors:
        if t.shape != first:
            raise ShapeError(f"stack_rows shape mismatch: {first} vs {t.shape}")
    n = len(tensors)
    return Tensor._from_op(
        np.stack([t.data for t in tensors]), tuple(tensors), lambda g: tuple(g[i] for i in range(n)), "stack"
    )


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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _const(value, dtype) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim != 0:
        raise ShapeError("only scalar constants combine with tensors; general broadcasting is unsupported")
    return arr


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")
