"""Tensor type and the reverse-mode tape.

Every differentiable result carries a :class:`Node` holding its inputs and a
backward closure. Node ids come from a process-wide counter, so sorting the
nodes reachable from a loss by descending id gives a valid reverse
topological order (recording order is a topological order).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for tensor-engine errors."""


class ShapeError(EngineError, ValueError):
    pass


class UnknownOpError(EngineError, KeyError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


class TapeError(EngineError, RuntimeError):
    pass


_state = threading.local()
_node_ids = itertools.count()


def _get(name: str, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float64))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_debug() -> bool:
    return _get("debug", False)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    old = is_debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = old


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn", "leaf")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable | None, leaf=None):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        # leaves keep a handle on their tensor so backward can fill ``.grad``
        self.leaf = leaf

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r})"


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None
        if requires_grad:
            self._node = Node("leaf", (), None, leaf=self)
        if is_debug():
            check_finite("tensor", arr)

    # -- basic properties ---------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self._node is not None

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        if flag and self._node is None:
            self._node = Node("leaf", (), None, leaf=self)
        elif not flag:
            self._node = None

    @property
    def node_id(self) -> int | None:
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self) -> bool:
        return self._node is None or self._node.leaf is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators (implemented in ops) --------------------------------------
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __neg__(self):
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        return ops.slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self, axes=None, keepdims=False):
        return ops.sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return ops.mean(self, axes, keepdims)

    def var(self, axes=None, keepdims=False):
        return ops.var(self, axes, keepdims)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` and add a tape node when any input is tracked.

    ``backward_fn(grad)`` returns one gradient (or ``None``) per input.
    """
    if is_debug():
        check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t._node = None
    if is_grad_enabled() and any(x._node is not None for x in inputs):
        t._node = Node(op, tuple(inputs), backward_fn)
    return t


def backward(loss: Tensor, retain_graph: bool = False) -> dict[int, np.ndarray]:
    """Reverse sweep from a single-element ``loss``.

    Returns ``{node_id: gradient}`` for every tracked leaf reachable from the
    loss and accumulates the same arrays into each leaf's ``.grad``.
    Intermediate nodes are released afterwards unless ``retain_graph``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must have one element, got shape {loss.shape}")
    root = loss._node
    if root is None:
        raise TapeError("backward: loss is not on the tape (detached or no tracked inputs)")
    if root.leaf is None and root.backward_fn is None:
        raise TapeError("backward: graph already consumed")

    # reachable nodes
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for t in node.inputs:
            if t._node is not None and t._node.id not in seen:
                if t._node.leaf is None and t._node.backward_fn is None:
                    raise TapeError("backward: graph already consumed")
                stack.append(t._node)

    grads: dict[int, np.ndarray] = {root.id: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for nid in sorted(seen, reverse=True):
        node = seen[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node.leaf is not None:
            leaf = node.leaf
            leaf_grads[nid] = g
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or t._node is None:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"backward: op {node.op!r} produced gradient of shape {gi.shape} "
                                 f"for an input of shape {t.shape}")
            tid = t._node.id
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
        if not retain_graph:
            node.backward_fn = None
            node.inputs = ()
    return leaf_grads


from . import ops  # noqa: E402  (operator methods dispatch into ops)
