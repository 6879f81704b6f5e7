"""
Dense tensor with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Operations (see functional.py) are Function
subclasses; applying one while gradients are enabled records the Function as
the creator of its output, which makes the recorded creators an acyclic
graph rooted at whatever scalar the caller finally differentiates.

Precision: 32-bit by default, 64-bit inside `precision(np.float64)` (used by
the finite-difference checks).
"""
from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Iterator, Sequence

import numpy as np

from ..exceptions import DimensionError, NumericFault

logger = logging.getLogger(__name__)

_grad_enabled = True
_default_dtype = np.float32
_node_counter = itertools.count()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (teacher forwards, EMA, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new leaf tensors with `dtype` (np.float32 or np.float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f'Unsupported precision {dtype}')
    previous = _default_dtype
    _default_dtype = dtype
    try:
        yield
    finally:
        _default_dtype = previous


def broadcast_result_shape(a: tuple, b: tuple) -> tuple:
    """
    Output shape of an elementwise binary op.

    Only one-sided broadcasting is allowed: the result must have the shape of
    one of the operands (scalar, trailing-axis vector, per-row column, ...).
    """
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f'Shapes {a} and {b} do not broadcast') from exc
    if out != tuple(a) and out != tuple(b):
        raise DimensionError(f'Shapes {a} and {b} would broadcast to {out}; only one-sided broadcasting is supported')
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` back down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Function:
    """
    Base class for differentiable operations.

    `forward` receives the numpy arrays of the input tensors and returns the
    output array. `backward` receives dLoss/dOutput and returns one gradient
    (or None) per input, already reduced to the input's shape.
    """

    def __init__(self, *parents: 'Tensor'):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f'{type(self).__name__}.forward')

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError(f'{type(self).__name__}.backward')

    @classmethod
    def apply(cls, *tensors: 'Tensor', **kwargs) -> 'Tensor':
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        traced = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=traced, dtype=out.dtype, _creator=func if traced else None)


class Tensor:
    """
    Dense n-dimensional array with an optional gradient trace.

    Leaves created with requires_grad=True accumulate dLoss/dLeaf into
    `.grad` on every `backward` call until `zero_grad()` is called.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _creator: Function | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype if dtype is not None else _default_dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.creator = _creator
        self.node_id = next(_node_counter)

    # ---- basic properties ----
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

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def __repr__(self):
        label = f' name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})'

    def __len__(self):
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def clone(self, requires_grad: bool | None = None) -> 'Tensor':
        flag = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=flag, dtype=self.dtype, name=self.name)

    def astype(self, dtype) -> 'Tensor':
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str | None = None) -> 'Tensor':
        """Raise NumericFault when the data holds NaN or Inf."""
        if not self.is_finite():
            raise NumericFault(f'Non-finite values in {what or self.name or "tensor"} {self.shape}')
        return self

    def zero_grad(self) -> None:
        self.grad = None

    # ---- autodiff ----
    def backward(self, grad=None) -> None:
        """
        Accumulate dSelf/dLeaf into every reachable requires_grad leaf.

        Only scalar tensors can start a backward pass.
        """
        if self.size != 1:
            raise DimensionError(f'backward() needs a scalar loss, got shape {self.shape}')
        if not self.requires_grad:
            raise DimensionError('backward() called on a tensor that is not traced')
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        Graph.trace(self).run_backward(seed)

    # ---- operator sugar (implemented in functional) ----
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        return F.div(self, other)

    def __rtruediv__(self, other):
        return F.div(other, self)

    def __neg__(self):
        return F.neg(self)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, index):
        return F.getitem(self, index)

    @property
    def T(self) -> 'Tensor':
        return F.transpose(self)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return F.mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> 'Tensor':
        return F.exp(self)

    def log(self) -> 'Tensor':
        return F.log(self)


class Graph:
    """
    Recorded operations reachable from a root tensor, in topological order.

    `nodes[i]` only depends on nodes with smaller index; `order` is the
    position counter of the last appended node.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        self.parents: list[tuple[int, ...]] = []
        self.order = -1

    @classmethod
    def trace(cls, root: Tensor) -> 'Graph':
        graph = cls(root)
        index: dict[int, int] = {}
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in index:
                continue
            parents = node.creator.parents if node.creator is not None else ()
            if expanded:
                graph.order += 1
                index[id(node)] = graph.order
                graph.nodes.append(node)
                graph.parents.append(tuple(index[id(p)] for p in parents if id(p) in index))
                continue
            stack.append((node, True))
            for parent in parents:
                if id(parent) not in index and parent.requires_grad:
                    stack.append((parent, False))
        return graph

    def run_backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            parent_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap constants (scalars, arrays) as non-traced tensors matching `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


from . import functional as F  # noqa: E402  (functional imports Tensor from here)
