"""
Differentiable operations on Tensor.

Each op is a Function subclass with an analytic backward, wrapped by a
module-level function that accepts Tensors or constants. Broadcasting is
one-sided only (see tensor.broadcast_result_shape).
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..exceptions import DimensionError, GeometryError, NumericFault
from .tensor import Function, Tensor, as_tensor, broadcast_result_shape, unbroadcast


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericFault(f'{op}: non-finite input')


# --------------------
# Elementwise arithmetic
# --------------------
class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        broadcast_result_shape(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        broadcast_result_shape(a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        broadcast_result_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        broadcast_result_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class ClampMin(Function):
    def forward(self, a, minimum=0.0):
        self.keep = a > minimum
        return np.maximum(a, minimum).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.keep,)


def add(a, b) -> Tensor:
    return Add.apply(*_coerce(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_coerce(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_coerce(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_coerce(a, b))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def sqrt(a: Tensor) -> Tensor:
    return Sqrt.apply(a)


def clamp_min(a: Tensor, minimum: float) -> Tensor:
    return ClampMin.apply(a, minimum=minimum)


# --------------------
# Linear algebra and shape ops
# --------------------
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f'matmul: cannot multiply {a.shape} by {b.shape}')
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, a, shape=None):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class BroadcastTo(Function):
    def forward(self, a, shape=None):
        self.shape = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (unbroadcast(grad, self.shape),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class GetItem(Function):
    def forward(self, a, index=None):
        self.shape = a.shape
        self.index = index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast one-sidedly)."""
    return MatMul.apply(*_coerce(a, b))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return Transpose.apply(a, axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError('concat: empty tensor list')
    return Concat.apply(*tensors, axis=axis)


def getitem(a: Tensor, index) -> Tensor:
    return GetItem.apply(a, index=index)


def gather_rows(a: Tensor, rows) -> Tensor:
    """Select rows along axis 0 by integer index (repeats allowed)."""
    return GetItem.apply(a, index=np.asarray(rows, dtype=np.int64))


# --------------------
# Reductions
# --------------------
class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1) if a.size else 1
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


# --------------------
# Normalizations and activations
# --------------------
def _softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


class Softmax(Function):
    def forward(self, a, axis=-1, temperature=1.0):
        _require_finite(a, 'softmax')
        self.axis, self.temperature = axis, temperature
        self.out = _softmax_array(a / temperature, axis)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner) / self.temperature,)


class LogSoftmax(Function):
    def forward(self, a, axis=-1, temperature=1.0):
        _require_finite(a, 'log_softmax')
        self.axis, self.temperature = axis, temperature
        out = _log_softmax_array(a / temperature, axis)
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        total = grad.sum(axis=self.axis, keepdims=True)
        return ((grad - self.probs * total) / self.temperature,)


class LayerNorm(Function):
    """Normalization over the last axis with learned scale and shift."""

    def forward(self, x, gamma, beta, eps=1e-6):
        self.mu = x.mean(axis=-1, keepdims=True)
        self.var = x.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(self.var + eps)
        self.xhat = (x - self.mu) * self.inv
        self.gamma = gamma
        self.gamma_shape, self.beta_shape = gamma.shape, beta.shape
        return self.xhat * gamma + beta

    def backward(self, grad):
        d = self.xhat.shape[-1]
        g_xhat = grad * self.gamma
        gx = self.inv / d * (d * g_xhat - g_xhat.sum(axis=-1, keepdims=True)
                             - self.xhat * (g_xhat * self.xhat).sum(axis=-1, keepdims=True))
        g_gamma = unbroadcast(grad * self.xhat, self.gamma_shape)
        g_beta = unbroadcast(grad, self.beta_shape)
        return gx, g_gamma, g_beta


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Silu(Function):
    def forward(self, a):
        self.a = a
        self.s = _sigmoid(a)
        return a * self.s

    def backward(self, grad):
        return (grad * self.s * (1.0 + self.a * (1.0 - self.s)),)


class Gelu(Function):
    """tanh approximation of GELU."""

    C = math.sqrt(2.0 / math.pi)

    def forward(self, a):
        self.a = a
        self.t = np.tanh(self.C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        d = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * self.C * (1.0 + 3 * 0.044715 * a * a)
        return (grad * d,)


class SwiGLU(Function):
    """silu(gate) * up, the gating primitive of the SwiGLU feed-forward."""

    def forward(self, gate, up):
        if gate.shape != up.shape:
            raise DimensionError(f'swiglu: gate {gate.shape} vs up {up.shape}')
        self.gate, self.up = gate, up
        self.s = _sigmoid(gate)
        self.silu = gate * self.s
        return self.silu * up

    def backward(self, grad):
        dsilu = self.s * (1.0 + self.gate * (1.0 - self.s))
        return grad * self.up * dsilu, grad * self.silu


class L2Normalize(Function):
    def forward(self, a, axis=-1, eps=1e-6):
        self.axis = axis
        norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
        self.denom = np.maximum(norm, eps).astype(a.dtype)
        self.clamped = norm <= eps
        self.out = a / self.denom
        return self.out

    def backward(self, grad):
        projection = (grad * self.out).sum(axis=self.axis, keepdims=True)
        free = (grad - self.out * projection) / self.denom
        return (np.where(self.clamped, grad / self.denom, free),)


class Norm(Function):
    """Euclidean norm along an axis; zero-norm slices get zero gradient."""

    def forward(self, a, axis=-1, keepdims=False):
        self.a, self.axis, self.keepdims = a, axis, keepdims
        self.out = np.sqrt((a * a).sum(axis=axis, keepdims=True))
        return self.out if keepdims else np.squeeze(self.out, axis=axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad * self.a / safe, 0.0),)


class CrossEntropySoft(Function):
    """Mean over rows of -sum(target * log_softmax(logits / temperature))."""

    def forward(self, logits, targets, temperature=1.0):
        if logits.shape != targets.shape:
            raise DimensionError(f'cross_entropy: logits {logits.shape} vs targets {targets.shape}')
        _require_finite(logits, 'cross_entropy')
        self.temperature = temperature
        self.targets = targets
        log_probs = _log_softmax_array(logits / temperature, -1)
        self.probs = np.exp(log_probs)
        self.rows = int(np.prod(logits.shape[:-1])) or 1
        return np.asarray(-(targets * log_probs).sum() / self.rows, dtype=logits.dtype)

    def backward(self, grad):
        mass = self.targets.sum(axis=-1, keepdims=True)
        glogits = grad * (self.probs * mass - self.targets) / (self.temperature * self.rows)
        return glogits, None


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f'softmax temperature must be positive, got {temperature}')
    return Softmax.apply(a, axis=axis, temperature=temperature)


def log_softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f'log_softmax temperature must be positive, got {temperature}')
    return LogSoftmax.apply(a, axis=axis, temperature=temperature)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def silu(a: Tensor) -> Tensor:
    return Silu.apply(a)


def gelu(a: Tensor) -> Tensor:
    return Gelu.apply(a)


def swiglu(gate: Tensor, up: Tensor) -> Tensor:
    return SwiGLU.apply(gate, up)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError(f'l2_normalize eps must be positive, got {eps}')
    return L2Normalize.apply(a, axis=axis, eps=eps)


def norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return Norm.apply(a, axis=axis, keepdims=keepdims)


def cross_entropy_soft(logits: Tensor, targets, temperature: float = 1.0) -> Tensor:
    """Soft-target cross-entropy; `targets` is a constant (no gradient)."""
    if temperature <= 0:
        raise ValueError(f'cross_entropy temperature must be positive, got {temperature}')
    targets = as_tensor(targets.data if isinstance(targets, Tensor) else targets, logits)
    return CrossEntropySoft.apply(logits, targets, temperature=temperature)


# --------------------
# Resampling (forward only)
# --------------------
def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom weights for the four taps at offsets -1, 0, 1, 2."""
    def kernel(x):
        x = np.abs(x)
        return np.where(
            x <= 1, (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
            np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0),
        )
    return np.stack([kernel(t + 1), kernel(t), kernel(1 - t), kernel(2 - t)], axis=-1)


def cubic_matrix(in_size: int, out_size: int) -> np.ndarray:
    """[out_size, in_size] bicubic interpolation matrix, half-pixel centers, edge clamped."""
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    base = np.floor(src).astype(np.int64)
    weights = _cubic_weights(src - base)
    matrix = np.zeros((out_size, in_size))
    for tap in range(4):
        cols = np.clip(base - 1 + tap, 0, in_size - 1)
        np.add.at(matrix, (np.arange(out_size), cols), weights[:, tap])
    return matrix


def bicubic_resize(x, out_h: int, out_w: int):
    """
    Separable bicubic resize of a [h, w, d] (or [B, h, w, d]) feature map.

    Forward only: consumed on teacher paths. Returns the same container type
    it was given (ndarray or non-traced Tensor).
    """
    array = x.data if isinstance(x, Tensor) else np.asarray(x)
    if out_h < 1 or out_w < 1:
        raise GeometryError(f'bicubic_resize: target extents must be >= 1, got {out_h}x{out_w}')
    h, w = array.shape[-3], array.shape[-2]
    if h < 2 or w < 2:
        raise GeometryError(f'bicubic_resize: input extents must be >= 2, got {h}x{w}')
    if (h, w) == (out_h, out_w):
        out = array.copy()
    else:
        mh = cubic_matrix(h, out_h).astype(array.dtype)
        mw = cubic_matrix(w, out_w).astype(array.dtype)
        out = np.einsum('oh,...hwd->...owd', mh, array)
        out = np.einsum('pw,...owd->...opd', mw, out)
    if isinstance(x, Tensor):
        return Tensor(out, dtype=out.dtype)
    return out
