"""Central finite-difference gradient checks for Tensor functions."""
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, h: float = 1e-5) -> np.ndarray:
    target = inputs[index]
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn(*inputs).item()
        flat[i] = original - h
        minus = fn(*inputs).item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-7) -> dict[int, float]:
    """
    Compare analytic gradients of the scalar `fn(*inputs)` against central differences.

    Runs in 64-bit. Returns the worst relative error per checked input and
    raises AssertionError when any element exceeds rtol (with an absolute
    floor of atol).
    """
    worst = {}
    with precision(np.float64):
        inputs = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad) for t in inputs]
        loss = fn(*inputs)
        loss.backward()
        for index, tensor in enumerate(inputs):
            if not tensor.requires_grad:
                continue
            analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            numeric = numerical_grad(fn, inputs, index, h=h)
            error = np.abs(analytic - numeric)
            scale = np.maximum(np.abs(analytic), np.abs(numeric))
            rel = np.where(error <= atol, 0.0, error / np.maximum(scale, atol))
            worst[index] = float(rel.max()) if rel.size else 0.0
            if worst[index] >= rtol:
                raise AssertionError(
                    f'gradcheck failed for input {index}: max relative error {worst[index]:.3e} '
                    f'(analytic {analytic.reshape(-1)[:4]}, numeric {numeric.reshape(-1)[:4]})'
                )
    return worst
