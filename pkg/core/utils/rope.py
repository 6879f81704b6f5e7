"""
Axial rotary position embedding over a normalized [-1, 1] patch box.

Half of each head's channels rotate with the row coordinate, the other half
with the column coordinate; channel pairs (2i, 2i+1) rotate together.
Box jittering rescales the coordinates to [-s, s] before the angles are taken.
"""
import math

import numpy as np

from ..exceptions import ConfigError
from . import functional as F
from .tensor import Tensor, as_tensor

ROPE_BASE = 100.0


def patch_coordinates(grid_h: int, grid_w: int) -> np.ndarray:
    """[P, 2] patch-center coordinates (row, col) in [-1, 1], row-major."""
    rows = (np.arange(grid_h) + 0.5) / grid_h * 2.0 - 1.0
    cols = (np.arange(grid_w) + 0.5) / grid_w * 2.0 - 1.0
    rr, cc = np.meshgrid(rows, cols, indexing='ij')
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=-1)


def check_head_dim(head_dim: int) -> None:
    if head_dim % 4:
        raise ConfigError(f'RoPE needs head_dim divisible by 4 (two axes x sin/cos pairs), got {head_dim}')


def rope_tables(coords: np.ndarray, head_dim: int, jitter_scale: float = 1.0,
                base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [P, head_dim] with each angle repeated over its channel pair."""
    check_head_dim(head_dim)
    quarter = head_dim // 4
    periods = base ** (2.0 * np.arange(quarter) / (head_dim // 2))
    scaled = np.asarray(coords, dtype=np.float64) * jitter_scale
    angles = 2.0 * math.pi * scaled[:, :, None] / periods[None, None, :]
    angles = np.repeat(angles.reshape(len(coords), 2 * quarter), 2, axis=-1)
    return np.cos(angles), np.sin(angles)


def pair_rotation(head_dim: int) -> np.ndarray:
    """Matrix R with (x @ R)[2i] = -x[2i+1] and (x @ R)[2i+1] = x[2i]."""
    rot = np.zeros((head_dim, head_dim))
    for i in range(0, head_dim, 2):
        rot[i + 1, i] = -1.0
        rot[i, i + 1] = 1.0
    return rot


def apply_rope(x: Tensor, coords: np.ndarray, jitter_scale: float = 1.0,
               jitter_range: tuple[float, float] | None = None, base: float = ROPE_BASE) -> Tensor:
    """
    Rotate query or key rows of `x` ([..., P, head_dim]) by their patch coordinates.

    With `jitter_range` given, `jitter_scale` must lie inside it.
    """
    head_dim = x.shape[-1]
    check_head_dim(head_dim)
    if jitter_range is not None and not (jitter_range[0] <= jitter_scale <= jitter_range[1]):
        raise ValueError(f'jitter scale {jitter_scale} outside {jitter_range}')
    if x.shape[-2] != len(coords):
        raise ConfigError(f'RoPE got {x.shape[-2]} tokens for {len(coords)} coordinates')
    cos, sin = rope_tables(coords, head_dim, jitter_scale, base)
    rotated = F.matmul(x, as_tensor(pair_rotation(head_dim), x))
    return x * as_tensor(cos, x) + rotated * as_tensor(sin, x)


def sample_jitter_scale(rng: np.random.Generator, s_min: float, s_max: float) -> float:
    """Log-uniform draw from [s_min, s_max]."""
    if s_min == s_max:
        return float(s_min)
    return float(math.exp(rng.uniform(math.log(s_min), math.log(s_max))))
