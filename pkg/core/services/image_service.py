"""
Image export for diagnostics: float arrays in [0, 1] to binary PPM (RGB)
or PGM (grey), with optional nearest-neighbour upscaling so patch grids
stay readable.
"""
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

from ..exceptions import GeometryError
from ..utils.tensor_io import atomic_write_bytes


def to_uint8(array, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear map of [lo, hi] (default: [0, 1]) to 0..255, clipped."""
    array = np.asarray(array, dtype=np.float64)
    lo = 0.0 if lo is None else lo
    hi = 1.0 if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    return np.clip(np.rint((array - lo) / span * 255.0), 0, 255).astype(np.uint8)


def _encode(img, fmt, upscale):
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    buffer = BytesIO()
    img.save(buffer, format=fmt)
    return buffer.getvalue()


def ppm_bytes(rgb, upscale: int = 1) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise GeometryError(f'PPM export needs [h, w, 3], got {rgb.shape}')
    pixels = rgb if rgb.dtype == np.uint8 else to_uint8(rgb)
    return _encode(Image.fromarray(pixels, 'RGB'), 'PPM', upscale)


def pgm_bytes(grey, upscale: int = 1, lo: float | None = None, hi: float | None = None) -> bytes:
    grey = np.asarray(grey)
    if grey.ndim != 2:
        raise GeometryError(f'PGM export needs [h, w], got {grey.shape}')
    pixels = grey if grey.dtype == np.uint8 else to_uint8(grey, lo, hi)
    # Pillow picks P5 for mode 'L' under the PPM format
    return _encode(Image.fromarray(pixels, 'L'), 'PPM', upscale)


def write_ppm(path, rgb, upscale: int = 1) -> Path:
    return atomic_write_bytes(path, ppm_bytes(rgb, upscale))


def write_pgm(path, grey, upscale: int = 1, lo: float | None = None, hi: float | None = None) -> Path:
    """Cosine maps are written with lo=-1, hi=1."""
    return atomic_write_bytes(path, pgm_bytes(grey, upscale, lo, hi))


def read_image(path) -> np.ndarray:
    """PPM/PGM back to uint8 ([h, w, 3] or [h, w])."""
    with Image.open(path) as img:
        return np.asarray(img).copy()
