"""
Procedural toy dataset: 64x64 scenes of 1-3 colored shapes on textured noise.

The class of a scene is its shape multiset (19 classes for three shape kinds
and 1-3 shapes); the per-pixel shape mask is kept for dense probes. Scenes
are regenerated on demand from (seed, index), so nothing is stored on disk.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from PIL import Image, ImageDraw

from ..exceptions import ConfigError
from ..utils.seeding import derive_rng

logger = logging.getLogger(__name__)

SHAPES = ('circle', 'square', 'triangle')

# Fill palette (hex); background texture stays in the darker half of the range
SHAPE_COLORS = [
    '#E53935',  # red
    '#43A047',  # green
    '#1E88E5',  # blue
    '#FDD835',  # yellow
    '#8E24AA',  # purple
    '#FB8C00',  # orange
    '#00ACC1',  # cyan
    '#F5F5F5',  # white
]


def _hex_to_rgb(value: str) -> tuple[int, int, int]:
    value = value.lstrip('#')
    return tuple(int(value[i:i + 2], 16) for i in (0, 2, 4))


def shape_multisets(max_shapes: int = 3) -> list[tuple[int, ...]]:
    """Sorted per-kind count tuples, one per class, ordered by total then lexicographically."""
    classes = []
    for total in range(1, max_shapes + 1):
        for combo in itertools.combinations_with_replacement(range(len(SHAPES)), total):
            classes.append(tuple(combo.count(kind) for kind in range(len(SHAPES))))
    return classes


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    length: int = 512
    min_shapes: int = 1
    max_shapes: int = 3
    noise_cells: int = 8

    def validate(self) -> 'DatasetConfig':
        if self.image_size < 16:
            raise ConfigError(f'dataset image_size must be >= 16, got {self.image_size}')
        if self.length < 1:
            raise ConfigError('dataset length must be >= 1')
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f'need 1 <= min_shapes <= max_shapes, got {self.min_shapes}, {self.max_shapes}')
        return self


@dataclass
class Scene:
    index: int
    image: np.ndarray      # [H, W, 3] float32 in [0, 1]
    mask: np.ndarray       # [H, W] uint8, 0 = background, k + 1 = SHAPES[k]
    label: int
    counts: tuple[int, ...]


class SyntheticShapes:
    def __init__(self, config: DatasetConfig | None = None, seed: int = 0):
        self.config = (config or DatasetConfig()).validate()
        self.seed = seed

    def __len__(self) -> int:
        return self.config.length

    @cached_property
    def classes(self) -> list[tuple[int, ...]]:
        return shape_multisets(self.config.max_shapes)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def _background(self, rng: np.random.Generator) -> Image.Image:
        size = self.config.image_size
        cells = self.config.noise_cells
        coarse = (rng.random((cells, cells, 3)) * 90 + 20).astype(np.uint8)
        field = np.asarray(Image.fromarray(coarse, 'RGB').resize((size, size), Image.Resampling.BICUBIC),
                           dtype=np.float64)
        field += rng.normal(0.0, 8.0, field.shape)
        return Image.fromarray(np.clip(field, 0, 255).astype(np.uint8), 'RGB')

    def _draw_shape(self, draw: ImageDraw.ImageDraw, mask_draw: ImageDraw.ImageDraw, kind: int,
                    rng: np.random.Generator) -> None:
        size = self.config.image_size
        radius = int(rng.integers(size // 10, size // 5 + 1))
        cx, cy = (int(v) for v in rng.integers(radius, size - radius, size=2))
        color = _hex_to_rgb(SHAPE_COLORS[int(rng.integers(len(SHAPE_COLORS)))])
        box = [cx - radius, cy - radius, cx + radius, cy + radius]
        if SHAPES[kind] == 'circle':
            draw.ellipse(box, fill=color)
            mask_draw.ellipse(box, fill=kind + 1)
        elif SHAPES[kind] == 'square':
            draw.rectangle(box, fill=color)
            mask_draw.rectangle(box, fill=kind + 1)
        else:
            points = [(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)]
            draw.polygon(points, fill=color)
            mask_draw.polygon(points, fill=kind + 1)

    def __getitem__(self, index: int) -> Scene:
        if not 0 <= index < len(self):
            raise IndexError(f'scene index {index} out of range [0, {len(self)})')
        cfg = self.config
        rng = derive_rng(self.seed, 'dataset', index)
        n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        kinds = sorted(int(k) for k in rng.integers(0, len(SHAPES), size=n_shapes))
        image = self._background(rng)
        mask = Image.new('L', (cfg.image_size, cfg.image_size), 0)
        draw, mask_draw = ImageDraw.Draw(image), ImageDraw.Draw(mask)
        for kind in kinds:
            self._draw_shape(draw, mask_draw, kind, rng)
        counts = tuple(kinds.count(k) for k in range(len(SHAPES)))
        return Scene(
            index=index,
            image=np.asarray(image, dtype=np.float32) / 255.0,
            mask=np.asarray(mask, dtype=np.uint8),
            label=self.classes.index(counts),
            counts=counts,
        )

    def images(self, indices) -> np.ndarray:
        return np.stack([self[int(i)].image for i in indices])

    def labels(self, indices=None) -> np.ndarray:
        indices = range(len(self)) if indices is None else indices
        return np.array([self[int(i)].label for i in indices], dtype=np.int64)

    def shape_count_parts(self) -> dict[str, np.ndarray]:
        """Index sets by number of shapes in the scene ('one', 'two', 'three')."""
        names = {1: 'one', 2: 'two', 3: 'three'}
        totals = np.array([sum(self[i].counts) for i in range(len(self))])
        return {names.get(t, str(t)): np.flatnonzero(totals == t) for t in np.unique(totals)}
