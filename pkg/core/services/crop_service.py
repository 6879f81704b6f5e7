"""
Multi-crop views and iBOT mask plans.

Every image yields 2 global crops and n_local local crops (random resized
square crops, horizontal flip, brightness/contrast jitter). Each global crop is
masked with probability 0.5; a masked crop hides between 10% and 50% of its
patches. For the Gram teacher, the same global crop regions can be rendered
a second time at a higher resolution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from ..exceptions import ConfigError, GeometryError

logger = logging.getLogger(__name__)

N_GLOBAL = 2

# (global, local, gram teacher) crop sides in pixels at full scale, with draw probabilities
ADAPTATION_TRIPLES = (
    ((512, 112, 768), 0.3),
    ((768, 112, 1152), 0.3),
    ((768, 168, 1152), 0.3),
    ((768, 224, 1152), 0.05),
    ((768, 336, 1152), 0.05),
)


@dataclass(frozen=True)
class CropConfig:
    global_size: int = 32
    local_size: int = 16
    n_local: int = 8
    global_scale: tuple = (0.32, 1.0)
    local_scale: tuple = (0.05, 0.32)
    flip_probability: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    mask_probability: float = 0.5
    mask_ratio: tuple = (0.1, 0.5)
    patch_size: int = 8
    gram_size: int | None = None

    def validate(self) -> 'CropConfig':
        for name in ('global_size', 'local_size') + (('gram_size',) if self.gram_size else ()):
            value = getattr(self, name)
            if value < self.patch_size or value % self.patch_size:
                raise ConfigError(f'{name}={value} must be a positive multiple of patch_size {self.patch_size}')
        if self.n_local < 0:
            raise ConfigError(f'n_local must be >= 0, got {self.n_local}')
        if not 0 <= self.mask_probability <= 1:
            raise ConfigError(f'mask_probability must be in [0, 1], got {self.mask_probability}')
        lo, hi = self.mask_ratio
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f'mask_ratio must satisfy 0 < lo <= hi <= 1, got {self.mask_ratio}')
        return self


@dataclass(frozen=True)
class CropGeometry:
    top: int
    left: int
    side: int
    out_size: int
    flipped: bool
    brightness: float
    contrast: float


@dataclass
class CropEntry:
    """All views of one source image."""
    image_id: int
    global_crops: np.ndarray            # [2, G, G, C]
    local_crops: np.ndarray             # [n_local, L, L, C]
    masks: np.ndarray                   # [2, P_global] bool
    geometry: list[CropGeometry] = field(default_factory=list)
    gram_crops: np.ndarray | None = None  # [2, Gg, Gg, C]


@dataclass
class CropBatch:
    """Views stacked view-major: global_crops[v] is the [B, G, G, C] batch of view v."""
    global_crops: np.ndarray            # [2, B, G, G, C]
    local_crops: np.ndarray             # [n_local, B, L, L, C]
    masks: np.ndarray                   # [2, B, P_global] bool
    image_ids: np.ndarray
    geometry: list[list[CropGeometry]] = field(default_factory=list)
    gram_crops: np.ndarray | None = None  # [2, B, Gg, Gg, C]

    @property
    def batch_size(self) -> int:
        return self.global_crops.shape[1]

    @property
    def n_local(self) -> int:
        return self.local_crops.shape[0]

    @classmethod
    def stack(cls, entries: list[CropEntry]) -> 'CropBatch':
        if not entries:
            raise GeometryError('Cannot build a crop batch from zero images')
        gram = None
        if entries[0].gram_crops is not None:
            gram = np.stack([e.gram_crops for e in entries], axis=1)
        return cls(
            global_crops=np.stack([e.global_crops for e in entries], axis=1),
            local_crops=np.stack([e.local_crops for e in entries], axis=1),
            masks=np.stack([e.masks for e in entries], axis=1),
            image_ids=np.array([e.image_id for e in entries], dtype=np.int64),
            geometry=[e.geometry for e in entries],
            gram_crops=gram,
        )


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bicubic resize of an [H, W, C] float image to size x size, channel by channel in float mode."""
    if image.shape[0] == size and image.shape[1] == size:
        return image.astype(np.float32, copy=True)
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32), mode='F')
                   .resize((size, size), Image.Resampling.BICUBIC))
        for c in range(image.shape[-1])
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def _crop_geometry(rng: np.random.Generator, height: int, width: int, scale: tuple, out_size: int,
                   config: CropConfig) -> CropGeometry:
    area_fraction = rng.uniform(*scale)
    side = int(round(math.sqrt(area_fraction) * min(height, width)))
    side = min(max(side, 1), min(height, width))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return CropGeometry(
        top=top, left=left, side=side, out_size=out_size,
        flipped=bool(rng.random() < config.flip_probability),
        brightness=float(rng.uniform(1 - config.brightness, 1 + config.brightness)),
        contrast=float(rng.uniform(1 - config.contrast, 1 + config.contrast)),
    )


def render_crop(image: np.ndarray, geometry: CropGeometry, out_size: int | None = None) -> np.ndarray:
    region = image[geometry.top:geometry.top + geometry.side, geometry.left:geometry.left + geometry.side]
    crop = resize_image(region, out_size or geometry.out_size)
    if geometry.flipped:
        crop = crop[:, ::-1]
    crop = crop * geometry.brightness
    mean = crop.mean()
    crop = (crop - mean) * geometry.contrast + mean
    return np.clip(crop, 0.0, 1.0).astype(np.float32)


def mask_plan(rng: np.random.Generator, n_patches: int, probability: float = 0.5,
              ratio: tuple = (0.1, 0.5)) -> np.ndarray:
    """Boolean patch vector: empty with prob 1 - probability, otherwise a uniform random subset."""
    plan = np.zeros(n_patches, dtype=bool)
    if rng.random() >= probability:
        return plan
    low = math.ceil(ratio[0] * n_patches)
    high = math.floor(ratio[1] * n_patches)
    if high < max(low, 1):
        return plan
    count = int(np.clip(round(rng.uniform(*ratio) * n_patches), low, high))
    plan[rng.choice(n_patches, size=count, replace=False)] = True
    return plan


def sample_crops(image: np.ndarray, config: CropConfig, rng: np.random.Generator, image_id: int = 0,
                 mask_rng: np.random.Generator | None = None) -> CropEntry:
    config.validate()
    height, width = image.shape[:2]
    if min(height, width) < config.global_size:
        raise GeometryError(
            f'Image {height}x{width} is smaller than the {config.global_size}px global crop'
        )
    mask_rng = mask_rng or rng
    n_patches = (config.global_size // config.patch_size) ** 2
    geometry, globals_, gram, masks = [], [], [], []
    for _ in range(N_GLOBAL):
        geo = _crop_geometry(rng, height, width, config.global_scale, config.global_size, config)
        geometry.append(geo)
        globals_.append(render_crop(image, geo))
        if config.gram_size:
            gram.append(render_crop(image, geo, config.gram_size))
        masks.append(mask_plan(mask_rng, n_patches, config.mask_probability, config.mask_ratio))
    locals_ = []
    for _ in range(config.n_local):
        geo = _crop_geometry(rng, height, width, config.local_scale, config.local_size, config)
        geometry.append(geo)
        locals_.append(render_crop(image, geo))
    channels = image.shape[-1]
    return CropEntry(
        image_id=image_id,
        global_crops=np.stack(globals_),
        local_crops=np.stack(locals_) if locals_ else np.zeros(
            (0, config.local_size, config.local_size, channels), np.float32),
        masks=np.stack(masks),
        geometry=geometry,
        gram_crops=np.stack(gram) if gram else None,
    )


def build_crop_batch(images, image_ids, config: CropConfig, rng: np.random.Generator,
                     mask_rng: np.random.Generator | None = None) -> CropBatch:
    entries = [sample_crops(img, config, rng, int(i), mask_rng) for img, i in zip(images, image_ids)]
    return CropBatch.stack(entries)


# --------------------
# Mixed-resolution adaptation
# --------------------
def scaled_triples(toy_factor: int = 8, patch_size: int = 8) -> list[tuple[tuple[int, int, int], float]]:
    """Adaptation triples divided by `toy_factor` and rounded up to patch multiples."""
    if toy_factor < 1:
        raise ConfigError(f'toy_factor must be >= 1, got {toy_factor}')

    def scale(px: int) -> int:
        return math.ceil(px / toy_factor / patch_size) * patch_size

    return [(tuple(scale(px) for px in sizes), p) for sizes, p in ADAPTATION_TRIPLES]


def draw_resolution_triple(rng: np.random.Generator, triples) -> tuple[int, int, int]:
    probabilities = np.array([p for _, p in triples], dtype=np.float64)
    choice = int(rng.choice(len(triples), p=probabilities / probabilities.sum()))
    return triples[choice][0]


def adaptation_config(base: CropConfig, triple: tuple[int, int, int]) -> CropConfig:
    global_size, local_size, gram_size = triple
    return replace(base, global_size=global_size, local_size=local_size, gram_size=gram_size).validate()
