"""
Measurement instruments for dense features: cosine maps, CLS-patch cosine,
locality score, PCA-to-RGB rendering, high-resolution feature smoothing and
the outlier statistics (patch norms, dominant channels).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.decomposition import PCA

from ..exceptions import ConfigError, GeometryError
from ..utils.functional import bicubic_resize
from ..utils.tensor import Tensor

logger = logging.getLogger(__name__)

PROVENANCE_KEYS = ('checkpoint', 'layer', 'resolution', 'norm_applied')
PCA_PERMUTATIONS = tuple(itertools.permutations(range(3)))
PCA_VARIANT_COUNT = 8 * len(PCA_PERMUTATIONS)


def _array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


@dataclass
class FeatureMap:
    data: np.ndarray                    # [h, w, d]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise GeometryError(f'FeatureMap data must be [h, w, d], got {self.data.shape}')
        missing = [k for k in PROVENANCE_KEYS if k not in self.provenance]
        if missing:
            raise ConfigError(f'FeatureMap provenance is missing {missing}')

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def tokens(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)

    @classmethod
    def from_tokens(cls, patches, grid: tuple[int, int], checkpoint='', layer=0, resolution=0,
                    norm_applied=False) -> 'FeatureMap':
        array = _array(patches)
        return cls(array.reshape(grid[0], grid[1], array.shape[-1]), {
            'checkpoint': str(checkpoint), 'layer': int(layer),
            'resolution': int(resolution), 'norm_applied': bool(norm_applied),
        })


def _unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def cosine_map(f: FeatureMap, ref: tuple[int, int]) -> np.ndarray:
    """Cosine similarity of every patch with the patch at grid position `ref` (row, col)."""
    h, w = f.grid
    row, col = ref
    if not (0 <= row < h and 0 <= col < w):
        raise GeometryError(f'Reference {ref} outside the {h}x{w} grid')
    unit = _unit_rows(f.data)
    sims = np.clip(unit @ unit[row, col], -1.0, 1.0)
    if np.linalg.norm(f.data[row, col]) > 0:
        sims[row, col] = 1.0
    return sims


def cls_patch_cosine(output=None, cls=None, patches=None) -> float:
    """Mean cosine between the CLS token and every patch token (BackboneOutput or explicit arrays)."""
    if output is not None:
        cls, patches = output.cls, output.patches
    cls_arr, patch_arr = _array(cls), _array(patches)
    if cls_arr.ndim == 1:
        cls_arr, patch_arr = cls_arr[None], patch_arr[None]
    sims = np.einsum('bd,bpd->bp', _unit_rows(cls_arr), _unit_rows(patch_arr))
    return float(sims.mean())


def chebyshev_distances(h: int, w: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.maximum(np.abs(rows[:, None] - rows[None]), np.abs(cols[:, None] - cols[None]))


def locality_score(f: FeatureMap, radius: int = 1) -> float:
    """
    Mean over patches of (mean cosine to patches within Chebyshev distance
    `radius`) minus (mean cosine to patches at distance >= 2 * radius).
    Patches without any far partner are left out of the mean.
    """
    if radius < 1:
        raise ConfigError(f'locality radius must be >= 1, got {radius}')
    h, w = f.grid
    if max(h, w) - 1 < 2 * radius:
        raise GeometryError(f'{h}x{w} grid is too small for radius {radius} (needs a side > {2 * radius})')
    unit = _unit_rows(f.tokens())
    sims = unit @ unit.T
    dist = chebyshev_distances(h, w)
    near = (dist >= 1) & (dist <= radius)
    far = dist >= 2 * radius
    usable = far.any(axis=1) & near.any(axis=1)
    near_mean = (sims * near).sum(axis=1)[usable] / near.sum(axis=1)[usable]
    far_mean = (sims * far).sum(axis=1)[usable] / far.sum(axis=1)[usable]
    return float(np.mean(near_mean - far_mean))


# --------------------
# PCA rendering
# --------------------
@dataclass
class PCARendering:
    image: np.ndarray                   # [h, w, 3] in [0, 1]
    variant: int
    explained_variance_ratio: np.ndarray
    components: np.ndarray              # [3, d], zero rows where flagged
    flagged_channels: list[int]
    scores: np.ndarray                  # auto-score of every variant


def pca_variant(index: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """(permutation, signs) of variant `index` in [0, 48)."""
    if not 0 <= index < PCA_VARIANT_COUNT:
        raise ConfigError(f'PCA variant must be in [0, {PCA_VARIANT_COUNT}), got {index}')
    perm = PCA_PERMUTATIONS[index // 8]
    bits = index % 8
    signs = tuple(-1 if bits >> c & 1 else 1 for c in range(3))
    return perm, signs


def _render(projection: np.ndarray, index: int, grid: tuple[int, int]) -> np.ndarray:
    perm, signs = pca_variant(index)
    channels = []
    for c in range(3):
        values = signs[c] * projection[:, perm[c]]
        span = values.max() - values.min()
        channels.append((values - values.min()) / span if span > 1e-12 else np.zeros_like(values))
    return np.stack(channels, axis=-1).reshape(grid[0], grid[1], 3)


def _decorrelation_score(image: np.ndarray) -> float:
    pixels = image.reshape(-1, 3)
    total = 0.0
    for a, b in ((0, 1), (0, 2), (1, 2)):
        x, y = pixels[:, a] - pixels[:, a].mean(), pixels[:, b] - pixels[:, b].mean()
        denom = np.sqrt((x * x).sum() * (y * y).sum())
        total += (x * y).sum() / denom if denom > 1e-12 else 0.0
    return -total


def pca_rgb(f: FeatureMap, variant: int | None = None) -> PCARendering:
    """
    Top-3 principal components of the mean-centred patch features as RGB.

    `variant` picks one of the 48 sign/permutation renderings explicitly;
    None selects the most decorrelated rendering (lowest index on ties).
    Components with no variance are zeroed and flagged.
    """
    h, w = f.grid
    tokens = f.tokens().astype(np.float64)
    if h * w < 3:
        raise GeometryError(f'pca_rgb needs at least 3 patches, got {h * w}')
    n_components = min(3, tokens.shape[1])
    pca = PCA(n_components=n_components, svd_solver='full').fit(tokens)
    projection = np.zeros((len(tokens), 3))
    components = np.zeros((3, tokens.shape[1]))
    ratio = np.zeros(3)
    projection[:, :n_components] = pca.transform(tokens)
    components[:n_components] = pca.components_
    ratio[:n_components] = np.nan_to_num(pca.explained_variance_ratio_)
    total_var = float(np.var(tokens, axis=0).sum())
    flagged = [c for c in range(3) if c >= n_components or total_var <= 0
               or pca.explained_variance_[c] <= 1e-10 * max(total_var, 1e-300)]
    for c in flagged:
        projection[:, c] = 0.0
        components[c] = 0.0
    if flagged:
        logger.info(f'pca_rgb: rank-deficient features, flagged channels {flagged}')
    scores = np.array([_decorrelation_score(_render(projection, i, (h, w))) for i in range(PCA_VARIANT_COUNT)])
    chosen = int(np.argmax(scores)) if variant is None else variant
    return PCARendering(
        image=_render(projection, chosen, (h, w)),
        variant=chosen,
        explained_variance_ratio=ratio,
        components=components,
        flagged_channels=flagged,
        scores=scores,
    )


# --------------------
# High-resolution smoothing
# --------------------
def highres_smooth(features, factor: int | None = None, target_grid: tuple[int, int] | None = None):
    """
    Bicubic downsample of a high-resolution feature map ([h, w, d], [B, h, w, d]
    or a FeatureMap) to the base grid, then row L2 re-normalization.

    With `factor`, the base grid is (h / factor, w / factor) and must divide
    exactly; `target_grid` gives the base grid directly.
    """
    is_map = isinstance(features, FeatureMap)
    array = features.data if is_map else _array(features)
    h, w = array.shape[-3], array.shape[-2]
    if target_grid is None:
        if factor is None or factor < 1:
            raise ConfigError('highres_smooth needs factor >= 1 or an explicit target_grid')
        if h % factor or w % factor:
            raise GeometryError(f'{h}x{w} feature grid is not divisible by factor {factor}')
        target_grid = (h // factor, w // factor)
    out = bicubic_resize(array, target_grid[0], target_grid[1]) if (h, w) != tuple(target_grid) else array
    out = (_unit_rows(out)).astype(array.dtype)
    if is_map:
        return FeatureMap(out, dict(features.provenance))
    return out


# --------------------
# Outlier statistics
# --------------------
def patch_norm_stats(prenorm_patches, outlier_factor: float = 3.0) -> dict:
    """Norm statistics of residual-stream patch tokens before the output norm."""
    norms = np.linalg.norm(_array(prenorm_patches).reshape(-1, _array(prenorm_patches).shape[-1]), axis=-1)
    median = float(np.median(norms))
    return {
        'mean': float(norms.mean()),
        'median': median,
        'max': float(norms.max()),
        'outlier_fraction': float(np.mean(norms > outlier_factor * median)) if median > 0 else 0.0,
    }


def feature_dimension_outliers(features, factor: float = 10.0) -> np.ndarray:
    """Channels whose mean |activation| exceeds `factor` x the median channel magnitude."""
    array = _array(features)
    magnitude = np.abs(array.reshape(-1, array.shape[-1])).mean(axis=0)
    median = np.median(magnitude)
    if median <= 0:
        return np.flatnonzero(magnitude > 0)
    return np.flatnonzero(magnitude > factor * median)


def standardize_features(train, test=None, eps: float = 1e-6):
    """Per-channel standardization with statistics taken from `train` only."""
    train = np.asarray(_array(train), dtype=np.float64)
    mean = train.mean(axis=0)
    std = train.std(axis=0) + eps
    scaled_train = (train - mean) / std
    if test is None:
        return scaled_train
    return scaled_train, (np.asarray(_array(test), dtype=np.float64) - mean) / std
