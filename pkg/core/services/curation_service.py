"""
Desk-scale data curation: k-means++ / Lloyd clustering, a bottom-up cluster
hierarchy, and top-down balanced sampling over it.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans, kmeans_plusplus
from sklearn.exceptions import ConvergenceWarning

from ..exceptions import CurationError
from ..utils.seeding import derive_rng
from ..utils.tensor import no_grad
from ..utils.tensor_io import atomic_write_bytes
from .crop_service import resize_image
from .vit_service import ViTState, forward

logger = logging.getLogger(__name__)

EMBEDDING_SOURCES = ('pixels', 'checkpoint')


@dataclass
class Clustering:
    centroids: np.ndarray               # [k, d]
    labels: np.ndarray                  # [n]
    sse_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def sse(self) -> float:
        return self.sse_history[-1] if self.sse_history else 0.0


def _sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _reseed_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> None:
    """Give each empty cluster the point farthest from its centroid, taken from a cluster that keeps a member."""
    k = len(centroids)
    for cluster in range(k):
        if np.any(labels == cluster):
            continue
        own = ((points - centroids[labels]) ** 2).sum(axis=1)
        # donors must keep at least one point
        own[np.bincount(labels, minlength=k)[labels] < 2] = -1.0
        farthest = int(own.argmax())
        centroids[cluster] = points[farthest]
        labels[farthest] = cluster


def kmeans(points, k: int, max_iter: int = 50, seed: int = 0) -> Clustering:
    """
    k-means++ seeding followed by Lloyd iterations until the assignment stops
    changing or `max_iter` is reached. Each iteration is one single-step
    scikit-learn Lloyd pass warm-started from the previous centroids, so the
    SSE of every assignment is recorded. An empty cluster is re-seeded with
    the point farthest from its current centroid, taken from a cluster that
    keeps at least one other member.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if k < 1 or n < k:
        raise CurationError(f'kmeans needs n >= k >= 1, got n={n}, k={k}')
    if max_iter < 1:
        raise CurationError(f'kmeans needs max_iter >= 1, got {max_iter}')
    random_state = int(derive_rng(seed, 'kmeans', k).integers(2 ** 31 - 1))
    centroids, _ = kmeans_plusplus(points, k, random_state=random_state)
    labels = None
    history = []
    iterations = 0
    with warnings.catch_warnings():
        # duplicate points can leave fewer distinct centroids than k; _reseed_empty handles that
        warnings.simplefilter('ignore', ConvergenceWarning)
        for iterations in range(1, max_iter + 1):
            model = KMeans(n_clusters=k, init=centroids, n_init=1, max_iter=1, algorithm='lloyd').fit(points)
            centroids = model.cluster_centers_.copy()
            new_labels = model.labels_.astype(np.int64)
            _reseed_empty(points, centroids, new_labels)
            history.append(_sse(points, centroids, new_labels))
            if labels is not None and np.array_equal(labels, new_labels):
                break
            labels = new_labels
    return Clustering(centroids=centroids, labels=new_labels, sse_history=history, iterations=iterations)


@dataclass
class ClusterLevel:
    centroids: np.ndarray
    parent: np.ndarray                  # level-below cluster (or point at level 0) -> cluster at this level
    point_labels: np.ndarray            # every point -> cluster at this level

    @property
    def count(self) -> int:
        return len(self.centroids)


@dataclass
class ClusterHierarchy:
    levels: list[ClusterLevel]
    n_points: int

    @property
    def counts(self) -> list[int]:
        return [level.count for level in self.levels]

    def is_consistent(self) -> bool:
        """Each point's level-l cluster maps to its level-(l+1) cluster."""
        for lower, upper in zip(self.levels, self.levels[1:]):
            if not np.array_equal(upper.parent[lower.point_labels], upper.point_labels):
                return False
        return True


def build_hierarchy(points, level_counts, seed: int = 0, max_iter: int = 50) -> ClusterHierarchy:
    level_counts = [int(c) for c in level_counts]
    if not level_counts:
        raise CurationError('build_hierarchy needs at least one level')
    if any(a <= b for a, b in zip(level_counts, level_counts[1:])):
        raise CurationError(f'level counts must strictly decrease upward, got {level_counts}')
    points = np.asarray(points, dtype=np.float64)
    levels = []
    inputs = points
    point_labels = np.arange(len(points))
    for count in level_counts:
        clustering = kmeans(inputs, count, max_iter=max_iter, seed=seed)
        point_labels = clustering.labels[point_labels]
        levels.append(ClusterLevel(clustering.centroids, clustering.labels, point_labels))
        inputs = clustering.centroids
    logger.info(f'Built cluster hierarchy with counts {level_counts} over {len(points)} points')
    return ClusterHierarchy(levels=levels, n_points=len(points))


# --------------------
# Balanced sampling
# --------------------
@dataclass
class CurationReport:
    requested: int
    sampled: int
    occupancy: list[np.ndarray]         # per level, sampled points per cluster
    entropy: list[float]                # per level, Shannon entropy (nats) of the occupancy

    def frame(self) -> pd.DataFrame:
        rows = []
        for level, (hist, entropy) in enumerate(zip(self.occupancy, self.entropy), start=1):
            for cluster, count in enumerate(hist):
                rows.append({'level': level, 'cluster': cluster, 'sampled': int(count), 'level_entropy': entropy})
        return pd.DataFrame(rows, columns=['level', 'cluster', 'sampled', 'level_entropy'])


def occupancy_entropy(labels, k: int) -> float:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=k).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def split_quota(quota: int, capacities, rng: np.random.Generator) -> np.ndarray:
    """Even integer split of `quota` over groups, capped by capacity; shortfall flows to groups with room."""
    capacities = np.asarray(capacities, dtype=np.int64)
    alloc = np.zeros(len(capacities), dtype=np.int64)
    remaining = int(quota)
    open_groups = np.flatnonzero(capacities > 0)
    while remaining > 0 and len(open_groups):
        share, extra = divmod(remaining, len(open_groups))
        for rank, group in enumerate(rng.permutation(open_groups)):
            give = min(share + (1 if rank < extra else 0), capacities[group] - alloc[group])
            alloc[group] += give
            remaining -= give
        open_groups = np.flatnonzero(alloc < capacities)
    return alloc


def balanced_sample(h: ClusterHierarchy, m: int, seed: int = 0) -> tuple[np.ndarray, CurationReport]:
    """Top-down quota splitting from the top level to the points, sampling without replacement at the leaves."""
    if not 0 <= m <= h.n_points:
        raise CurationError(f'Cannot sample {m} of {h.n_points} points')
    rng = derive_rng(seed, 'balanced_sample')
    # children[l][c]: clusters of level l-1 (points at l=0) under cluster c of level l
    children = [[np.flatnonzero(level.parent == c) for c in range(level.count)] for level in h.levels]
    sizes = [np.bincount(level.point_labels, minlength=level.count) for level in h.levels]

    chosen: list[int] = []

    def descend(depth: int, cluster: int, quota: int) -> None:
        if quota == 0:
            return
        kids = children[depth][cluster]
        if depth == 0:
            chosen.extend(int(i) for i in rng.choice(kids, size=quota, replace=False))
            return
        quotas = split_quota(quota, sizes[depth - 1][kids], rng)
        for kid, kid_quota in zip(kids, quotas):
            descend(depth - 1, int(kid), int(kid_quota))

    top = len(h.levels) - 1
    for cluster, quota in enumerate(split_quota(m, sizes[top], rng)):
        descend(top, cluster, int(quota))
    indices = np.array(sorted(chosen), dtype=np.int64)
    occupancy = [np.bincount(level.point_labels[indices], minlength=level.count) for level in h.levels]
    report = CurationReport(
        requested=m,
        sampled=len(indices),
        occupancy=occupancy,
        entropy=[occupancy_entropy(level.point_labels[indices], level.count) for level in h.levels],
    )
    return indices, report


def iid_sample(n: int, m: int, seed: int = 0) -> np.ndarray:
    return np.sort(derive_rng(seed, 'iid_sample').choice(n, size=m, replace=False))


# --------------------
# Embeddings and outputs
# --------------------
def pixel_embeddings(images, size: int = 8) -> np.ndarray:
    """Downsampled pixels, flattened: [N, size * size * C]."""
    return np.stack([resize_image(image, size).reshape(-1) for image in images]).astype(np.float64)


def checkpoint_embeddings(backbone: ViTState, images, batch_size: int = 32) -> np.ndarray:
    """CLS features of `backbone` (inference: no jitter, global output norm)."""
    images = np.asarray(images)
    features = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            features.append(forward(backbone, images[start:start + batch_size]).cls.data)
    return np.concatenate(features).astype(np.float64)


def write_index_file(path, indices) -> Path:
    payload = ''.join(f'{int(i)}\n' for i in indices).encode('utf-8')
    return atomic_write_bytes(path, payload)


def write_report(path, report: CurationReport) -> Path:
    return atomic_write_bytes(path, report.frame().to_csv(index=False).encode('utf-8'))
