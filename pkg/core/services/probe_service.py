"""
Frozen-feature probes: cosine kNN vote and softmax linear classifiers
(CLS classification and per-patch dense labelling) selected over an
lr x weight-decay grid on a held-out split.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ProbeError
from ..utils import functional as F
from ..utils.seeding import derive_rng
from ..utils.tensor import Tensor, no_grad
from .diagnostics_service import standardize_features
from .optim_service import AdamW, OptimizerConfig, ParamSpec

logger = logging.getLogger(__name__)

DEFAULT_LRS = (1e-2, 3e-2, 1e-1)
DEFAULT_WDS = (1e-4, 1e-3)


@dataclass
class ProbeResult:
    task: str
    metric: str
    value: float
    hyperparameters: dict = field(default_factory=dict)
    split_sizes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {'task': self.task, 'metric': self.metric, 'value': self.value,
                'hyperparameters': dict(self.hyperparameters), 'split_sizes': dict(self.split_sizes)}


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_x, train_y, test_x, k: int = 20) -> np.ndarray:
    """
    Majority vote of the k most cosine-similar train rows. Rows tied with the
    k-th similarity all vote, so the result does not depend on train order;
    vote ties go to the larger summed similarity, then to the lower label.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_y) == 0:
        raise ProbeError('knn probe needs a non-empty train set')
    if k < 1:
        raise ProbeError(f'knn k must be >= 1, got {k}')
    k = min(k, len(train_y))
    sims = _unit(test_x) @ _unit(train_x).T
    n_classes = int(train_y.max()) + 1
    predictions = np.empty(len(sims), dtype=np.int64)
    for row, s in enumerate(sims):
        cutoff = np.partition(s, len(s) - k)[len(s) - k]
        neighbours = np.flatnonzero(s >= cutoff)
        # summation order by (similarity, label) keeps the weights order-free too
        neighbours = neighbours[np.lexsort((train_y[neighbours], s[neighbours]))]
        votes = np.bincount(train_y[neighbours], minlength=n_classes)
        weight = np.bincount(train_y[neighbours], weights=s[neighbours], minlength=n_classes)
        best = np.flatnonzero(votes == votes.max())
        predictions[row] = best[np.argmax(weight[best])]
    return predictions


def knn_probe(train_x, train_y, test_x, test_y, k: int = 20, task: str = 'knn') -> ProbeResult:
    predictions = knn_predict(train_x, train_y, test_x, k)
    accuracy = float(np.mean(predictions == np.asarray(test_y))) if len(predictions) else 0.0
    return ProbeResult(task, 'accuracy', accuracy, {'k': int(min(k, len(train_y)))},
                       {'train': int(len(train_y)), 'test': int(len(predictions))})


# --------------------
# Linear probes
# --------------------
def _train_linear(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float, wd: float, epochs: int,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch AdamW on softmax cross-entropy; returns (weight [d, C], bias [C])."""
    rng = derive_rng(seed, 'linear_probe')
    weight = Tensor(rng.normal(0.0, 0.01, (x.shape[1], n_classes)), requires_grad=True, dtype=np.float64)
    bias = Tensor(np.zeros(n_classes), requires_grad=True, dtype=np.float64)
    optimizer = AdamW({'weight': ParamSpec(weight, 1.0, True), 'bias': ParamSpec(bias, 1.0, False)},
                      OptimizerConfig(weight_decay=wd, clip_grad=0.0))
    inputs = Tensor(x, dtype=np.float64)
    targets = np.eye(n_classes)[y]
    for _ in range(epochs):
        optimizer.zero_grad()
        loss = F.cross_entropy_soft(F.matmul(inputs, weight) + bias, targets)
        loss.backward()
        optimizer.step(lr)
    return weight.data, bias.data


def _predict(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return np.argmax(x @ weight + bias, axis=1)


def _split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = derive_rng(seed, 'probe_split').permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n - n_val < 1:
        raise ProbeError(f'Not enough samples ({n}) for a held-out split')
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _grid_search(x, y, n_classes, lrs, wds, epochs, val_fraction, seed):
    train_idx, val_idx = _split(len(y), val_fraction, seed)
    x_train, x_val = standardize_features(x[train_idx], x[val_idx])
    best = None
    with np.errstate(over='ignore'):
        for lr in lrs:
            for wd in wds:
                weight, bias = _train_linear(x_train, y[train_idx], n_classes, lr, wd, epochs, seed)
                with no_grad():
                    accuracy = float(np.mean(_predict(x_val, weight, bias) == y[val_idx]))
                logger.debug(f'linear probe lr={lr} wd={wd}: val accuracy {accuracy:.4f}')
                if best is None or accuracy > best[0]:
                    best = (accuracy, lr, wd, weight, bias)
    return best, train_idx, val_idx, x_val


def linear_probe(features, labels, lrs=DEFAULT_LRS, wds=DEFAULT_WDS, epochs: int = 100, val_fraction: float = 0.25,
                 seed: int = 0, task: str = 'linear_cls') -> ProbeResult:
    """
    Softmax linear classifier on standardized features; the grid cell with the
    best held-out accuracy wins (first cell in grid order on ties).
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ProbeError('linear probe needs at least two classes')
    n_classes = int(y.max()) + 1
    best, train_idx, val_idx, _ = _grid_search(x, y, n_classes, lrs, wds, epochs, val_fraction, seed)
    accuracy, lr, wd = best[:3]
    return ProbeResult(task, 'accuracy', accuracy, {'lr': lr, 'wd': wd, 'epochs': epochs},
                       {'train': int(len(train_idx)), 'val': int(len(val_idx))})


def patch_labels(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Majority mask value inside each patch, row-major: [P]."""
    h, w = mask.shape
    blocks = mask[:h - h % patch_size, :w - w % patch_size].reshape(
        h // patch_size, patch_size, w // patch_size, patch_size).transpose(0, 2, 1, 3)
    flat = blocks.reshape(-1, patch_size * patch_size).astype(np.int64)
    return np.array([np.bincount(row).argmax() for row in flat], dtype=np.int64)


def mean_iou(predictions, targets, n_classes: int) -> float:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    ious = []
    for c in range(n_classes):
        union = np.sum((predictions == c) | (targets == c))
        if union:
            ious.append(np.sum((predictions == c) & (targets == c)) / union)
    return float(np.mean(ious)) if ious else 0.0


def dense_linear_probe(patch_features, labels, lrs=DEFAULT_LRS, wds=DEFAULT_WDS, epochs: int = 100,
                       val_fraction: float = 0.25, seed: int = 0) -> ProbeResult:
    """
    Per-patch linear classifier on [N, P, d] features against [N, P] patch labels.

    Images (not patches) are split into train / held-out; the reported value
    is the held-out mean IoU of the best grid cell.
    """
    feats = np.asarray(patch_features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if feats.shape[:2] != y.shape:
        raise ProbeError(f'patch features {feats.shape} do not match labels {y.shape}')
    if len(np.unique(y)) < 2:
        raise ProbeError('dense probe needs at least two patch classes')
    n_images, n_patches, dim = feats.shape
    n_classes = int(y.max()) + 1
    train_img, val_img = _split(n_images, val_fraction, seed)
    x_train, x_val = standardize_features(feats[train_img].reshape(-1, dim), feats[val_img].reshape(-1, dim))
    y_train, y_val = y[train_img].reshape(-1), y[val_img].reshape(-1)
    best = None
    for lr in lrs:
        for wd in wds:
            weight, bias = _train_linear(x_train, y_train, n_classes, lr, wd, epochs, seed)
            score = mean_iou(_predict(x_val, weight, bias), y_val, n_classes)
            if best is None or score > best[0]:
                best = (score, lr, wd)
    return ProbeResult('linear_dense', 'miou', best[0], {'lr': best[1], 'wd': best[2], 'epochs': epochs},
                       {'train': int(len(train_img) * n_patches), 'val': int(len(val_img) * n_patches)})
