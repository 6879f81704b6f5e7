"""
Self-supervised objectives: Sinkhorn-Knopp teacher targets, the DINO image
loss, the iBOT masked-patch loss, the grouped Koleo regularizer, Gram
anchoring, and the weighted composite used by pre-training and refinement.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from ..exceptions import ConfigError, DimensionError, NumericFault
from ..utils import functional as F
from ..utils.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

COMPONENTS = ('dino', 'ibot', 'koleo', 'gram')
PHASES = ('pretrain', 'refine')
METRIC_FIELDS = ('step', 'dino', 'ibot', 'koleo', 'gram', 'total', 'lr', 'teacher_temp')
KOLEO_EPS = 1e-8
STUDENT_TEMPERATURE = 0.1


# --------------------
# Teacher targets
# --------------------
def sinkhorn_knopp(scores, n_iter: int = 3, temperature: float = 1.0) -> np.ndarray:
    """
    Balanced soft assignment of B rows over K prototypes.

    Starts from exp(scores / temperature), then alternates column and row
    normalization `n_iter` times, ending on rows. Rows of the result sum to 1
    and column sums approach B / K as `n_iter` grows.
    """
    array = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if array.ndim != 2 or min(array.shape) < 1:
        raise DimensionError(f'sinkhorn_knopp expects a non-empty [B, K] matrix, got {array.shape}')
    if n_iter < 1:
        raise ConfigError(f'sinkhorn_knopp needs n_iter >= 1, got {n_iter}')
    if temperature <= 0:
        raise ConfigError(f'sinkhorn_knopp temperature must be positive, got {temperature}')
    if not np.isfinite(array).all():
        raise NumericFault('sinkhorn_knopp: non-finite teacher scores')
    rows, prototypes = array.shape
    q = np.exp((array - array.max()) / temperature)
    q /= q.sum()
    for _ in range(n_iter):
        q /= q.sum(axis=0, keepdims=True)
        q /= prototypes
        q /= q.sum(axis=1, keepdims=True)
        q /= rows
    q *= rows
    out_dtype = scores.dtype if isinstance(scores, (Tensor, np.ndarray)) and np.issubdtype(scores.dtype, np.floating) \
        else np.float64
    return q.astype(out_dtype)


def teacher_targets(teacher_logits, temperature: float, n_iter: int = 3) -> np.ndarray:
    """Sinkhorn targets for [..., K] teacher scores, normalized jointly over every leading row."""
    array = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    flat = array.reshape(-1, array.shape[-1])
    return sinkhorn_knopp(flat, n_iter=n_iter, temperature=temperature).reshape(array.shape)


# --------------------
# Image-level and patch-level cross-entropies
# --------------------
def dino_routing(n_global: int = 2, n_local: int = 8) -> list[tuple[int, int]]:
    """
    (student view, teacher view) pairs. Student views are numbered globals
    first, then locals; teacher views are the globals. Same-view global pairs
    are excluded.
    """
    pairs = []
    for student_view in range(n_global + n_local):
        for teacher_view in range(n_global):
            if student_view != teacher_view:
                pairs.append((student_view, teacher_view))
    return pairs


def dino_loss(student_logits: Sequence[Tensor], teacher_probs: Sequence, student_temp: float = STUDENT_TEMPERATURE,
              pairs: Sequence[tuple[int, int]] | None = None) -> Tensor:
    """
    Mean soft cross-entropy over the routed (student view, teacher view) pairs.

    `student_logits[v]` is [B, K] for student view v; `teacher_probs[t]` is the
    [B, K] Sinkhorn target of teacher view t. Without `pairs`, every student
    view is matched with every teacher view except itself.
    """
    if not student_logits or not len(teacher_probs):
        raise DimensionError('dino_loss needs at least one student view and one teacher view')
    if pairs is None:
        pairs = [(s, t) for s in range(len(student_logits)) for t in range(len(teacher_probs)) if s != t]
    if not pairs:
        raise DimensionError('dino_loss: routing produced no (student, teacher) pairs')
    total = None
    for s, t in pairs:
        logits, target = student_logits[s], teacher_probs[t]
        target = target.data if isinstance(target, Tensor) else np.asarray(target)
        if logits.shape[-1] != target.shape[-1]:
            raise DimensionError(
                f'dino_loss: student head has {logits.shape[-1]} prototypes, teacher targets have {target.shape[-1]}'
            )
        term = F.cross_entropy_soft(logits, target, temperature=student_temp)
        total = term if total is None else total + term
    return total / len(pairs)


def ibot_loss(student_logits: Tensor | None, teacher_probs, positions, masks,
              student_temp: float = STUDENT_TEMPERATURE) -> tuple[Tensor, int]:
    """
    Masked-patch cross-entropy.

    `positions` ([M, 2]) lists (global crop row, patch index) for each of the M
    rows of `student_logits` / `teacher_probs`; every position must be masked
    in `masks` ([N, P] booleans). Returns (loss, M); an empty set gives 0.
    """
    masks = np.asarray(masks, dtype=bool)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    count = len(positions)
    if count == 0:
        like = student_logits if isinstance(student_logits, Tensor) else None
        return as_tensor(0.0, like), 0
    if masks.ndim != 2:
        raise DimensionError(f'ibot_loss: masks must be [N, P], got {masks.shape}')
    rows, cols = positions[:, 0], positions[:, 1]
    if rows.min() < 0 or rows.max() >= masks.shape[0] or cols.min() < 0 or cols.max() >= masks.shape[1]:
        raise DimensionError('ibot_loss: masked position outside the mask grid')
    if not masks[rows, cols].all():
        bad = positions[~masks[rows, cols]][:3].tolist()
        raise DimensionError(f'ibot_loss: positions reference unmasked tokens, e.g. {bad}')
    target = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    if student_logits.shape != target.shape or student_logits.shape[0] != count:
        raise DimensionError(
            f'ibot_loss: student {student_logits.shape}, teacher {target.shape}, {count} positions'
        )
    return F.cross_entropy_soft(student_logits, target, temperature=student_temp), count


def masked_positions(masks) -> np.ndarray:
    """[M, 2] (row, patch) coordinates of every True entry, row-major."""
    return np.argwhere(np.asarray(masks, dtype=bool)).astype(np.int64)


# --------------------
# Koleo
# --------------------
def _koleo_group(x: Tensor, eps: float) -> Tensor:
    sims = x.data @ x.data.T
    np.fill_diagonal(sims, -np.inf)
    nearest = sims.argmax(axis=1)
    distance = F.norm(x - F.gather_rows(x, nearest), axis=-1)
    return -F.mean(F.log(distance + eps))


def koleo_loss(features: Tensor, group_size: int = 16, eps: float = KOLEO_EPS) -> Tensor:
    """
    Nearest-neighbour entropy estimate over contiguous groups of `group_size`
    L2-normalized rows; a ragged last group is kept when it has >= 2 rows.
    """
    n = features.shape[0]
    if features.ndim != 2 or n < 2:
        raise DimensionError(f'koleo_loss needs an [n >= 2, d] feature matrix, got {features.shape}')
    if group_size < 2:
        raise ConfigError(f'koleo group_size must be >= 2, got {group_size}')
    x = F.l2_normalize(features, axis=-1, eps=1e-12)
    terms = []
    for start in range(0, n, group_size):
        stop = min(start + group_size, n)
        if stop - start >= 2:
            terms.append(_koleo_group(x[start:stop], eps))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / len(terms)


# --------------------
# Gram anchoring
# --------------------
def gram_loss(student_patches: Tensor, gram_patches) -> Tensor:
    """
    Squared Frobenius distance between patch Gram matrices, averaged over images.

    Both inputs are row-L2-normalized [P, d] or [B, P, d]; the Gram teacher side
    is a constant.
    """
    target = gram_patches.data if isinstance(gram_patches, Tensor) else np.asarray(gram_patches)
    if student_patches.ndim not in (2, 3) or target.ndim != student_patches.ndim:
        raise DimensionError(f'gram_loss: expected matching [P, d] or [B, P, d], got '
                             f'{student_patches.shape} and {target.shape}')
    if student_patches.shape[:-1] != target.shape[:-1]:
        raise DimensionError(
            f'gram_loss: student has {student_patches.shape[-2]} patches, Gram teacher has {target.shape[-2]}; '
            'downsample high-resolution teacher features to the student grid (highres_smooth) first'
        )
    images = student_patches.shape[0] if student_patches.ndim == 3 else 1
    target = target.astype(student_patches.dtype)
    gram_student = F.matmul(student_patches, F.swap_last(student_patches))
    gram_teacher = target @ np.swapaxes(target, -1, -2)
    diff = gram_student - as_tensor(gram_teacher, student_patches)
    return F.sum(diff * diff) / images


# --------------------
# Composite objective
# --------------------
@dataclass(frozen=True)
class LossWeights:
    dino: float = 1.0
    ibot: float = 1.0
    koleo: float = 0.1
    gram: float = 0.0

    def __post_init__(self):
        negative = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if negative:
            raise ConfigError(f'Loss weights must be >= 0: {negative}')

    @classmethod
    def pretrain(cls) -> 'LossWeights':
        return cls()

    @classmethod
    def refine(cls, gram: float = 2.0) -> 'LossWeights':
        return cls(gram=gram)


@dataclass
class LossReport:
    step: int = 0
    dino: float = 0.0
    ibot: float = 0.0
    koleo: float = 0.0
    gram: float = 0.0
    total: float = 0.0
    lr: float = 0.0
    teacher_temp: float = 0.0
    ibot_count: int = 0

    def weighted_total(self, weights: LossWeights) -> float:
        return math.fsum(getattr(weights, name) * getattr(self, name) for name in COMPONENTS)

    def as_row(self) -> list[str]:
        values = asdict(self)
        return [str(values['step'])] + [repr(float(values[name])) for name in METRIC_FIELDS[1:]]

    def as_dict(self) -> dict:
        return asdict(self)


def composite_loss(components: Mapping[str, object], weights: LossWeights, phase: str = 'pretrain',
                   gram_teacher_present: bool = False, step: int = 0) -> tuple[Tensor, LossReport]:
    """
    Weighted sum of the component losses for `phase` plus its LossReport.

    Components may be Tensors or plain numbers; zero-weight and missing terms
    are left out of the sum entirely.
    """
    if phase not in PHASES:
        raise ConfigError(f'phase must be one of {PHASES}, got {phase!r}')
    if phase == 'refine' and not gram_teacher_present:
        raise ConfigError('refine phase needs a Gram teacher (pass a source checkpoint)')
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ConfigError(f'Unknown loss components: {sorted(unknown)}')
    report = LossReport(step=step)
    like = next((v for v in components.values() if isinstance(v, Tensor)), None)
    total = None
    for name in COMPONENTS:
        value = components.get(name)
        if value is None:
            continue
        setattr(report, name, float(value.item() if isinstance(value, Tensor) else value))
        weight = getattr(weights, name)
        if weight == 0:
            continue
        term = value * weight if isinstance(value, Tensor) else as_tensor(float(value) * weight, like)
        total = term if total is None else total + term
    if total is None:
        total = as_tensor(0.0, like)
    total.check_finite('composite loss')
    report.total = float(total.item())
    return total, report
