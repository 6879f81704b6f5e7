"""
Training orchestration: schedules, EMA teacher, the data-mix sampler, the
pre-training and Gram-anchored refinement steps, and the Trainer that runs
pretrain / refine / hires-adapt phases with per-step seed streams and
checkpoint state for bitwise resume.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from ..exceptions import ConfigError, DimensionError, LineageError, NumericFault
from ..utils import functional as F
from ..utils.param_tree import ParameterTree
from ..utils.rope import sample_jitter_scale
from ..utils.seeding import derive_rng
from ..utils.tensor import no_grad
from ..utils.tensor_io import tensor_to_text, text_to_tensor
from .crop_service import (CropBatch, CropConfig, adaptation_config, build_crop_batch, draw_resolution_triple,
                           scaled_triples)
from .dataset_service import DatasetConfig, SyntheticShapes
from .diagnostics_service import highres_smooth
from .head_service import (HeadConfig, HeadState, head_config_from_arrays, head_forward, init_head,
                           normalize_prototypes)
from .loss_service import (LossReport, LossWeights, composite_loss, dino_loss, dino_routing, gram_loss, ibot_loss,
                           koleo_loss, masked_positions, sinkhorn_knopp, teacher_targets)
from .optim_service import AdamW, OptimizerConfig, param_groups
from .vit_service import ViTConfig, ViTState, forward, init_vit

logger = logging.getLogger(__name__)

# Iteration constants at full scale; the run config divides them by `scale`
FULL_WARMUP_STEPS = 100_000
FULL_REFRESH_INTERVAL = 10_000
FULL_TOTAL_STEPS = 1_000_000
GRAM_SOURCE_FRACTION = 0.2
PHASES = ('pretrain', 'refine', 'adapt')


# --------------------
# Schedules
# --------------------
@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 4e-4
    warmup_steps: int = FULL_WARMUP_STEPS // 100
    weight_decay: float = 0.04
    layerwise_decay: float = 0.98
    ema_momentum: float = 0.999
    total_steps: int = FULL_TOTAL_STEPS // 100
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07

    def validate(self) -> 'ScheduleConfig':
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f'warmup_steps ({self.warmup_steps}) must lie in [0, total_steps={self.total_steps}]')
        if not 0 < self.ema_momentum < 1:
            raise ConfigError(f'ema_momentum must be in (0, 1), got {self.ema_momentum}')
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError('base_lr and weight_decay must be >= 0')
        return self

    @classmethod
    def scaled(cls, scale: int = 100, **overrides) -> 'ScheduleConfig':
        if scale < 1:
            raise ConfigError(f'scale must be >= 1, got {scale}')
        values = {'warmup_steps': FULL_WARMUP_STEPS // scale, 'total_steps': FULL_TOTAL_STEPS // scale}
        values.update(overrides)
        return cls(**values).validate()


@dataclass(frozen=True)
class ScheduleValues:
    lr: float
    teacher_temp: float
    weight_decay: float
    momentum: float


def schedule(step: int, config: ScheduleConfig) -> ScheduleValues:
    """Linear warmup of lr and teacher temperature, constant afterwards; wd and EMA momentum constant."""
    ramp = 1.0 if config.warmup_steps == 0 else min(max(step, 0) / config.warmup_steps, 1.0)
    return ScheduleValues(
        lr=config.base_lr * ramp,
        teacher_temp=config.teacher_temp_start + (config.teacher_temp_end - config.teacher_temp_start) * ramp,
        weight_decay=config.weight_decay,
        momentum=config.ema_momentum,
    )


def layer_lr(lr: float, layer_id: int, depth: int, decay: float) -> float:
    return lr * decay ** (depth - layer_id)


def ema_update(teacher: ParameterTree, student: ParameterTree, momentum: float) -> ParameterTree:
    """theta_T <- m * theta_T + (1 - m) * theta_S, in place."""
    if not 0 <= momentum <= 1:
        raise ConfigError(f'EMA momentum must be in [0, 1], got {momentum}')
    if not teacher.same_structure(student):
        raise DimensionError('EMA update: teacher and student parameter trees differ')
    for name, t in teacher.named_parameters():
        s = student.params[name]
        t.data = (momentum * t.data + (1.0 - momentum) * s.data).astype(t.dtype)
    return teacher


# --------------------
# Gram teacher policy
# --------------------
@dataclass(frozen=True)
class GramTeacherPolicy:
    source_checkpoint_step: int | None = None
    refresh_interval: int = FULL_REFRESH_INTERVAL // 100
    max_refreshes: int = 3
    highres_factor: int = 2
    enabled: bool = True

    def validate(self) -> 'GramTeacherPolicy':
        if self.highres_factor < 1:
            raise ConfigError(f'highres_factor must be >= 1, got {self.highres_factor}')
        if self.max_refreshes < 0 or self.refresh_interval < 0:
            raise ConfigError('max_refreshes and refresh_interval must be >= 0')
        return self

    def refresh_due(self, phase_step: int, refreshes: int) -> bool:
        """True after completing phase step `phase_step` (0-based) when a refresh is allowed."""
        return (self.enabled and self.refresh_interval > 0 and refreshes < self.max_refreshes
                and (phase_step + 1) % self.refresh_interval == 0)


def default_gram_source_step(pretrain_steps: int) -> int:
    return int(round(GRAM_SOURCE_FRACTION * pretrain_steps))


@dataclass
class GramTeacherState:
    state: ViTState | None = None
    refreshes: int = 0

    def refresh_from(self, teacher: ViTState) -> None:
        self.state = teacher.copy(requires_grad=False)
        self.refreshes += 1


# --------------------
# Data mixing
# --------------------
@dataclass
class MixSamplerConfig:
    p_homogeneous: float = 0.1
    homogeneous_part: str = 'curated'
    weights: dict[str, float] = field(default_factory=dict)

    def validate(self) -> 'MixSamplerConfig':
        if not 0 <= self.p_homogeneous <= 1:
            raise ConfigError(f'p_homogeneous must be in [0, 1], got {self.p_homogeneous}')
        if self.weights:
            if any(w < 0 for w in self.weights.values()):
                raise ConfigError('mix weights must be >= 0')
            if abs(sum(self.weights.values()) - 1.0) > 1e-6:
                raise ConfigError(f'mix weights must sum to 1, got {sum(self.weights.values())}')
        return self

    def resolved_weights(self, parts: Mapping[str, np.ndarray]) -> dict[str, float]:
        if self.weights:
            unknown = set(self.weights) - set(parts)
            if unknown:
                raise ConfigError(f'mix weights reference unknown parts: {sorted(unknown)}')
            return dict(self.weights)
        others = [name for name in parts if name != self.homogeneous_part]
        return {name: 1.0 / len(others) for name in others}


@dataclass
class BatchDescriptor:
    homogeneous: bool
    parts: list[str]
    indices: np.ndarray


def _draw_from_part(parts: Mapping[str, np.ndarray], name: str, count: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.asarray(parts.get(name, ()), dtype=np.int64)
    if pool.size == 0:
        raise ConfigError(f'Data part {name!r} is empty or missing')
    return rng.choice(pool, size=count, replace=pool.size < count)


def next_batch(sampler: MixSamplerConfig, parts: Mapping[str, np.ndarray], batch_size: int,
               rng: np.random.Generator) -> BatchDescriptor:
    """
    Homogeneous batch from the designated part with probability p_homogeneous,
    otherwise a per-sample weighted mixture of the remaining parts.
    """
    if not parts:
        raise ConfigError('next_batch needs at least one data part')
    sampler.validate()
    if rng.random() < sampler.p_homogeneous:
        indices = _draw_from_part(parts, sampler.homogeneous_part, batch_size, rng)
        return BatchDescriptor(True, [sampler.homogeneous_part] * batch_size, indices)
    weights = sampler.resolved_weights(parts)
    if not weights:
        raise ConfigError('heterogeneous batch requested but no non-homogeneous parts exist')
    names = list(weights)
    probabilities = np.array([weights[n] for n in names], dtype=np.float64)
    choices = rng.choice(len(names), size=batch_size, p=probabilities / probabilities.sum())
    indices = np.empty(batch_size, dtype=np.int64)
    for slot, choice in enumerate(choices):
        indices[slot] = _draw_from_part(parts, names[choice], 1, rng)[0]
    return BatchDescriptor(False, [names[c] for c in choices], indices)


# --------------------
# Models and steps
# --------------------
@dataclass
class SSLModels:
    student: ViTState
    teacher: ViTState
    dino_head: HeadState
    ibot_head: HeadState
    teacher_dino_head: HeadState
    teacher_ibot_head: HeadState

    def trainable_trees(self) -> dict[str, ParameterTree]:
        return {'student': self.student, 'dino_head': self.dino_head, 'ibot_head': self.ibot_head}

    def all_trees(self) -> dict[str, ParameterTree]:
        return dict(self.trainable_trees(), teacher=self.teacher, teacher_dino_head=self.teacher_dino_head,
                    teacher_ibot_head=self.teacher_ibot_head)


def init_models(vit_config: ViTConfig, head_config: HeadConfig, rng: np.random.Generator) -> SSLModels:
    student = init_vit(vit_config, rng)
    head_config = replace(head_config, in_dim=vit_config.embed_dim)
    dino_head = init_head(head_config, rng)
    ibot_head = init_head(head_config, rng)
    return SSLModels(
        student=student,
        teacher=student.copy(requires_grad=False),
        dino_head=dino_head,
        ibot_head=ibot_head,
        teacher_dino_head=dino_head.copy(requires_grad=False),
        teacher_ibot_head=ibot_head.copy(requires_grad=False),
    )


@dataclass(frozen=True)
class LossSettings:
    weights: LossWeights = field(default_factory=LossWeights.pretrain)
    student_temp: float = 0.1
    sinkhorn_iters: int = 3
    koleo_group_size: int = 16


@dataclass
class TeacherTargets:
    """Teacher-side targets of one batch; computed once, shared by every consumer."""
    dino: np.ndarray                    # [2, B, K]
    ibot: np.ndarray                    # [M, K]
    positions: np.ndarray               # [M, 2] (global crop row, patch)
    masks: np.ndarray                   # [2B, P]


def compute_teacher_targets(backbone: ViTState, dino_head: HeadState, ibot_head: HeadState, batch: CropBatch,
                            teacher_temp: float, sinkhorn_iters: int = 3) -> TeacherTargets:
    n_views, b = batch.global_crops.shape[:2]
    images = batch.global_crops.reshape(n_views * b, *batch.global_crops.shape[2:])
    masks = batch.masks.reshape(n_views * b, -1)
    positions = masked_positions(masks)
    with no_grad():
        out = forward(backbone, images, crop_kind='global')
        cls_logits = head_forward(dino_head, out.cls).data
        dino = teacher_targets(cls_logits.reshape(n_views, b, -1), teacher_temp, sinkhorn_iters)
        if len(positions):
            patch_tokens = out.patches[(positions[:, 0], positions[:, 1])]
            patch_logits = head_forward(ibot_head, patch_tokens).data
            ibot = sinkhorn_knopp(patch_logits, n_iter=sinkhorn_iters, temperature=teacher_temp)
        else:
            ibot = np.zeros((0, ibot_head.config.prototype_count), dtype=cls_logits.dtype)
    return TeacherTargets(dino=dino, ibot=ibot, positions=positions, masks=masks)


def student_losses(student: ViTState, dino_head: HeadState, ibot_head: HeadState, batch: CropBatch,
                   targets: TeacherTargets, settings: LossSettings, jitter_scale: float | None = None,
                   drop_rng: np.random.Generator | None = None):
    """DINO, iBOT and Koleo terms of the student against fixed teacher targets; also returns the global output."""
    n_views, b = batch.global_crops.shape[:2]
    if targets.dino.shape[-1] != dino_head.config.prototype_count:
        raise DimensionError(
            f'Teacher targets have {targets.dino.shape[-1]} prototypes, student DINO head has '
            f'{dino_head.config.prototype_count}'
        )
    global_images = batch.global_crops.reshape(n_views * b, *batch.global_crops.shape[2:])
    s_global = forward(student, global_images, crop_kind='global', mask=targets.masks,
                       jitter_scale=jitter_scale, drop_rng=drop_rng)
    global_logits = head_forward(dino_head, s_global.cls)
    views = [global_logits[v * b:(v + 1) * b] for v in range(n_views)]
    n_local = batch.n_local
    if n_local:
        local_images = batch.local_crops.reshape(n_local * b, *batch.local_crops.shape[2:])
        s_local = forward(student, local_images, crop_kind='local', jitter_scale=jitter_scale, drop_rng=drop_rng)
        local_logits = head_forward(dino_head, s_local.cls)
        views += [local_logits[i * b:(i + 1) * b] for i in range(n_local)]
    dino = dino_loss(views, list(targets.dino), settings.student_temp, pairs=dino_routing(n_views, n_local))

    positions = targets.positions
    if len(positions):
        if targets.ibot.shape[-1] != ibot_head.config.prototype_count:
            raise DimensionError('Teacher iBOT targets and student iBOT head disagree on prototype count')
        student_patch_logits = head_forward(ibot_head, s_global.patches[(positions[:, 0], positions[:, 1])])
    else:
        student_patch_logits = None
    ibot, count = ibot_loss(student_patch_logits, targets.ibot, positions, targets.masks,
                            student_temp=settings.student_temp)
    if b >= 2:
        koleo = koleo_loss(s_global.cls[0:b], group_size=settings.koleo_group_size)
    else:
        koleo = None
    components = {'dino': dino, 'ibot': ibot}
    if koleo is not None:
        components['koleo'] = koleo
    return components, count, s_global


def gram_teacher_features(gram_teacher: ViTState, batch: CropBatch, student_grid: tuple[int, int]) -> np.ndarray:
    """Unmasked Gram-teacher patches, bicubic-smoothed to the student grid and row-normalized: [2B, P, d]."""
    images = batch.gram_crops if batch.gram_crops is not None else batch.global_crops
    flat = images.reshape(-1, *images.shape[2:])
    with no_grad():
        out = forward(gram_teacher, flat, crop_kind='global')
    gh, gw = out.grid
    features = out.patches.data.reshape(len(flat), gh, gw, -1)
    smoothed = highres_smooth(features, target_grid=student_grid)
    return smoothed.reshape(len(flat), student_grid[0] * student_grid[1], -1)


def _apply_update(models: SSLModels, optimizer: AdamW, total, values: ScheduleValues) -> float:
    optimizer.zero_grad()
    total.backward()
    grad_norm = optimizer.step(values.lr, values.weight_decay)
    normalize_prototypes(models.dino_head)
    normalize_prototypes(models.ibot_head)
    if not models.student.is_finite():
        raise NumericFault('Student parameters became non-finite after the update')
    ema_update(models.teacher, models.student, values.momentum)
    ema_update(models.teacher_dino_head, models.dino_head, values.momentum)
    ema_update(models.teacher_ibot_head, models.ibot_head, values.momentum)
    return grad_norm


def pretrain_step(models: SSLModels, optimizer: AdamW, batch: CropBatch, schedule_config: ScheduleConfig,
                  step: int, settings: LossSettings | None = None, jitter_scale: float | None = None,
                  drop_rng: np.random.Generator | None = None) -> LossReport:
    if step < 0:
        raise ConfigError(f'step must be >= 0, got {step}')
    settings = settings or LossSettings()
    values = schedule(step, schedule_config)
    targets = compute_teacher_targets(models.teacher, models.teacher_dino_head, models.teacher_ibot_head, batch,
                                      values.teacher_temp, settings.sinkhorn_iters)
    components, count, _ = student_losses(models.student, models.dino_head, models.ibot_head, batch, targets,
                                          settings, jitter_scale, drop_rng)
    total, report = composite_loss(components, settings.weights, 'pretrain', step=step)
    _apply_update(models, optimizer, total, values)
    report.lr, report.teacher_temp, report.ibot_count = values.lr, values.teacher_temp, count
    return report


def refine_step(models: SSLModels, gram: GramTeacherState, optimizer: AdamW, batch: CropBatch,
                schedule_config: ScheduleConfig, step: int, settings: LossSettings, policy: GramTeacherPolicy,
                phase_step: int = 0, jitter_scale: float | None = None,
                drop_rng: np.random.Generator | None = None) -> LossReport:
    """pretrain_step plus Gram anchoring on the global crops; refreshes the Gram teacher per `policy`."""
    if gram.state is None:
        raise ConfigError('refine_step needs a loaded Gram teacher')
    values = schedule(step, schedule_config)
    targets = compute_teacher_targets(models.teacher, models.teacher_dino_head, models.teacher_ibot_head, batch,
                                      values.teacher_temp, settings.sinkhorn_iters)
    components, count, s_global = student_losses(models.student, models.dino_head, models.ibot_head, batch,
                                                  targets, settings, jitter_scale, drop_rng)
    gram_targets = gram_teacher_features(gram.state, batch, s_global.grid)
    student_patches = F.l2_normalize(s_global.patches, axis=-1)
    components['gram'] = gram_loss(student_patches, gram_targets)
    total, report = composite_loss(components, settings.weights, 'refine', gram_teacher_present=True, step=step)
    _apply_update(models, optimizer, total, values)
    if policy.refresh_due(phase_step, gram.refreshes):
        gram.refresh_from(models.teacher)
        logger.info(f'Gram teacher refreshed from the EMA teacher at step {step} ({gram.refreshes} refreshes)')
    report.lr, report.teacher_temp, report.ibot_count = values.lr, values.teacher_temp, count
    return report


# --------------------
# Run-config translation
# --------------------
def _pairs(text: str) -> dict[str, float]:
    weights = {}
    for item in filter(None, (p.strip() for p in str(text).split(','))):
        name, _, value = item.partition(':')
        weights[name.strip()] = float(value)
    return weights


def vit_config_from(options: Mapping) -> ViTConfig:
    return ViTConfig(
        depth=options['depth'], embed_dim=options['embed_dim'], ffn_hidden_dim=options['ffn_hidden_dim'],
        head_count=options['head_count'], head_dim=options['head_dim'], patch_size=options['patch_size'],
        register_count=options['register_count'],
        rope_jitter_range=(options['rope_jitter_min'], options['rope_jitter_max']),
        outlier_strategy=options['outlier_strategy'], stochastic_depth_rate=options['stochastic_depth_rate'],
        separate_output_norms=options['separate_output_norms'],
    ).validate()


def head_config_from(options: Mapping) -> HeadConfig:
    return HeadConfig(
        in_dim=options['embed_dim'], hidden_dim=options['head_hidden_dim'],
        bottleneck_dim=options['head_bottleneck_dim'], prototype_count=options['prototype_count'],
        layer_count=options['head_layers'],
    ).validate()


def schedule_config_from(options: Mapping) -> ScheduleConfig:
    scale = options['scale']
    overrides = {
        'base_lr': options['base_lr'], 'weight_decay': options['weight_decay'],
        'layerwise_decay': options['layerwise_decay'], 'ema_momentum': options['ema_momentum'],
        'teacher_temp_start': options['teacher_temp_start'], 'teacher_temp_end': options['teacher_temp_end'],
    }
    if options['warmup_steps'] >= 0:
        overrides['warmup_steps'] = options['warmup_steps']
    if options['total_steps'] >= 0:
        overrides['total_steps'] = options['total_steps']
    return ScheduleConfig.scaled(scale, **overrides)


def crop_config_from(options: Mapping) -> CropConfig:
    return CropConfig(
        global_size=options['global_size'], local_size=options['local_size'], n_local=options['n_local'],
        mask_probability=options['mask_probability'],
        mask_ratio=(options['mask_ratio_min'], options['mask_ratio_max']), patch_size=options['patch_size'],
    ).validate()


def gram_policy_from(options: Mapping) -> GramTeacherPolicy:
    interval = options['gram_refresh_interval'] or FULL_REFRESH_INTERVAL // options['scale']
    return GramTeacherPolicy(
        source_checkpoint_step=options['gram_source_step'] if options['gram_source_step'] >= 0 else None,
        refresh_interval=interval, max_refreshes=options['gram_max_refreshes'],
        highres_factor=options['gram_highres_factor'],
    ).validate()


def loss_settings_from(options: Mapping, phase: str) -> LossSettings:
    gram_weight = options['w_gram'] if phase in ('refine', 'adapt') else 0.0
    return LossSettings(
        weights=LossWeights(dino=options['w_dino'], ibot=options['w_ibot'], koleo=options['w_koleo'],
                            gram=gram_weight),
        student_temp=options['student_temp'], sinkhorn_iters=options['sinkhorn_iters'],
        koleo_group_size=options['koleo_group_size'],
    )


def read_index_file(path) -> np.ndarray:
    with open(path, encoding='utf-8') as handle:
        return np.array([int(line) for line in handle if line.strip()], dtype=np.int64)


# --------------------
# Batches
# --------------------
class BatchSource:
    """
    Step-indexed crop batches over the synthetic dataset: step `s` always
    yields the same batch for the same seed, whatever ran before it.
    """

    def __init__(self, options: Mapping, phase: str = 'pretrain'):
        self.phase = phase
        self.seed = int(options['seed'])
        self.crop_config = crop_config_from(options)
        self.policy = gram_policy_from(options)
        self.batch_size = int(options['batch_size'])
        self.triples = scaled_triples(options['adapt_toy_factor'], options['patch_size'])
        image_size = options['image_size']
        if phase == 'adapt':
            image_size = max(image_size, max(sizes[0] for sizes, _ in self.triples))
        self.dataset = SyntheticShapes(DatasetConfig(image_size=image_size, length=options['dataset_size']),
                                       seed=self.seed)
        self.parts = self._build_parts(options)
        self.sampler = MixSamplerConfig(
            p_homogeneous=options['p_homogeneous'], homogeneous_part=options['homogeneous_part'],
            weights=_pairs(options['part_weights']),
        ).validate()

    def _build_parts(self, options: Mapping) -> dict[str, np.ndarray]:
        parts = self.dataset.shape_count_parts()
        curated = options.get('curated_index') or ''
        if curated:
            indices = read_index_file(curated)
            parts[options['homogeneous_part']] = indices[indices < len(self.dataset)]
        else:
            parts.setdefault(options['homogeneous_part'], np.arange(len(self.dataset)))
        return parts

    def make_batch(self, step: int) -> CropBatch:
        descriptor = next_batch(self.sampler, self.parts, self.batch_size, derive_rng(self.seed, 'sampler', step))
        crop_config = self.crop_config
        if self.phase == 'adapt':
            crop_config = adaptation_config(crop_config, draw_resolution_triple(
                derive_rng(self.seed, 'triples', step), self.triples))
        elif self.phase == 'refine' and self.policy.highres_factor > 1:
            crop_config = replace(crop_config, gram_size=crop_config.global_size * self.policy.highres_factor)
        images = self.dataset.images(descriptor.indices)
        return build_crop_batch(images, descriptor.indices, crop_config, derive_rng(self.seed, 'crops', step),
                                mask_rng=derive_rng(self.seed, 'masks', step))


# --------------------
# Trainer
# --------------------
class Trainer:
    """
    One training phase over the synthetic dataset.

    Every random draw of step `s` comes from streams derived from
    (seed, consumer, s), so a run resumed from a checkpoint at step j replays
    steps j.. exactly as an uninterrupted run would.
    """

    def __init__(self, options: Mapping, phase: str = 'pretrain'):
        if phase not in PHASES:
            raise ConfigError(f'phase must be one of {PHASES}, got {phase!r}')
        self.options = dict(options)
        self.phase = phase
        self.seed = int(options['seed'])
        self.vit_config = vit_config_from(options)
        self.head_config = head_config_from(options)
        self.schedule_config = schedule_config_from(options)
        self.settings = loss_settings_from(options, phase)
        self.policy = gram_policy_from(options)
        self.batches = BatchSource(options, phase)
        self.models = init_models(self.vit_config, self.head_config, derive_rng(self.seed, 'init'))
        self.optimizer = AdamW(
            param_groups(self.models.trainable_trees(), self.schedule_config.layerwise_decay),
            OptimizerConfig(weight_decay=self.schedule_config.weight_decay,
                            layerwise_decay=self.schedule_config.layerwise_decay,
                            clip_grad=options['clip_grad']),
        )
        self.gram = GramTeacherState()
        self.step = 0
        self.phase_step = 0
        self.has_parent = False

    @property
    def dataset(self) -> SyntheticShapes:
        return self.batches.dataset

    # ---- lineage ----
    def load_parent(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Continue from a previous phase's checkpoint (weights, teacher, heads, optimizer, global step)."""
        vit_text = tensor_to_text(arrays['meta.vit_config'])
        parent_config = ViTConfig.from_text(vit_text)
        if parent_config != self.vit_config:
            raise LineageError('Parent checkpoint was trained with a different backbone config')
        self._load_trees(arrays)
        if any(key.startswith('optim.') for key in arrays):
            self.optimizer.load_state_arrays(arrays)
        self.step = int(arrays['meta.step'][0])
        self.has_parent = True

    def load_gram_teacher(self, arrays: Mapping[str, np.ndarray], tree: str = 'teacher') -> None:
        state = self.models.teacher.copy(requires_grad=False)
        state.load_arrays(subtree(arrays, tree))
        self.gram = GramTeacherState(state=state, refreshes=0)

    def _load_trees(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, tree in self.models.all_trees().items():
            tree.load_arrays(subtree(arrays, name))

    # ---- stepping ----
    def make_batch(self, step: int) -> CropBatch:
        return self.batches.make_batch(step)

    def train_step(self) -> LossReport:
        step = self.step
        batch = self.make_batch(step)
        s_min, s_max = self.vit_config.rope_jitter_range
        jitter = sample_jitter_scale(derive_rng(self.seed, 'jitter', step), s_min, s_max)
        drop_rng = derive_rng(self.seed, 'drop', step) if self.vit_config.stochastic_depth_rate > 0 else None
        if self.phase == 'pretrain':
            report = pretrain_step(self.models, self.optimizer, batch, self.schedule_config, step, self.settings,
                                   jitter, drop_rng)
        else:
            report = refine_step(self.models, self.gram, self.optimizer, batch, self.schedule_config, step,
                                 self.settings, self.policy, self.phase_step, jitter, drop_rng)
        self.step += 1
        self.phase_step += 1
        return report

    def run(self, steps: int, on_report: Callable[[LossReport], None] | None = None,
            checkpoint_every: int = 0, on_checkpoint: Callable[['Trainer'], None] | None = None,
            log_every: int = 10) -> list[LossReport]:
        if self.phase != 'pretrain':
            if not self.has_parent:
                raise LineageError(f'{self.phase} must continue from a source checkpoint')
            if self.gram.state is None:
                raise LineageError(f'{self.phase} needs a Gram teacher checkpoint')
        reports = []
        while self.phase_step < steps:
            report = self.train_step()
            reports.append(report)
            if on_report:
                on_report(report)
            if log_every and self.phase_step % log_every == 0:
                logger.info(
                    f'[{self.phase}] step {report.step}: total={report.total:.4f} dino={report.dino:.4f} '
                    f'ibot={report.ibot:.4f} koleo={report.koleo:.4f} gram={report.gram:.4f} lr={report.lr:.2e}'
                )
            if checkpoint_every and on_checkpoint and self.phase_step % checkpoint_every == 0:
                on_checkpoint(self)
        return reports

    # ---- checkpoint state ----
    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            'meta.step': np.array([self.step], dtype=np.int64),
            'meta.phase_step': np.array([self.phase_step], dtype=np.int64),
            'meta.gram_refreshes': np.array([self.gram.refreshes], dtype=np.int64),
            'meta.vit_config': text_to_tensor(self.vit_config.to_text()),
        }
        for name, tree in self.models.all_trees().items():
            arrays.update({f'{name}.{k}': v for k, v in tree.arrays().items()})
        if self.gram.state is not None:
            arrays.update({f'gram_teacher.{k}': v for k, v in self.gram.state.arrays().items()})
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def restore(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Resume this same phase from one of its own checkpoints."""
        self._load_trees(arrays)
        self.optimizer.load_state_arrays(arrays)
        self.step = int(arrays['meta.step'][0])
        self.phase_step = int(arrays['meta.phase_step'][0])
        if any(key.startswith('gram_teacher.') for key in arrays):
            state = self.models.teacher.copy(requires_grad=False)
            state.load_arrays(subtree(arrays, 'gram_teacher'))
            self.gram = GramTeacherState(state=state, refreshes=int(arrays['meta.gram_refreshes'][0]))
        self.has_parent = self.has_parent or self.phase != 'pretrain'


def subtree(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    start = prefix + '.'
    return {key[len(start):]: value for key, value in arrays.items() if key.startswith(start)}


def load_backbone(arrays: Mapping[str, np.ndarray], tree: str = 'teacher') -> ViTState:
    """Backbone weights out of a checkpoint (the EMA teacher by default) with its stored config."""
    config = ViTConfig.from_text(tensor_to_text(arrays['meta.vit_config']))
    state = init_vit(config, np.random.default_rng(0))
    state.load_arrays(subtree(arrays, tree))
    return state


def load_head(arrays: Mapping[str, np.ndarray], tree: str = 'teacher_dino_head') -> HeadState:
    head_arrays = subtree(arrays, tree)
    head = init_head(head_config_from_arrays(head_arrays), np.random.default_rng(0))
    head.load_arrays(head_arrays)
    return head
