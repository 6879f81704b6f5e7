"""
Multi-student distillation: the per-worker cost model, the worker-group
assignment that equalizes student iteration times, a simulated timeline of
one synchronized iteration, and the executable toy distillation loop.

Cost arithmetic is exact (fractions.Fraction), so conservation and
oracle comparisons hold with equality.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, DimensionError
from ..utils.param_tree import ParameterTree
from .crop_service import CropBatch
from .head_service import HeadConfig, HeadState, init_head, normalize_prototypes
from .loss_service import LossReport, LossWeights, composite_loss
from .optim_service import AdamW, OptimizerConfig, param_groups
from .training_service import (LossSettings, ScheduleConfig, TeacherTargets, compute_teacher_targets, schedule,
                               student_losses)
from .vit_service import ViTConfig, ViTState, init_vit

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 1_000_000


def _exact(value) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


@dataclass(frozen=True)
class CostModel:
    teacher_cost: Fraction
    student_costs: tuple
    batch_size: int
    workers: int
    allgather_byte_cost: Fraction = Fraction(0)
    allgather_bytes: int = 0

    @classmethod
    def build(cls, teacher_cost, student_costs: Sequence, batch_size: int, workers: int,
              allgather_byte_cost=0, allgather_bytes: int = 0) -> 'CostModel':
        return cls(_exact(teacher_cost), tuple(_exact(c) for c in student_costs), int(batch_size), int(workers),
                   _exact(allgather_byte_cost), int(allgather_bytes)).validate()

    def validate(self) -> 'CostModel':
        if not self.student_costs:
            raise ConfigError('Cost model needs at least one student')
        if self.teacher_cost <= 0 or any(c <= 0 for c in self.student_costs):
            raise ConfigError('Teacher and student costs must be positive')
        if self.batch_size <= 0 or self.workers <= 0:
            raise ConfigError('batch_size and workers must be positive')
        if self.workers < len(self.student_costs):
            raise ConfigError(f'{self.workers} workers cannot host {len(self.student_costs)} student groups')
        if self.allgather_byte_cost < 0 or self.allgather_bytes < 0:
            raise ConfigError('all-gather cost must be >= 0')
        return self

    @property
    def student_count(self) -> int:
        return len(self.student_costs)

    def total_work(self) -> Fraction:
        """B * C_T + sum_i B * C_Si, independent of any allocation."""
        return self.batch_size * self.teacher_cost + sum(self.batch_size * c for c in self.student_costs)

    def with_student(self, cost, extra_workers: int) -> 'CostModel':
        return replace(self, student_costs=self.student_costs + (_exact(cost),),
                       workers=self.workers + extra_workers).validate()


@dataclass(frozen=True)
class DistillPlan:
    allocation: tuple                   # N_Si per student
    teacher_share: Fraction             # B / N_T * C_T, every worker
    student_shares: tuple               # B / N_Si * C_Si per worker of group i
    allgather_time: Fraction
    makespan: Fraction                  # teacher share + slowest student share, all-gather excluded
    idle: tuple

    @property
    def group_times(self) -> tuple:
        return tuple(self.teacher_share + s for s in self.student_shares)

    @property
    def iteration_time(self) -> Fraction:
        """Makespan plus the all-gather barrier; equals the simulated iteration time."""
        return self.makespan + self.allgather_time


def evaluate_allocation(model: CostModel, allocation: Sequence[int]) -> DistillPlan:
    allocation = tuple(int(n) for n in allocation)
    if len(allocation) != model.student_count:
        raise ConfigError(f'Allocation {allocation} does not match {model.student_count} students')
    if any(n < 1 for n in allocation) or sum(allocation) != model.workers:
        raise ConfigError(f'Allocation {allocation} must use >= 1 worker per student and {model.workers} in total')
    b = model.batch_size
    teacher_share = Fraction(b, model.workers) * model.teacher_cost
    student_shares = tuple(Fraction(b, n) * c for n, c in zip(allocation, model.student_costs))
    slowest = max(student_shares)
    return DistillPlan(
        allocation=allocation,
        teacher_share=teacher_share,
        student_shares=student_shares,
        allgather_time=model.allgather_byte_cost * model.allgather_bytes,
        makespan=teacher_share + slowest,
        idle=tuple(slowest - s for s in student_shares),
    )


def compositions(total: int, parts: int):
    """All allocations of `total` workers to `parts` groups (each >= 1), in lexicographic order."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple(bounds[i + 1] - bounds[i] for i in range(parts))


def exhaustive_assignment(model: CostModel) -> DistillPlan:
    best = None
    for allocation in compositions(model.workers, model.student_count):
        plan = evaluate_allocation(model, allocation)
        if best is None or plan.makespan < best.makespan:
            best = plan
    return best


def _threshold_assignment(model: CostModel) -> DistillPlan:
    """
    Smallest makespan T whose minimal group sizes ceil(B C_i / T) fit in N
    workers; leftover workers go to the last student, which is the first
    optimal allocation in lexicographic order.
    """
    b, n = model.batch_size, model.workers
    candidates = sorted({Fraction(b, k) * c for c in model.student_costs for k in range(1, n + 1)})

    def needs(limit: Fraction) -> list[int]:
        return [max(1, math.ceil(b * c / limit)) for c in model.student_costs]

    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if sum(needs(candidates[mid])) <= n:
            hi = mid
        else:
            lo = mid + 1
    required = needs(candidates[lo])
    required[-1] += n - sum(required)
    return evaluate_allocation(model, required)


def plan_assignment(model: CostModel) -> DistillPlan:
    """Integer allocation minimizing the makespan; ties go to the lexicographically first allocation."""
    model.validate()
    if math.comb(model.workers - 1, model.student_count - 1) <= ENUMERATION_LIMIT:
        plan = exhaustive_assignment(model)
    else:
        plan = _threshold_assignment(model)
    logger.debug(f'Distillation plan {plan.allocation}: makespan {float(plan.makespan):.4f}')
    return plan


@dataclass(frozen=True)
class WorkerCost:
    group: int
    workers: int
    teacher_share: Fraction
    student_share: Fraction

    @property
    def total(self) -> Fraction:
        return self.teacher_share + self.student_share


def per_worker_cost(plan: DistillPlan, model: CostModel) -> list[WorkerCost]:
    return [WorkerCost(i, n, plan.teacher_share, share)
            for i, (n, share) in enumerate(zip(plan.allocation, plan.student_shares))]


def system_work(costs: Sequence[WorkerCost]) -> Fraction:
    return sum((c.total * c.workers for c in costs), Fraction(0))


@dataclass(frozen=True)
class TimelineEvent:
    group: int                          # -1 for stages shared by every worker
    stage: str
    start: Fraction
    end: Fraction


@dataclass
class Timeline:
    events: list[TimelineEvent] = field(default_factory=list)
    idle: tuple = ()
    iteration_time: Fraction = Fraction(0)


def simulate_iteration(plan: DistillPlan, model: CostModel) -> Timeline:
    """Shared teacher inference, all-gather barrier, per-group student training, synchronization barrier."""
    t_teacher = plan.teacher_share
    t_gather = t_teacher + plan.allgather_time
    events = [
        TimelineEvent(-1, 'teacher_inference', Fraction(0), t_teacher),
        TimelineEvent(-1, 'all_gather', t_teacher, t_gather),
    ]
    finish = []
    for group, share in enumerate(plan.student_shares):
        events.append(TimelineEvent(group, 'student_training', t_gather, t_gather + share))
        finish.append(t_gather + share)
    barrier = max(finish)
    events.append(TimelineEvent(-1, 'sync_barrier', barrier, barrier))
    return Timeline(events=events, idle=tuple(barrier - f for f in finish), iteration_time=barrier)


def plan_frame(plan: DistillPlan, model: CostModel, names: Sequence[str] | None = None) -> pd.DataFrame:
    names = list(names) if names else [f'student_{i}' for i in range(model.student_count)]
    return pd.DataFrame([{
        'student': names[c.group], 'workers': c.workers, 'student_cost': float(model.student_costs[c.group]),
        'teacher_share': float(c.teacher_share), 'student_share': float(c.student_share),
        'finish_time': float(c.total + plan.allgather_time), 'iteration_time': float(plan.iteration_time),
        'idle': float(plan.idle[c.group]),
    } for c in per_worker_cost(plan, model)])


def timeline_frame(timeline: Timeline) -> pd.DataFrame:
    return pd.DataFrame([{'group': e.group, 'stage': e.stage, 'start': float(e.start), 'end': float(e.end)}
                         for e in timeline.events])


# --------------------
# Roster
# --------------------
@dataclass(frozen=True)
class RosterEntry:
    name: str
    depth: int
    dim: int
    cost: float


def parse_roster(text: str) -> list[RosterEntry]:
    """One student per line: `name, depth, dim, cost`; blank lines and '#' comments are skipped."""
    entries = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        fields_ = [f.strip() for f in line.split(',')]
        if len(fields_) != 4:
            raise ConfigError(f'Roster line {number}: expected "name, depth, dim, cost", got {line!r}')
        name, depth, dim, cost = fields_
        try:
            entry = RosterEntry(name, int(depth), int(dim), float(cost))
        except ValueError as exc:
            raise ConfigError(f'Roster line {number}: {exc}') from exc
        if entry.depth < 1 or entry.dim < 1 or entry.cost <= 0:
            raise ConfigError(f'Roster line {number}: depth, dim and cost must be positive')
        entries.append(entry)
    if not entries:
        raise ConfigError('Roster is empty')
    if len({e.name for e in entries}) != len(entries):
        raise ConfigError('Roster student names must be unique')
    return entries


def load_roster(path) -> list[RosterEntry]:
    return parse_roster(Path(path).read_text(encoding='utf-8'))


def student_config(entry: RosterEntry, teacher_config: ViTConfig) -> ViTConfig:
    """Student backbone from a roster row: depth and width from the row, head_dim kept from the teacher."""
    head_dim = teacher_config.head_dim
    if entry.dim % head_dim:
        raise ConfigError(f'Student {entry.name}: dim {entry.dim} is not a multiple of head_dim {head_dim}')
    return replace(teacher_config, depth=entry.depth, embed_dim=entry.dim, head_count=entry.dim // head_dim,
                   ffn_hidden_dim=2 * entry.dim, stochastic_depth_rate=0.0).validate()


# --------------------
# Executable distillation
# --------------------
@dataclass
class StudentRun:
    name: str
    backbone: ViTState
    dino_head: HeadState
    ibot_head: HeadState
    optimizer: AdamW

    def trees(self) -> dict[str, ParameterTree]:
        return {'student': self.backbone, 'dino_head': self.dino_head, 'ibot_head': self.ibot_head}


def init_student(name: str, config: ViTConfig, teacher_head_config: HeadConfig, rng: np.random.Generator,
                 optimizer_config: OptimizerConfig | None = None) -> StudentRun:
    head_config = replace(teacher_head_config, in_dim=config.embed_dim)
    backbone = init_vit(config, rng)
    dino_head, ibot_head = init_head(head_config, rng), init_head(head_config, rng)
    trees = {'student': backbone, 'dino_head': dino_head, 'ibot_head': ibot_head}
    optimizer = AdamW(param_groups(trees, (optimizer_config or OptimizerConfig()).layerwise_decay), optimizer_config)
    return StudentRun(name, backbone, dino_head, ibot_head, optimizer)


def distill_step(teacher: ViTState, teacher_dino_head: HeadState, teacher_ibot_head: HeadState,
                 students: Sequence[StudentRun], batch: CropBatch, schedule_config: ScheduleConfig, step: int,
                 settings: LossSettings | None = None, jitter_scale: float | None = None
                 ) -> tuple[dict[str, LossReport], TeacherTargets]:
    """
    Teacher targets are computed once and shared; each student takes one
    AdamW step on DINO + iBOT + Koleo (no Gram term, no EMA).
    """
    settings = settings or LossSettings(weights=LossWeights(gram=0.0))
    if settings.weights.gram:
        raise ConfigError('Distillation does not use Gram anchoring; set w_gram = 0')
    values = schedule(step, schedule_config)
    targets = compute_teacher_targets(teacher, teacher_dino_head, teacher_ibot_head, batch,
                                      values.teacher_temp, settings.sinkhorn_iters)
    targets.dino.setflags(write=False)
    targets.ibot.setflags(write=False)
    reports = {}
    for student in students:
        if student.dino_head.config.prototype_count != teacher_dino_head.config.prototype_count or \
                student.ibot_head.config.prototype_count != teacher_ibot_head.config.prototype_count:
            raise DimensionError(
                f'Student {student.name}: head prototypes do not match the teacher '
                f'({student.dino_head.config.prototype_count} vs {teacher_dino_head.config.prototype_count})'
            )
        components, count, _ = student_losses(student.backbone, student.dino_head, student.ibot_head, batch,
                                              targets, settings, jitter_scale)
        total, report = composite_loss(components, settings.weights, 'pretrain', step=step)
        student.optimizer.zero_grad()
        total.backward()
        student.optimizer.step(values.lr, values.weight_decay)
        normalize_prototypes(student.dino_head)
        normalize_prototypes(student.ibot_head)
        report.lr, report.teacher_temp, report.ibot_count = values.lr, values.teacher_temp, count
        reports[student.name] = report
    return reports, targets

