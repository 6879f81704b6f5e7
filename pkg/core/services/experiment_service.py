"""
Collapse-and-repair experiment: pre-train long enough for dense features to
lose locality, then refine with Gram anchoring against an early checkpoint at
Gram-teacher resolution factors 1 and 2, across several seeds.

The distillation experiment reuses the same pre-trained teacher: each roster
student is distilled from it and, separately, pre-trained from scratch for the
same number of steps, and the two are compared by kNN accuracy.

Every stage goes through `run_service.run`, so each arm leaves an ordinary
run directory behind and re-running the experiment resumes finished arms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, DinoLabError
from . import run_service
from .distill_service import RosterEntry

logger = logging.getLogger(__name__)

COLLAPSE_MIN_DROP = 0.10
REPAIR_FRACTION = 0.95
KNN_TOLERANCE = 0.01
HIGHRES_FACTORS = (1, 2)


class ExperimentError(DinoLabError):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass
class ExperimentPlan:
    seeds: Sequence[int] = (0, 1, 2)
    pretrain_steps: int = 2000
    refine_steps: int = 200
    checkpoints: int = 5
    factors: Sequence[int] = HIGHRES_FACTORS
    w_gram: float = 2.0
    distill_steps: int = 200

    def pretrain_overrides(self) -> dict:
        every = max(self.pretrain_steps // self.checkpoints, 1)
        return {'steps': self.pretrain_steps, 'checkpoint_every': every}


def _checked(stage: str, result: run_service.RunResult) -> run_service.RunResult:
    if not result.ok:
        raise ExperimentError(f'{stage} failed (exit {result.exit_code}): {result.error}', result.exit_code)
    return result


def _monitor_at(run_dir: run_service.RunDirectory, step: int) -> pd.Series:
    rows = run_dir.read_rows('monitor')
    match = rows[rows['step'] == step]
    if match.empty:
        raise ExperimentError(f'{run_dir.path} has no monitor row at step {step}')
    return match.iloc[-1]


def _knn(checkpoint: str, base: Mapping, seed: int, tree: str = 'teacher') -> float:
    overrides = {**base, 'from_checkpoint': checkpoint, 'probe_dense': False, 'diag_tree': tree}
    result = _checked('probe', run_service.run('probe', overrides=overrides, seed=seed, resume=True))
    return float(result.summary['knn'])


def run_seed(seed: int, plan: ExperimentPlan, base: Mapping | None = None) -> dict:
    """One seed: pretrain, read the early/final monitor rows, refine per factor, probe kNN."""
    base = dict(base or {})
    pre = _checked('pretrain', run_service.run('pretrain', overrides={**base, **plan.pretrain_overrides()},
                                               seed=seed, resume=True))
    pre_dir = run_service.RunDirectory(pre.run_dir)
    early_path = run_service.default_gram_checkpoint(pre_dir.path, pre.manifest, {'gram_source_step': -1})
    early_step = int(early_path.stem.split('_')[-1])
    final_step = int(pre.manifest['end_step'])
    early, final = _monitor_at(pre_dir, early_step), _monitor_at(pre_dir, final_step)
    row = {
        'seed': seed,
        'early_step': early_step,
        'final_step': final_step,
        'early_cosine': float(early['cls_patch_cosine']),
        'final_cosine': float(final['cls_patch_cosine']),
        'early_locality': float(early['locality']),
        'final_locality': float(final['locality']),
        'knn_pretrain': _knn(pre.manifest['checkpoint'], base, seed),
    }
    for factor in plan.factors:
        overrides = {
            **base,
            'from_checkpoint': pre.manifest['checkpoint'],
            'gram_checkpoint': str(early_path),
            'gram_highres_factor': factor,
            'w_gram': plan.w_gram,
            'steps': plan.refine_steps,
            'checkpoint_every': plan.refine_steps,
        }
        ref = _checked(f'refine x{factor}', run_service.run('refine', overrides=overrides, seed=seed, resume=True))
        ref_dir = run_service.RunDirectory(ref.run_dir)
        refined = _monitor_at(ref_dir, int(ref.manifest['end_step']))
        row[f'refined_locality_x{factor}'] = float(refined['locality'])
        row[f'refined_cosine_x{factor}'] = float(refined['cls_patch_cosine'])
        row[f'knn_refine_x{factor}'] = _knn(ref.manifest['checkpoint'], base, seed)
    logger.info(f'collapse experiment seed {seed}: {row}')
    return row


def evaluate(frame: pd.DataFrame, factors: Sequence[int] = HIGHRES_FACTORS) -> dict:
    """Per-clause pass counts over seeds plus the high-resolution median comparison."""
    top = max(factors)
    collapsed = ((frame['final_cosine'] > frame['early_cosine'])
                 & (frame['final_locality'] <= (1 - COLLAPSE_MIN_DROP) * frame['early_locality']))
    repaired = frame[f'refined_locality_x{top}'] >= REPAIR_FRACTION * frame['early_locality']
    knn_kept = frame[f'knn_refine_x{top}'] >= frame['knn_pretrain'] - KNN_TOLERANCE
    majority = len(frame) // 2 + 1
    verdict = {
        'seeds': len(frame),
        'collapsed': int(collapsed.sum()),
        'repaired': int(repaired.sum()),
        'knn_kept': int(knn_kept.sum()),
    }
    verdict['passed'] = all(verdict[key] >= majority for key in ('collapsed', 'repaired', 'knn_kept'))
    if len(factors) > 1:
        low = min(factors)
        medians = {f: float(np.median(frame[f'refined_locality_x{f}'])) for f in factors}
        verdict['median_locality'] = medians
        verdict['highres_not_worse'] = medians[top] >= medians[low]
    return verdict


def collapse_experiment(plan: ExperimentPlan | None = None, base: Mapping | None = None) -> tuple[pd.DataFrame, dict]:
    plan = plan or ExperimentPlan()
    frame = pd.DataFrame([run_seed(seed, plan, base) for seed in plan.seeds])
    return frame, evaluate(frame, plan.factors)


# --------------------
# Distillation against equal-budget pre-training
# --------------------
def scratch_overrides(entry: RosterEntry, head_dim: int) -> dict:
    """Run-config overrides that pre-train the roster student's architecture from scratch."""
    if entry.dim % head_dim:
        raise ConfigError(f'Student {entry.name}: dim {entry.dim} is not a multiple of head_dim {head_dim}')
    return {'depth': entry.depth, 'embed_dim': entry.dim, 'head_count': entry.dim // head_dim,
            'ffn_hidden_dim': 2 * entry.dim, 'stochastic_depth_rate': 0.0}


def distill_seed(seed: int, plan: ExperimentPlan, base: Mapping | None = None) -> list[dict]:
    """One seed: distill every roster student from the pre-trained teacher, pre-train each from scratch, probe kNN."""
    base = dict(base or {})
    options = run_service.resolve_config(overrides=base, seed=seed)
    pre = _checked('pretrain', run_service.run('pretrain', overrides={**base, **plan.pretrain_overrides()},
                                               seed=seed, resume=True))
    budget = {'steps': plan.distill_steps, 'checkpoint_every': plan.distill_steps}
    distilled = _checked('distill', run_service.run(
        'distill', overrides={**base, **budget, 'from_checkpoint': pre.manifest['checkpoint']}, seed=seed,
        resume=True))
    distill_dir = run_service.RunDirectory(distilled.run_dir)
    end_step = int(distilled.manifest['end_step'])
    rows = []
    for entry in run_service.load_roster(options):
        scratch = _checked(f'scratch {entry.name}', run_service.run(
            'pretrain', overrides={**base, **budget, **scratch_overrides(entry, options['head_dim'])}, seed=seed,
            resume=True))
        rows.append({
            'seed': seed,
            'student': entry.name,
            'steps': plan.distill_steps,
            'knn_distilled': _knn(str(distill_dir.checkpoint_path(end_step, entry.name)), base, seed, 'student'),
            'knn_scratch': _knn(scratch.manifest['checkpoint'], base, seed, 'student'),
        })
    logger.info(f'distillation experiment seed {seed}: {rows}')
    return rows


def evaluate_distillation(frame: pd.DataFrame) -> dict:
    """Per student: median kNN gain of distillation over scratch training across seeds, and seeds not worse."""
    gains = frame.assign(gain=frame['knn_distilled'] - frame['knn_scratch'])
    students = {}
    for name, rows in gains.groupby('student', sort=False):
        students[name] = {
            'median_distilled': float(np.median(rows['knn_distilled'])),
            'median_scratch': float(np.median(rows['knn_scratch'])),
            'median_gain': float(np.median(rows['gain'])),
            'not_worse': int((rows['gain'] >= 0).sum()),
        }
    return {
        'seeds': int(frame['seed'].nunique()),
        'students': students,
        'passed': bool(students) and all(s['median_gain'] >= 0 for s in students.values()),
    }


def distill_experiment(plan: ExperimentPlan | None = None, base: Mapping | None = None) -> tuple[pd.DataFrame, dict]:
    plan = plan or ExperimentPlan()
    frame = pd.DataFrame([row for seed in plan.seeds for row in distill_seed(seed, plan, base)])
    return frame, evaluate_distillation(frame)
