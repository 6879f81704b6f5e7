"""
Run orchestration behind the management commands.

`run(subcommand, config_path, overrides)` resolves the config (settings
defaults < config file < overrides < --seed), opens a locked run directory,
checks phase lineage, dispatches to the subcommand handler and records the
outcome in manifest.json and the TrainingRun table.

Run directory layout:
    manifest.json   run record (mirrors the TrainingRun row)
    config.txt      resolved config, canonical order; its SHA-256 is the config hash
    metrics.csv     per-step losses (training) or per-metric rows (tools)
    monitor.csv     CLS-patch cosine and locality at every checkpoint (training)
    checkpoints/    step_XXXXXXX.dnv3 (distill: one folder per student)
    images/         PPM / PGM renderings
    run.lock        present while a process owns the directory
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from django.conf import settings
from django.db import DatabaseError

from ..exceptions import ConfigError, DinoLabError, GeometryError, LineageError, RunLockError
from ..models import TrainingRun
from ..serializers import RunConfigSerializer
from ..utils.rope import sample_jitter_scale
from ..utils.seeding import derive_rng
from ..utils.tensor import no_grad
from ..utils.tensor_io import FORMAT_VERSION, atomic_write_bytes, load_tensors, save_tensors, text_to_tensor
from . import curation_service as curation
from . import distill_service as distill
from . import probe_service as probes
from .crop_service import resize_image
from .dataset_service import DatasetConfig, SyntheticShapes
from .diagnostics_service import (FeatureMap, cls_patch_cosine, cosine_map, feature_dimension_outliers,
                                  highres_smooth, locality_score, patch_norm_stats, pca_rgb)
from .image_service import write_pgm, write_ppm
from .loss_service import METRIC_FIELDS, LossReport
from .optim_service import OptimizerConfig
from .training_service import (BatchSource, Trainer, default_gram_source_step, load_backbone, load_head,
                               loss_settings_from, schedule_config_from, subtree)
from .vit_service import ViTState, extract_layer_features, forward

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('pretrain', 'refine', 'hires-adapt', 'distill', 'curate', 'probe', 'diagnose', 'simulate-distill')
TRAINING_PHASES = {'pretrain': 'pretrain', 'refine': 'refine', 'hires-adapt': 'adapt'}
PARENT_SUBCOMMANDS = {
    'refine': ('pretrain', 'refine'),
    'hires-adapt': ('pretrain', 'refine', 'hires-adapt'),
}
ARTIFACT_VERSIONS = {'run_layout': 1, 'config_format': 1, 'checkpoint_format': FORMAT_VERSION}
CHECKPOINT_SUFFIX = '.dnv3'
CONFIG_HEADER = '# dinolab run config\n'
TRAIN_COLUMNS = list(METRIC_FIELDS) + ['ibot_count']
MONITOR_COLUMNS = ['step', 'cls_patch_cosine', 'locality']
MONITOR_IMAGES = 8
DEFAULT_ROSTER = 'small, 2, 32, 1\nmedium, 3, 48, 2\n'


# --------------------
# Config
# --------------------
def normalize_subcommand(name: str) -> str:
    """Accepts `hires_adapt` as well as `hires-adapt`."""
    normalized = str(name).strip().replace('_', '-')
    if normalized not in SUBCOMMANDS:
        raise ConfigError(f'Unknown subcommand {name!r}; expected one of {", ".join(SUBCOMMANDS)}')
    return normalized


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f'Config line {number}: expected "key = value", got {raw.strip()!r}')
        if key in values:
            raise ConfigError(f'Config line {number}: duplicate key {key!r}')
        values[key] = value.strip()
    return values


def parse_overrides(items) -> dict[str, str]:
    values = {}
    for item in items or ():
        key, sep, value = str(item).partition('=')
        if not sep or not key.strip():
            raise ConfigError(f'Override {item!r} is not of the form key=value')
        values[key.strip()] = value.strip()
    return values


def validate_config(values: Mapping) -> dict:
    serializer = RunConfigSerializer(data=dict(values))
    if not serializer.is_valid():
        errors = serializer.errors
        if 'unknown_keys' in errors:
            raise ConfigError(f'Unknown config keys: {", ".join(str(k) for k in errors["unknown_keys"])}')
        details = '; '.join(f'{key}: {" ".join(str(m) for m in messages)}' for key, messages in errors.items())
        raise ConfigError(f'Invalid config: {details}')
    return dict(serializer.validated_data)


def resolve_config(config_path=None, overrides: Mapping | None = None, seed: int | None = None) -> dict:
    values = dict(settings.DINOLAB_DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f'Config file not found: {path}')
        values.update(parse_config_text(path.read_text(encoding='utf-8')))
    values.update(overrides or {})
    if seed is not None:
        values['seed'] = seed
    return validate_config(values)


def format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_config_text(options: Mapping) -> str:
    return CONFIG_HEADER + ''.join(f'{key} = {format_value(options[key])}\n' for key in sorted(options))


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def _number_list(text: str, key: str, kind=float) -> list:
    try:
        values = [kind(item) for item in str(text).split(',') if item.strip()]
    except ValueError as exc:
        raise ConfigError(f'{key}: expected a comma-separated list, got {text!r}') from exc
    if not values:
        raise ConfigError(f'{key} must not be empty')
    return values


# --------------------
# Run directory
# --------------------
@dataclass
class RunDirectory:
    path: Path

    def __post_init__(self):
        self.path = Path(self.path).resolve()

    @property
    def manifest_path(self) -> Path:
        return self.path / 'manifest.json'

    @property
    def config_path(self) -> Path:
        return self.path / 'config.txt'

    @property
    def metrics_path(self) -> Path:
        return self.csv_path('metrics')

    @property
    def checkpoints_dir(self) -> Path:
        return self.path / 'checkpoints'

    @property
    def images_dir(self) -> Path:
        return self.path / 'images'

    @property
    def lock_path(self) -> Path:
        return self.path / 'run.lock'

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def prepare(self) -> None:
        for folder in (self.path, self.checkpoints_dir, self.images_dir):
            folder.mkdir(parents=True, exist_ok=True)

    @contextmanager
    def lock(self):
        """Exclusive ownership of the directory; a second writer gets RunLockError."""
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockError(f'{self.path} is locked by another run (remove {self.lock_path} if stale)') from exc
        with os.fdopen(fd, 'w') as handle:
            handle.write(f'{os.getpid()}\n')
        try:
            yield self
        finally:
            self.lock_path.unlink(missing_ok=True)

    # ---- checkpoints ----
    def checkpoint_path(self, step: int, name: str | None = None) -> Path:
        folder = self.checkpoints_dir / name if name else self.checkpoints_dir
        return folder / f'step_{step:07d}{CHECKPOINT_SUFFIX}'

    def checkpoints(self, name: str | None = None) -> list[tuple[int, Path]]:
        folder = self.checkpoints_dir / name if name else self.checkpoints_dir
        found = []
        for path in folder.glob(f'step_*{CHECKPOINT_SUFFIX}'):
            try:
                found.append((int(path.stem.split('_', 1)[1]), path))
            except ValueError:
                continue
        return sorted(found)

    def latest_checkpoint(self, name: str | None = None) -> tuple[int, Path] | None:
        found = self.checkpoints(name)
        return found[-1] if found else None

    # ---- records ----
    def write_config(self, text: str) -> None:
        atomic_write_bytes(self.config_path, text.encode('utf-8'))

    def read_config(self) -> str:
        return self.config_path.read_text(encoding='utf-8')

    def write_manifest(self, manifest: Mapping) -> None:
        atomic_write_bytes(self.manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + '\n').encode('utf-8'))

    def read_manifest(self) -> dict:
        return json.loads(self.manifest_path.read_text(encoding='utf-8'))

    def csv_path(self, name: str) -> Path:
        return self.path / f'{name}.csv'

    def append_rows(self, name: str, rows: list[dict], columns: list[str]) -> None:
        if not rows:
            return
        path = self.csv_path(name)
        pd.DataFrame(rows, columns=columns).to_csv(path, mode='a', header=not path.exists(), index=False)

    def truncate_rows(self, name: str, before_step: int | None = None) -> None:
        """Drop rows with step >= `before_step` (all rows when None)."""
        path = self.csv_path(name)
        if not path.exists():
            return
        if before_step is None:
            path.unlink()
            return
        frame = pd.read_csv(path, float_precision='round_trip')
        kept = frame[frame['step'] < before_step]
        atomic_write_bytes(path, kept.to_csv(index=False).encode('utf-8'))

    def read_rows(self, name: str = 'metrics') -> pd.DataFrame:
        path = self.csv_path(name)
        if not path.exists():
            return pd.DataFrame()
        return pd.read_csv(path, float_precision='round_trip')


@dataclass
class RunResult:
    subcommand: str
    run_dir: Path | None
    exit_code: int = 0
    error: str = ''
    manifest: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.exit_code == 0


# --------------------
# Lineage
# --------------------
def run_dir_of_checkpoint(path) -> Path | None:
    """The run directory that wrote `path` (checkpoints/ or checkpoints/<student>/ below it)."""
    path = Path(path).resolve()
    for candidate in (path.parent.parent, path.parent.parent.parent):
        if (candidate / 'manifest.json').exists():
            return candidate
    return None


def require_checkpoint(path, subcommand: str, key: str = 'from_checkpoint') -> Path:
    if not path:
        raise LineageError(f'{subcommand} needs {key}: a checkpoint to continue from')
    path = Path(path)
    if not path.is_file():
        raise LineageError(f'{key} {path} does not exist')
    return path.resolve()


def check_acyclic(parent_dir: Path, run_path: Path) -> None:
    seen = set()
    current = Path(parent_dir).resolve()
    while current is not None:
        if current == run_path:
            raise LineageError(f'{run_path} cannot continue from its own lineage')
        if current in seen:
            raise LineageError(f'Lineage through {current} is cyclic')
        seen.add(current)
        manifest_path = current / 'manifest.json'
        if not manifest_path.exists():
            break
        parent = json.loads(manifest_path.read_text(encoding='utf-8')).get('parent_run_dir') or ''
        current = Path(parent).resolve() if parent else None


def default_gram_checkpoint(parent_dir: Path, parent_manifest: Mapping, options: Mapping) -> Path:
    """
    The parent run's checkpoint at `gram_source_step`, or by default at 20% of
    the parent's steps: the latest checkpoint at or before the target, else
    the earliest one.
    """
    found = RunDirectory(parent_dir).checkpoints()
    if not found:
        raise LineageError(f'{parent_dir} holds no checkpoints to use as a Gram teacher')
    target = options['gram_source_step']
    if target < 0:
        start = int(parent_manifest.get('start_step', 0))
        target = start + default_gram_source_step(int(parent_manifest.get('end_step', 0)) - start)
    before = [item for item in found if item[0] <= target]
    step, path = before[-1] if before else found[0]
    logger.info(f'Gram teacher: {path} (step {step}, target {target})')
    return path


def resolve_lineage(subcommand: str, options: Mapping, run_dir: RunDirectory) -> dict:
    source = options['from_checkpoint']
    needs_parent = subcommand in ('refine', 'hires-adapt', 'distill', 'probe', 'diagnose') or (
        subcommand == 'curate' and options['curate_source'] == 'checkpoint')
    if subcommand == 'pretrain' and source:
        raise LineageError('pretrain starts from scratch; continue a checkpoint with refine or hires-adapt')
    if not needs_parent:
        return {'parent_checkpoint': '', 'parent_run_dir': '', 'gram_checkpoint': ''}
    checkpoint = require_checkpoint(source, subcommand)
    parent_dir = run_dir_of_checkpoint(checkpoint)
    parent_manifest = RunDirectory(parent_dir).read_manifest() if parent_dir else {}
    if parent_dir:
        check_acyclic(parent_dir, run_dir.path)
    allowed = PARENT_SUBCOMMANDS.get(subcommand)
    if allowed and parent_manifest and parent_manifest.get('subcommand') not in allowed:
        raise LineageError(f'{subcommand} cannot continue a {parent_manifest.get("subcommand")} run '
                           f'(allowed: {", ".join(allowed)})')
    gram = ''
    if subcommand == 'refine':
        gram = options['gram_checkpoint']
        if not gram:
            if not parent_dir:
                raise LineageError('refine from a checkpoint outside a run directory needs gram_checkpoint')
            gram = default_gram_checkpoint(parent_dir, parent_manifest, options)
        gram = str(require_checkpoint(gram, subcommand, 'gram_checkpoint'))
    elif subcommand == 'hires-adapt':
        gram = str(require_checkpoint(options['gram_checkpoint'] or checkpoint, subcommand, 'gram_checkpoint'))
    return {'parent_checkpoint': str(checkpoint), 'parent_run_dir': str(parent_dir or ''), 'gram_checkpoint': gram}


# --------------------
# Records
# --------------------
def _record_run(manifest: Mapping) -> TrainingRun | None:
    """Mirror the manifest into the TrainingRun table; the manifest stays authoritative without a database."""
    try:
        parent = None
        if manifest['parent_run_dir']:
            parent = TrainingRun.objects.filter(run_dir=manifest['parent_run_dir']).first()
        record, _ = TrainingRun.objects.update_or_create(
            run_dir=manifest['run_dir'],
            defaults={
                'subcommand': manifest['subcommand'],
                'config_hash': manifest['config_hash'],
                'seed': manifest['seed'],
                'start_step': manifest['start_step'],
                'end_step': manifest['end_step'],
                'parent_checkpoint': manifest['parent_checkpoint'],
                'parent': parent,
                'gram_checkpoint': manifest['gram_checkpoint'],
                'status': manifest['status'],
                'exit_code': manifest['exit_code'],
                'error': manifest['error'],
                'artifact_versions': manifest['artifact_versions'],
            },
        )
        return record
    except DatabaseError as exc:
        logger.warning(f'Run record not stored in the database: {exc}')
        return None


def _finish(run_dir: RunDirectory, manifest: dict, exit_code: int, error: str = '') -> None:
    manifest.update(status='completed' if exit_code == 0 else 'failed', exit_code=exit_code, error=error)
    run_dir.write_manifest(manifest)
    _record_run(manifest)


def open_run(subcommand: str, options: Mapping, text: str, run_dir: RunDirectory, resume: bool) -> dict:
    if run_dir.exists():
        if not resume:
            raise ConfigError(f'{run_dir.path} already holds a run; pass --resume or choose another run_dir')
        if run_dir.read_config() != text:
            raise ConfigError(f'Config differs from {run_dir.config_path} (stored hash '
                              f'{run_dir.read_manifest().get("config_hash", "?")[:12]}); cannot resume')
        manifest = run_dir.read_manifest()
        manifest.update(status='running', exit_code=0, error='')
        return manifest
    lineage = resolve_lineage(subcommand, options, run_dir)
    run_dir.prepare()
    run_dir.write_config(text)
    manifest = {
        'subcommand': subcommand,
        'run_dir': str(run_dir.path),
        'config_hash': config_hash(text),
        'seed': options['seed'],
        'start_step': 0,
        'end_step': 0,
        'checkpoint': '',
        'status': 'running',
        'exit_code': 0,
        'error': '',
        'artifact_versions': dict(ARTIFACT_VERSIONS),
        **lineage,
    }
    run_dir.write_manifest(manifest)
    return manifest


def run(subcommand: str, config_path=None, overrides=None, seed: int | None = None,
        resume: bool = False) -> RunResult:
    """
    Resolve the config, run `subcommand` in its run directory and report the
    exit status (0 ok, 2 config, 3 numeric fault, 4 lineage, 1 other).
    `overrides` is a mapping or a list of "key=value" strings.
    """
    try:
        subcommand = normalize_subcommand(subcommand)
        if not isinstance(overrides, Mapping):
            overrides = parse_overrides(overrides)
        options = resolve_config(config_path, overrides, seed)
    except DinoLabError as exc:
        logger.error(f'{subcommand}: {exc}')
        return RunResult(str(subcommand), None, exc.exit_code, str(exc))

    text = canonical_config_text(options)
    digest = config_hash(text)
    run_dir = RunDirectory(options['run_dir'] or Path(settings.DINOLAB_RUNS_ROOT) / f'{subcommand}-{digest[:12]}')
    try:
        with run_dir.lock():
            try:
                manifest = open_run(subcommand, options, text, run_dir, resume)
            except DinoLabError as exc:
                logger.error(f'{subcommand}: {exc}')
                return RunResult(subcommand, run_dir.path, exc.exit_code, str(exc))
            _record_run(manifest)
            logger.info(f'{subcommand}: run directory {run_dir.path} (config {digest[:12]})')
            try:
                summary = HANDLERS[subcommand](options, run_dir, manifest, resume)
            except DinoLabError as exc:
                logger.error(f'{subcommand} failed: {exc}')
                _finish(run_dir, manifest, exc.exit_code, str(exc))
                return RunResult(subcommand, run_dir.path, exc.exit_code, str(exc), manifest)
            except Exception as exc:
                logger.exception(f'{subcommand} crashed')
                _finish(run_dir, manifest, 1, f'{type(exc).__name__}: {exc}')
                raise
            _finish(run_dir, manifest, 0)
            return RunResult(subcommand, run_dir.path, 0, '', manifest, summary)
    except RunLockError as exc:
        logger.error(str(exc))
        return RunResult(subcommand, run_dir.path, exc.exit_code, str(exc))


# --------------------
# Training phases
# --------------------
def _metric_row(report: LossReport) -> dict:
    values = report.as_dict()
    return {name: values[name] for name in TRAIN_COLUMNS}


def checkpoint_monitor(backbone: ViTState, images, radius: int = 1) -> dict:
    """CLS-patch cosine and mean locality score of `backbone` on a fixed image set."""
    with no_grad():
        output = forward(backbone, images)
    locality = float('nan')
    if max(output.grid) - 1 >= 2 * radius:
        locality = float(np.mean([locality_score(FeatureMap.from_tokens(patches, output.grid), radius)
                                  for patches in output.patches.data]))
    return {'cls_patch_cosine': cls_patch_cosine(output), 'locality': locality}


def train_phase(phase: str, options: Mapping, run_dir: RunDirectory, manifest: dict, resume: bool) -> dict:
    trainer = Trainer(options, phase)
    latest = run_dir.latest_checkpoint() if resume else None
    if latest:
        trainer.restore(load_tensors(latest[1]))
        logger.info(f'Resuming {phase} from {latest[1]} (step {trainer.step})')
    elif phase != 'pretrain':
        trainer.load_parent(load_tensors(manifest['parent_checkpoint']))
        trainer.load_gram_teacher(load_tensors(manifest['gram_checkpoint']))
    if not latest:
        manifest['start_step'] = trainer.step
    run_dir.truncate_rows('metrics', trainer.step)
    # the monitor row at the restored step describes the restored checkpoint
    run_dir.truncate_rows('monitor', trainer.step + 1)
    monitor_images = trainer.dataset.images(range(min(MONITOR_IMAGES, len(trainer.dataset))))
    pending: list[dict] = []
    saved = {'step': trainer.step if latest else None}

    def save(t: Trainer) -> None:
        run_dir.append_rows('metrics', pending, TRAIN_COLUMNS)
        pending.clear()
        path = save_tensors(run_dir.checkpoint_path(t.step), t.checkpoint_arrays())
        run_dir.append_rows('monitor', [dict(step=t.step, **checkpoint_monitor(t.models.teacher, monitor_images))],
                            MONITOR_COLUMNS)
        manifest.update(end_step=t.step, checkpoint=str(path))
        run_dir.write_manifest(manifest)
        saved['step'] = t.step
        logger.info(f'[{phase}] checkpoint {path.name}')

    reports = trainer.run(options['steps'], on_report=lambda r: pending.append(_metric_row(r)),
                          checkpoint_every=options['checkpoint_every'], on_checkpoint=save,
                          log_every=options['log_every'])
    if saved['step'] != trainer.step:
        save(trainer)
    return {
        'start_step': manifest['start_step'],
        'end_step': trainer.step,
        'checkpoint': manifest['checkpoint'],
        'final_total': reports[-1].total if reports else None,
    }


# --------------------
# Distillation
# --------------------
def load_roster(options: Mapping) -> list[distill.RosterEntry]:
    if options['roster']:
        return distill.load_roster(options['roster'])
    return distill.parse_roster(DEFAULT_ROSTER)


def _student_arrays(student: distill.StudentRun, step: int) -> dict[str, np.ndarray]:
    arrays = {
        'meta.step': np.array([step], dtype=np.int64),
        'meta.vit_config': text_to_tensor(student.backbone.config.to_text()),
    }
    for name, tree in student.trees().items():
        arrays.update({f'{name}.{k}': v for k, v in tree.arrays().items()})
    arrays.update(student.optimizer.state_arrays())
    return arrays


def _restore_student(student: distill.StudentRun, arrays: Mapping[str, np.ndarray]) -> None:
    for name, tree in student.trees().items():
        tree.load_arrays(subtree(arrays, name))
    student.optimizer.load_state_arrays(arrays)


def distill_phase(options: Mapping, run_dir: RunDirectory, manifest: dict, resume: bool) -> dict:
    arrays = load_tensors(manifest['parent_checkpoint'])
    teacher = load_backbone(arrays, 'teacher')
    teacher_dino, teacher_ibot = load_head(arrays, 'teacher_dino_head'), load_head(arrays, 'teacher_ibot_head')
    seed = options['seed']
    batches = BatchSource(dict(options, patch_size=teacher.config.patch_size), 'pretrain')
    schedule_config = schedule_config_from(options)
    loss_settings = loss_settings_from(options, 'pretrain')
    optimizer_config = OptimizerConfig(weight_decay=schedule_config.weight_decay,
                                       layerwise_decay=schedule_config.layerwise_decay,
                                       clip_grad=options['clip_grad'])
    students = [
        distill.init_student(entry.name, distill.student_config(entry, teacher.config), teacher_dino.config,
                             derive_rng(seed, 'init', index), optimizer_config)
        for index, entry in enumerate(load_roster(options))
    ]
    step = 0
    latest = run_dir.latest_checkpoint(students[0].name) if resume else None
    if latest:
        step = latest[0]
        for student in students:
            _restore_student(student, load_tensors(run_dir.checkpoint_path(step, student.name)))
        logger.info(f'Resuming distillation at step {step}')
    run_dir.truncate_rows('metrics', step)
    columns = ['student'] + TRAIN_COLUMNS
    pending: list[dict] = []
    saved = step if latest else None

    def save(at: int) -> None:
        run_dir.append_rows('metrics', pending, columns)
        pending.clear()
        for student in students:
            save_tensors(run_dir.checkpoint_path(at, student.name), _student_arrays(student, at))
        manifest.update(end_step=at, checkpoint=str(run_dir.checkpoint_path(at, students[0].name)))
        run_dir.write_manifest(manifest)

    s_min, s_max = teacher.config.rope_jitter_range
    reports = {}
    while step < options['steps']:
        jitter = sample_jitter_scale(derive_rng(seed, 'jitter', step), s_min, s_max)
        reports, _ = distill.distill_step(teacher, teacher_dino, teacher_ibot, students, batches.make_batch(step),
                                          schedule_config, step, loss_settings, jitter)
        pending.extend(dict(student=name, **_metric_row(report)) for name, report in reports.items())
        step += 1
        if options['log_every'] and step % options['log_every'] == 0:
            logger.info(f'[distill] step {step}: ' + ' '.join(f'{n}={r.total:.4f}' for n, r in reports.items()))
        if options['checkpoint_every'] and step % options['checkpoint_every'] == 0:
            save(step)
            saved = step
    if saved != step:
        save(step)
    return {'students': [s.name for s in students], 'end_step': step,
            'final_total': {name: report.total for name, report in reports.items()}}


def simulate_distill(options: Mapping, run_dir: RunDirectory, manifest: dict, resume: bool) -> dict:
    roster = load_roster(options)
    model = distill.CostModel.build(options['teacher_cost'], [entry.cost for entry in roster], options['batch_size'],
                                    options['distill_workers'], options['allgather_byte_cost'],
                                    options['allgather_bytes'])
    plan = distill.plan_assignment(model)
    timeline = distill.simulate_iteration(plan, model)
    plan_frame = distill.plan_frame(plan, model, [entry.name for entry in roster])
    atomic_write_bytes(run_dir.path / 'plan.csv', plan_frame.to_csv(index=False).encode('utf-8'))
    atomic_write_bytes(run_dir.path / 'timeline.csv',
                       distill.timeline_frame(timeline).to_csv(index=False).encode('utf-8'))
    run_dir.truncate_rows('metrics')
    run_dir.append_rows('metrics', [
        {'metric': 'makespan', 'value': float(plan.makespan)},
        {'metric': 'iteration_time', 'value': float(plan.iteration_time)},
        {'metric': 'teacher_share', 'value': float(plan.teacher_share)},
        {'metric': 'idle_total', 'value': float(sum(plan.idle))},
    ], ['metric', 'value'])
    return {'allocation': list(plan.allocation), 'makespan': str(plan.makespan),
            'iteration_time': str(plan.iteration_time),
            'plan_text': plan_frame.to_string(index=False)}


# --------------------
# Curation, probes and diagnostics
# --------------------
def _dataset(options: Mapping) -> SyntheticShapes:
    return SyntheticShapes(DatasetConfig(image_size=options['image_size'], length=options['dataset_size']),
                           seed=options['seed'])


def _source_backbone(manifest: Mapping, options: Mapping) -> ViTState:
    """Backbone `diag_tree` of the source checkpoint; distilled student checkpoints fall back to `student`."""
    arrays = load_tensors(manifest['parent_checkpoint'])
    tree = options['diag_tree']
    if not any(key.startswith(f'{tree}.') for key in arrays):
        if tree != 'teacher' or not any(key.startswith('student.') for key in arrays):
            raise LineageError(f'{manifest["parent_checkpoint"]} holds no {tree} weights')
        tree = 'student'
    return load_backbone(arrays, tree)


def curate(options: Mapping, run_dir: RunDirectory, manifest: dict, resume: bool) -> dict:
    dataset = _dataset(options)
    images = dataset.images(range(len(dataset)))
    if options['curate_source'] == 'checkpoint':
        embeddings = curation.checkpoint_embeddings(_source_backbone(manifest, options), images)
    else:
        embeddings = curation.pixel_embeddings(images, options['curate_pixel_size'])
    seed = options['seed']
    hierarchy = curation.build_hierarchy(embeddings, _number_list(options['curate_levels'], 'curate_levels', int),
                                         seed=seed, max_iter=options['kmeans_max_iter'])
    indices, report = curation.balanced_sample(hierarchy, options['curate_size'], seed=seed)
    iid = curation.iid_sample(len(dataset), options['curate_size'], seed=seed)
    index_path = curation.write_index_file(run_dir.path / 'curated_index.txt', indices)
    curation.write_report(run_dir.path / 'curation_report.csv', report)
    rows = [{
        'level': depth, 'clusters': level.count, 'balanced_entropy': report.entropy[depth - 1],
        'iid_entropy': curation.occupancy_entropy(level.point_labels[iid], level.count),
    } for depth, level in enumerate(hierarchy.levels, start=1)]
    run_dir.truncate_rows('metrics')
    run_dir.append_rows('metrics', rows, ['level', 'clusters', 'balanced_entropy', 'iid_entropy'])
    return {'index_file': str(index_path), 'sampled': report.sampled,
            'top_entropy': rows[-1]['balanced_entropy'], 'iid_top_entropy': rows[-1]['iid_entropy']}


def patch_features(backbone: ViTState, images, batch_size: int = 32) -> np.ndarray:
    images = np.asarray(images)
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(forward(backbone, images[start:start + batch_size]).patches.data)
    return np.concatenate(chunks).astype(np.float64)


def probe(options: Mapping, run_dir: RunDirectory, manifest: dict, resume: bool) -> dict:
    backbone = _source_backbone(manifest, options)
    dataset = _dataset(options)
    n_train, n_test = options['probe_train_size'], options['probe_test_size']
    if n_train + n_test > len(dataset):
        raise ConfigError(f'probe_train_size + probe_test_size ({n_train + n_test}) exceeds dataset_size '
                          f'({len(dataset)})')
    scenes = [dataset[i] for i in range(n_train + n_test)]
    images = np.stack([scene.image for scene in scenes])
    labels = np.array([scene.label for scene in scenes], dtype=np.int64)
    lrs = _number_list(options['probe_lrs'], 'probe_lrs')
    wds = _number_list(options['probe_wds'], 'probe_wds')
    seed, epochs, val_fraction = options['seed'], options['probe_epochs'], options['probe_val_fraction']

    cls = curation.checkpoint_embeddings(backbone, images)
    results = [
        probes.knn_probe(cls[:n_train], labels[:n_train], cls[n_train:], labels[n_train:], k=options['probe_k']),
        probes.linear_probe(cls, labels, lrs, wds, epochs, val_fraction, seed),
    ]
    if options['probe_dense']:
        patch_size = backbone.config.patch_size
        patch_labels = np.stack([probes.patch_labels(scene.mask, patch_size) for scene in scenes])
        results.append(probes.dense_linear_probe(patch_features(backbone, images), patch_labels, lrs, wds, epochs,
                                                 val_fraction, seed))
    for result in results:
        logger.info(f'probe {result.task}: {result.metric}={result.value:.4f} {result.hyperparameters}')
    rows = [{
        'task': r.task, 'metric': r.metric, 'value': r.value,
        'hyperparameters': json.dumps(r.hyperparameters, sort_keys=True),
        'split_sizes': json.dumps(r.split_sizes, sort_keys=True),
    } for r in results]
    run_dir.truncate_rows('metrics')
    run_dir.append_rows('metrics', rows, ['task', 'metric', 'value', 'hyperparameters', 'split_sizes'])
    atomic_write_bytes(run_dir.path / 'probe_results.json',
                       json.dumps([r.as_dict() for r in results], indent=2, sort_keys=True).encode('utf-8'))
    return {r.task: r.value for r in results}


def diagnose(options: Mapping, run_dir: RunDirectory, manifest: dict, resume: bool) -> dict:
    backbone = _source_backbone(manifest, options)
    cfg = backbone.config
    dataset = _dataset(options)
    if options['diag_image_index'] >= len(dataset):
        raise ConfigError(f'diag_image_index {options["diag_image_index"]} outside the dataset ({len(dataset)})')
    image = dataset[options['diag_image_index']].image
    resolution = options['diag_resolution'] or image.shape[0]
    if resolution != image.shape[0]:
        image = resize_image(image, resolution)
    layer = cfg.depth if options['diag_layer'] == -1 else options['diag_layer']
    norm_applied = options['diag_norm']
    checkpoint_id = Path(manifest['parent_checkpoint']).name
    grid = cfg.grid(resolution, resolution)

    with no_grad():
        tokens = extract_layer_features(backbone, image, layer, apply_norm=norm_applied)
        output = forward(backbone, image)
    fmap = FeatureMap.from_tokens(tokens.data[0], grid, checkpoint_id, layer, resolution, norm_applied)
    ref = (options['diag_ref_row'] if options['diag_ref_row'] >= 0 else grid[0] // 2,
           options['diag_ref_col'] if options['diag_ref_col'] >= 0 else grid[1] // 2)
    radius = options['locality_radius']
    upscale = options['image_upscale']

    rendering = pca_rgb(fmap, None if options['pca_variant'] < 0 else options['pca_variant'])
    write_ppm(run_dir.images_dir / 'input.ppm', image)
    write_pgm(run_dir.images_dir / f'cosine_r{ref[0]}_c{ref[1]}.pgm', cosine_map(fmap, ref), upscale, lo=-1.0, hi=1.0)
    write_ppm(run_dir.images_dir / 'pca.ppm', rendering.image, upscale)
    norms = np.linalg.norm(output.prenorm_patches[0], axis=-1).reshape(grid)
    write_pgm(run_dir.images_dir / 'patch_norms.pgm', norms, upscale, lo=0.0, hi=float(norms.max()) or 1.0)

    norm_stats = patch_norm_stats(output.prenorm_patches)
    metrics = {
        'cls_patch_cosine': cls_patch_cosine(output),
        'pca_variant': rendering.variant,
        'pca_flagged_channels': len(rendering.flagged_channels),
        'patch_norm_mean': norm_stats['mean'],
        'patch_norm_max': norm_stats['max'],
        'patch_norm_outlier_fraction': norm_stats['outlier_fraction'],
        'outlier_channels': len(feature_dimension_outliers(tokens)),
    }
    try:
        metrics['locality'] = locality_score(fmap, radius)
    except GeometryError as exc:
        logger.warning(f'locality skipped: {exc}')
    factor = options['gram_highres_factor']
    if factor > 1 and 'locality' in metrics:
        with no_grad():
            hi_tokens = extract_layer_features(backbone, resize_image(image, resolution * factor), layer,
                                               apply_norm=norm_applied)
        hi_map = FeatureMap.from_tokens(hi_tokens.data[0], cfg.grid(resolution * factor, resolution * factor),
                                        checkpoint_id, layer, resolution * factor, norm_applied)
        metrics['highres_locality'] = locality_score(highres_smooth(hi_map, factor), radius)
    rows = [{'metric': name, 'value': float(value), 'checkpoint': checkpoint_id, 'layer': layer,
             'resolution': resolution, 'norm_applied': norm_applied} for name, value in metrics.items()]
    run_dir.truncate_rows('metrics')
    run_dir.append_rows('metrics', rows, ['metric', 'value', 'checkpoint', 'layer', 'resolution', 'norm_applied'])
    return metrics


HANDLERS = {
    **{name: partial(train_phase, phase) for name, phase in TRAINING_PHASES.items()},
    'distill': distill_phase,
    'curate': curate,
    'probe': probe,
    'diagnose': diagnose,
    'simulate-distill': simulate_distill,
}
