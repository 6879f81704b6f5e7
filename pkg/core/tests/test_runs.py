import hashlib
import json
from io import StringIO
from unittest import mock

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase
from django.urls import reverse

from core.exceptions import ConfigError, NumericFault
from core.models import TrainingRun
from core.serializers import RunConfigSerializer, TrainingRunSerializer
from core.services import run_service
from core.services.image_service import read_image
from core.services.training_service import read_index_file
from core.utils.tensor_io import load_tensors

from .helpers import TINY_CONFIG, TempRunsMixin


class ConfigResolutionTests(TempRunsMixin, SimpleTestCase):
    def test_layering(self):
        path = self.runs_root / 'run.cfg'
        path.write_text('# tiny\nsteps = 7\nseed = 3\n', encoding='utf-8')
        options = run_service.resolve_config(path, {'steps': 9})
        self.assertEqual(options['steps'], 9)
        self.assertEqual(options['seed'], 3)
        self.assertEqual(options['depth'], settings.DINOLAB_DEFAULTS['depth'])
        self.assertEqual(run_service.resolve_config(path, {'steps': 9}, seed=11)['seed'], 11)

    def test_config_text_errors(self):
        with self.assertRaises(ConfigError):
            run_service.parse_config_text('steps = 1\nsteps = 2\n')
        with self.assertRaises(ConfigError):
            run_service.parse_config_text('steps\n')
        with self.assertRaises(ConfigError):
            run_service.parse_overrides(['steps'])
        with self.assertRaises(ConfigError):
            run_service.resolve_config(self.runs_root / 'missing.cfg')

    def test_unknown_and_invalid_keys(self):
        with self.assertRaisesMessage(ConfigError, 'Unknown config keys: bogus'):
            run_service.resolve_config(overrides={'bogus': 1})
        with self.assertRaises(ConfigError):
            run_service.resolve_config(overrides={'embed_dim': 30})
        serializer = RunConfigSerializer(data={**settings.DINOLAB_DEFAULTS, 'bogus': 1})
        self.assertFalse(serializer.is_valid())
        self.assertIn('unknown_keys', serializer.errors)

    def test_canonical_text_is_order_free(self):
        options = run_service.resolve_config(overrides=TINY_CONFIG)
        reordered = dict(reversed(list(options.items())))
        text = run_service.canonical_config_text(options)
        self.assertEqual(text, run_service.canonical_config_text(reordered))
        self.assertIn('separate_output_norms = true\n', text)
        self.assertEqual(len(run_service.config_hash(text)), 64)

    def test_subcommand_names(self):
        self.assertEqual(run_service.normalize_subcommand('hires_adapt'), 'hires-adapt')
        with self.assertRaises(ConfigError):
            run_service.normalize_subcommand('finetune')


class ExitCodeTests(TempRunsMixin, TestCase):
    def test_unknown_key_exits_2(self):
        result = run_service.run('pretrain', overrides=self.tiny(bogus=1))
        self.assertEqual(result.exit_code, 2)
        self.assertIsNone(result.run_dir)

    def test_override_strings(self):
        result = run_service.run('pretrain', overrides=['steps=x'])
        self.assertEqual(result.exit_code, 2)

    def test_missing_parent_exits_4(self):
        result = run_service.run('refine', overrides=self.tiny())
        self.assertEqual(result.exit_code, 4)
        self.assertIn('from_checkpoint', result.error)
        for subcommand in ('hires-adapt', 'distill', 'probe', 'diagnose'):
            self.assertEqual(run_service.run(subcommand, overrides=self.tiny()).exit_code, 4, subcommand)
        self.assertEqual(run_service.run('curate', overrides=self.tiny(curate_source='checkpoint')).exit_code, 4)

    def test_pretrain_from_checkpoint_exits_4(self):
        result = run_service.run('pretrain', overrides=self.tiny(from_checkpoint='elsewhere.dnv3'))
        self.assertEqual(result.exit_code, 4)

    def test_existing_directory_needs_resume(self):
        overrides = self.tiny(steps=1, checkpoint_every=1)
        self.assertTrue(run_service.run('pretrain', overrides=overrides).ok)
        self.assertEqual(run_service.run('pretrain', overrides=overrides).exit_code, 2)

    def test_resume_with_changed_config_exits_2(self):
        run_dir = self.runs_root / 'fixed'
        self.assertTrue(run_service.run('pretrain', overrides=self.tiny(steps=1, run_dir=str(run_dir))).ok)
        result = run_service.run('pretrain', overrides=self.tiny(steps=2, run_dir=str(run_dir)), resume=True)
        self.assertEqual(result.exit_code, 2)
        self.assertIn('cannot resume', result.error)

    def test_locked_directory_exits_1(self):
        run_dir = self.runs_root / 'locked'
        run_dir.mkdir()
        (run_dir / 'run.lock').write_text('12345\n')
        result = run_service.run('pretrain', overrides=self.tiny(run_dir=str(run_dir)))
        self.assertEqual(result.exit_code, 1)
        self.assertIn('locked', result.error)
        self.assertFalse((run_dir / 'manifest.json').exists())

    def test_numeric_fault_exits_3_and_is_recorded(self):
        def diverge(options, run_dir, manifest, resume):
            raise NumericFault('loss is nan at step 0')

        with mock.patch.dict(run_service.HANDLERS, {'pretrain': diverge}):
            result = run_service.run('pretrain', overrides=self.tiny())
        self.assertEqual(result.exit_code, 3)
        manifest = json.loads((result.run_dir / 'manifest.json').read_text())
        self.assertEqual(manifest['status'], 'failed')
        self.assertEqual(manifest['exit_code'], 3)
        record = TrainingRun.objects.get(run_dir=str(result.run_dir))
        self.assertEqual(record.status, 'failed')
        self.assertEqual(record.exit_code, 3)
        self.assertFalse((result.run_dir / 'run.lock').exists())


class PretrainRunTests(TempRunsMixin, TestCase):
    def test_run_directory_contents(self):
        result = run_service.run('pretrain', overrides=self.tiny())
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.summary['start_step'], 0)
        self.assertEqual(result.summary['end_step'], 4)

        text = (result.run_dir / 'config.txt').read_text(encoding='utf-8')
        digest = hashlib.sha256(text.encode('utf-8')).hexdigest()
        self.assertEqual(result.manifest['config_hash'], digest)
        self.assertEqual(result.run_dir.name, f'pretrain-{digest[:12]}')
        self.assertEqual(result.manifest['artifact_versions'], run_service.ARTIFACT_VERSIONS)

        run_dir = run_service.RunDirectory(result.run_dir)
        self.assertEqual([step for step, _ in run_dir.checkpoints()], [2, 4])
        metrics = run_dir.read_rows('metrics')
        self.assertEqual(list(metrics['step']), [0, 1, 2, 3])
        self.assertTrue(np.isfinite(metrics['total']).all())
        monitor = run_dir.read_rows('monitor')
        self.assertEqual(list(monitor['step']), [2, 4])
        self.assertTrue(monitor['cls_patch_cosine'].between(-1, 1).all())

        arrays = load_tensors(result.manifest['checkpoint'])
        self.assertEqual(int(arrays['meta.step'][0]), 4)
        record = TrainingRun.objects.get(run_dir=str(result.run_dir))
        self.assertEqual(record.status, 'completed')
        self.assertEqual(record.end_step, 4)

    def test_seed_flag_changes_run(self):
        first = run_service.run('pretrain', overrides=self.tiny(steps=1))
        second = run_service.run('pretrain', overrides=self.tiny(steps=1), seed=5)
        self.assertEqual(second.manifest['seed'], 5)
        self.assertNotEqual(first.run_dir, second.run_dir)

    def test_resume_matches_uninterrupted_run(self):
        overrides = self.tiny()
        result = run_service.run('pretrain', overrides=overrides)
        run_dir = run_service.RunDirectory(result.run_dir)
        final = run_dir.checkpoint_path(4)
        expected = load_tensors(final)
        expected_metrics = run_dir.read_rows('metrics')

        # interrupted after the step-2 checkpoint
        final.unlink()
        resumed = run_service.run('pretrain', overrides=overrides, resume=True)
        self.assertTrue(resumed.ok, resumed.error)
        self.assertEqual(resumed.summary['end_step'], 4)
        restored = load_tensors(final)
        self.assertEqual(sorted(restored), sorted(expected))
        for key, value in expected.items():
            np.testing.assert_array_equal(restored[key], value, err_msg=key)
        pd.testing.assert_frame_equal(run_dir.read_rows('metrics'), expected_metrics)
        self.assertEqual(list(run_dir.read_rows('monitor')['step']), [2, 4])

    def test_resuming_a_finished_run_is_a_no_op(self):
        overrides = self.tiny(steps=2)
        result = run_service.run('pretrain', overrides=overrides)
        again = run_service.run('pretrain', overrides=overrides, resume=True)
        self.assertTrue(again.ok)
        self.assertEqual(again.summary['end_step'], 2)
        self.assertIsNone(again.summary['final_total'])
        self.assertEqual(len(run_service.RunDirectory(result.run_dir).read_rows('metrics')), 2)
        self.assertEqual(TrainingRun.objects.filter(run_dir=str(result.run_dir)).count(), 1)


class LineageRunTests(TempRunsMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.pretrain = run_service.run('pretrain', overrides=self.tiny())
        self.assertTrue(self.pretrain.ok, self.pretrain.error)
        self.checkpoint = self.pretrain.manifest['checkpoint']

    def test_refine_continues_parent_with_default_gram_teacher(self):
        result = run_service.run('refine', overrides=self.tiny(from_checkpoint=self.checkpoint))
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.summary['start_step'], 4)
        self.assertEqual(result.summary['end_step'], 8)
        # 20% of a 4-step parent falls before its first checkpoint
        self.assertTrue(result.manifest['gram_checkpoint'].endswith('step_0000002.dnv3'))
        self.assertEqual(result.manifest['parent_run_dir'], str(self.pretrain.run_dir))
        metrics = run_service.RunDirectory(result.run_dir).read_rows('metrics')
        self.assertEqual(list(metrics['step']), [4, 5, 6, 7])
        self.assertTrue((metrics['gram'] >= 0).all())

        parent = TrainingRun.objects.get(run_dir=str(self.pretrain.run_dir))
        child = TrainingRun.objects.get(run_dir=str(result.run_dir))
        self.assertEqual(child.parent, parent)
        self.assertEqual(TrainingRunSerializer(child).data['lineage'], [parent.id])

    def test_explicit_gram_checkpoint(self):
        gram = str(run_service.RunDirectory(self.pretrain.run_dir).checkpoint_path(4))
        result = run_service.run('refine', overrides=self.tiny(from_checkpoint=self.checkpoint,
                                                              gram_checkpoint=gram, steps=2))
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.manifest['gram_checkpoint'], gram)

    def test_hires_adapt_and_phase_order(self):
        result = run_service.run('hires-adapt', overrides=self.tiny(from_checkpoint=self.checkpoint, steps=2,
                                                                   checkpoint_every=1))
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.summary['end_step'], 6)
        self.assertEqual(result.manifest['gram_checkpoint'], str(run_service.RunDirectory(
            self.pretrain.run_dir).checkpoint_path(4)))

        refined = run_service.run('refine', overrides=self.tiny(from_checkpoint=result.manifest['checkpoint']))
        self.assertEqual(refined.exit_code, 4)
        self.assertIn('cannot continue a hires-adapt run', refined.error)

    def test_missing_checkpoint_file(self):
        result = run_service.run('refine', overrides=self.tiny(from_checkpoint=str(self.runs_root / 'gone.dnv3')))
        self.assertEqual(result.exit_code, 4)

    def test_default_gram_checkpoint_picks_latest_before_target(self):
        manifest = self.pretrain.manifest
        run_dir = run_service.RunDirectory(self.pretrain.run_dir)
        picked = run_service.default_gram_checkpoint(run_dir.path, manifest, {'gram_source_step': 3})
        self.assertEqual(picked, run_dir.checkpoint_path(2))
        picked = run_service.default_gram_checkpoint(run_dir.path, manifest, {'gram_source_step': 4})
        self.assertEqual(picked, run_dir.checkpoint_path(4))

    def test_distill_writes_student_checkpoints(self):
        roster = self.runs_root / 'roster.txt'
        roster.write_text('a, 1, 16, 1\nb, 1, 8, 2\n', encoding='utf-8')
        result = run_service.run('distill', overrides=self.tiny(from_checkpoint=self.checkpoint, roster=str(roster)))
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.summary['students'], ['a', 'b'])
        self.assertEqual(result.summary['end_step'], 4)
        run_dir = run_service.RunDirectory(result.run_dir)
        for name in ('a', 'b'):
            self.assertEqual([step for step, _ in run_dir.checkpoints(name)], [2, 4])
        metrics = run_dir.read_rows('metrics')
        self.assertEqual(sorted(metrics['student'].unique()), ['a', 'b'])
        self.assertEqual(len(metrics), 8)

        # a distilled student can be probed directly
        student = str(run_dir.checkpoint_path(4, 'a'))
        probed = run_service.run('probe', overrides=self.tiny(from_checkpoint=student, probe_dense=False))
        self.assertTrue(probed.ok, probed.error)
        self.assertEqual(set(probed.summary), {'knn', 'linear_cls'})

    def test_probe(self):
        result = run_service.run('probe', overrides=self.tiny(from_checkpoint=self.checkpoint, image_size=64))
        self.assertTrue(result.ok, result.error)
        self.assertEqual(set(result.summary), {'knn', 'linear_cls', 'linear_dense'})
        for value in result.summary.values():
            self.assertTrue(0.0 <= value <= 1.0)
        saved = json.loads((result.run_dir / 'probe_results.json').read_text())
        self.assertEqual([entry['task'] for entry in saved], ['knn', 'linear_cls', 'linear_dense'])

    def test_probe_oversized_split_exits_2(self):
        result = run_service.run('probe', overrides=self.tiny(from_checkpoint=self.checkpoint,
                                                             probe_train_size=20, probe_test_size=8))
        self.assertEqual(result.exit_code, 2)
        self.assertEqual(result.manifest['status'], 'failed')

    def test_diagnose(self):
        result = run_service.run('diagnose', overrides=self.tiny(from_checkpoint=self.checkpoint, image_upscale=2))
        self.assertTrue(result.ok, result.error)
        images = result.run_dir / 'images'
        for name in ('input.ppm', 'cosine_r2_c2.pgm', 'pca.ppm', 'patch_norms.pgm'):
            self.assertTrue((images / name).is_file(), name)
        self.assertEqual(read_image(images / 'pca.ppm').shape, (8, 8, 3))
        self.assertIn('locality', result.summary)
        self.assertIn('highres_locality', result.summary)
        self.assertTrue(-1.0 <= result.summary['cls_patch_cosine'] <= 1.0)
        metrics = run_service.RunDirectory(result.run_dir).read_rows('metrics')
        self.assertTrue((metrics['checkpoint'] == 'step_0000004.dnv3').all())
        self.assertTrue((metrics['layer'] == 1).all())


class ToolRunTests(TempRunsMixin, TestCase):
    def test_simulate_distill(self):
        result = run_service.run('simulate-distill', overrides=self.tiny())
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.summary['allocation'], [2, 4])
        self.assertTrue((result.run_dir / 'plan.csv').is_file())
        timeline = pd.read_csv(result.run_dir / 'timeline.csv')
        self.assertFalse(timeline.empty)
        metrics = run_service.RunDirectory(result.run_dir).read_rows('metrics')
        self.assertEqual(list(metrics['metric']), ['makespan', 'iteration_time', 'teacher_share', 'idle_total'])
        plan = pd.read_csv(result.run_dir / 'plan.csv')
        self.assertAlmostEqual(plan['iteration_time'].iloc[0], timeline['end'].max())

    def test_curate_and_train_on_the_index(self):
        result = run_service.run('curate', overrides=self.tiny())
        self.assertTrue(result.ok, result.error)
        self.assertEqual(result.summary['sampled'], 8)
        self.assertGreaterEqual(result.summary['top_entropy'] + 1e-12, result.summary['iid_top_entropy'])
        indices = read_index_file(result.summary['index_file'])
        self.assertEqual(len(indices), 8)
        self.assertEqual(len(set(indices)), 8)
        self.assertTrue(all(0 <= i < TINY_CONFIG['dataset_size'] for i in indices))
        self.assertTrue((result.run_dir / 'curation_report.csv').is_file())

        trained = run_service.run('pretrain', overrides=self.tiny(steps=2, curated_index=result.summary['index_file']))
        self.assertTrue(trained.ok, trained.error)


def _set_args(**overrides):
    """--set flags for the tiny config; a None override leaves the key out."""
    return [f'--set={key}={value}' for key, value in {**TINY_CONFIG, **overrides}.items() if value is not None]


class CommandTests(TempRunsMixin, TestCase):
    def test_pretrain_command(self):
        out = StringIO()
        call_command('pretrain', '--steps', '2', *_set_args(steps=None), stdout=out)
        output = out.getvalue()
        self.assertIn('DINOLAB PRETRAIN', output)
        self.assertIn('pretrain completed', output)
        self.assertIn('end_step: 2', output)

    def test_lineage_failure_maps_to_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('refine', *_set_args(), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 4)

    def test_config_failure_maps_to_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('pretrain', '--set=bogus=1', stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_umbrella_command(self):
        out = StringIO()
        call_command('dinolab', 'simulate_distill', *_set_args(), stdout=out)
        self.assertIn('simulate-distill completed', out.getvalue())
        self.assertIn('allocation: [2, 4]', out.getvalue())

    def test_gradcheck_command(self):
        out = StringIO()
        call_command('gradcheck', '--list', stdout=out)
        self.assertIn('composite_loss', out.getvalue().split())
        out = StringIO()
        call_command('gradcheck', '--case', 'matmul', stdout=out)
        self.assertIn('All 1 gradient checks passed', out.getvalue())
        with self.assertRaises(CommandError) as ctx:
            call_command('gradcheck', '--case', 'no_such_op', stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)


class RunApiTests(TempRunsMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.root = TrainingRun.objects.create(subcommand='pretrain', run_dir='/runs/pretrain-a',
                                               config_hash='aa' * 32, status='completed', end_step=100)
        self.child = TrainingRun.objects.create(subcommand='refine', run_dir='/runs/refine-b',
                                                config_hash='bb' * 32, status='failed', exit_code=3,
                                                parent=self.root)

    def test_list_filters_and_pages(self):
        response = self.client.get(reverse('run_list'))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json()['count'], 2)

        data = self.client.get(reverse('run_list'), {'subcommand': 'refine'}).json()
        self.assertEqual([run['id'] for run in data['data']], [self.child.id])
        data = self.client.get(reverse('run_list'), {'status': 'completed'}).json()
        self.assertEqual([run['id'] for run in data['data']], [self.root.id])
        data = self.client.get(reverse('run_list'), {'search': 'bbbb'}).json()
        self.assertEqual(data['count'], 1)
        data = self.client.get(reverse('run_list'), {'page_size': 1, 'page': 5}).json()
        self.assertEqual(data['total_pages'], 2)
        self.assertEqual(data['page'], 2)
        self.assertEqual(self.client.get(reverse('run_list'), {'page': 'x'}).status_code, 400)

    def test_detail(self):
        response = self.client.get(reverse('run_detail', args=[self.child.id]))
        self.assertEqual(response.status_code, 200)
        body = response.json()
        self.assertEqual(body['parent'], self.root.id)
        self.assertEqual(body['lineage'], [self.root.id])
        self.assertEqual(body['exit_code'], 3)
        response = self.client.get(reverse('run_detail', args=[9999]))
        self.assertEqual(response.status_code, 404)
        self.assertEqual(response.json(), {'error': 'Run not found'})

    def test_metrics(self):
        result = run_service.run('simulate-distill', overrides=self.tiny())
        record = TrainingRun.objects.get(run_dir=str(result.run_dir))
        url = reverse('run_metrics', args=[record.id])
        body = self.client.get(url).json()
        self.assertEqual(body['columns'], ['metric', 'value'])
        self.assertEqual(body['count'], 3)
        body = self.client.get(url, {'tail': 1}).json()
        self.assertEqual([row['metric'] for row in body['rows']], ['idle_total'])
        self.assertEqual(self.client.get(url, {'tail': 'x'}).status_code, 400)
        self.assertEqual(self.client.get(reverse('run_metrics', args=[9999])).status_code, 404)

    def test_metrics_of_a_run_without_files(self):
        body = self.client.get(reverse('run_metrics', args=[self.root.id])).json()
        self.assertEqual(body, {'columns': [], 'rows': [], 'count': 0})
