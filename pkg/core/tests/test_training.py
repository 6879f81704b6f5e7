from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigError, DimensionError, LineageError
from core.services.crop_service import (ADAPTATION_TRIPLES, CropConfig, adaptation_config, build_crop_batch,
                                        draw_resolution_triple, mask_plan, scaled_triples)
from core.services.dataset_service import DatasetConfig, SyntheticShapes, shape_multisets
from core.services.head_service import HeadConfig
from core.services.optim_service import param_groups
from core.services.run_service import resolve_config
from core.services.training_service import (BatchSource, GramTeacherPolicy, GramTeacherState, MixSamplerConfig,
                                            ScheduleConfig, Trainer, default_gram_source_step, ema_update,
                                            gram_teacher_features, init_models, layer_lr, next_batch,
                                            pretrain_step, refine_step, schedule, schedule_config_from)
from core.services.vit_service import ViTConfig, forward, init_vit
from core.utils.seeding import derive_rng

from .helpers import TINY_CONFIG

TINY_VIT = ViTConfig(depth=2, embed_dim=8, ffn_hidden_dim=8, head_count=2, head_dim=4, patch_size=4,
                     register_count=1)


class ScheduleTests(SimpleTestCase):
    def setUp(self):
        self.config = ScheduleConfig.scaled(100)

    def test_scaled_lengths(self):
        self.assertEqual(self.config.warmup_steps, 1000)
        self.assertEqual(self.config.total_steps, 10000)
        self.assertEqual(ScheduleConfig.scaled(100, warmup_steps=5).warmup_steps, 5)

    def test_linear_warmup_then_constant(self):
        self.assertEqual(schedule(0, self.config).lr, 0.0)
        self.assertAlmostEqual(schedule(500, self.config).lr, 2e-4)
        self.assertAlmostEqual(schedule(1000, self.config).lr, 4e-4)
        self.assertAlmostEqual(schedule(5000, self.config).lr, 4e-4)

    def test_teacher_temperature_ramp(self):
        self.assertAlmostEqual(schedule(0, self.config).teacher_temp, 0.04)
        self.assertAlmostEqual(schedule(500, self.config).teacher_temp, 0.055)
        self.assertAlmostEqual(schedule(2000, self.config).teacher_temp, 0.07)

    def test_constants(self):
        values = schedule(3000, self.config)
        self.assertEqual(values.weight_decay, 0.04)
        self.assertEqual(values.momentum, 0.999)

    def test_layerwise_decay(self):
        self.assertEqual(layer_lr(1.0, 4, 4, 0.5), 1.0)
        self.assertEqual(layer_lr(1.0, 0, 4, 0.5), 0.0625)

    def test_run_config_zero_warmup_is_kept(self):
        zero = schedule_config_from(resolve_config(overrides={**TINY_CONFIG, 'warmup_steps': 0}))
        self.assertEqual(zero.warmup_steps, 0)
        self.assertAlmostEqual(schedule(0, zero).lr, 4e-4)
        scaled = schedule_config_from(resolve_config(overrides=TINY_CONFIG))
        self.assertEqual((scaled.warmup_steps, scaled.total_steps), (1000, 10000))

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            ScheduleConfig(warmup_steps=20, total_steps=10).validate()
        with self.assertRaises(ConfigError):
            ScheduleConfig.scaled(0)


class EmaTests(SimpleTestCase):
    def setUp(self):
        self.student = init_vit(TINY_VIT, np.random.default_rng(0))
        self.teacher = init_vit(TINY_VIT, np.random.default_rng(1))

    def test_momentum_one_keeps_teacher(self):
        before = self.teacher.arrays()['patch_embed.weight'].copy()
        ema_update(self.teacher, self.student, 1.0)
        np.testing.assert_array_equal(self.teacher.params['patch_embed.weight'].data, before)

    def test_momentum_zero_copies_student(self):
        ema_update(self.teacher, self.student, 0.0)
        np.testing.assert_array_equal(self.teacher.params['cls_token'].data, self.student.params['cls_token'].data)

    def test_blend(self):
        t0 = self.teacher.params['cls_token'].data.copy()
        s = self.student.params['cls_token'].data
        ema_update(self.teacher, self.student, 0.75)
        np.testing.assert_allclose(self.teacher.params['cls_token'].data, 0.75 * t0 + 0.25 * s, rtol=1e-6)

    def test_distance_shrinks_by_momentum_power(self):
        def distance():
            return np.sqrt(sum(float(((t.data - self.student.params[name].data) ** 2).sum())
                               for name, t in self.teacher.named_parameters()))

        start = distance()
        for _ in range(6):
            ema_update(self.teacher, self.student, 0.8)
        self.assertAlmostEqual(distance() / start, 0.8 ** 6, delta=1e-4)

    def test_structure_and_range_checks(self):
        other = init_vit(replace(TINY_VIT, depth=1), np.random.default_rng(2))
        with self.assertRaises(DimensionError):
            ema_update(self.teacher, other, 0.5)
        with self.assertRaises(ConfigError):
            ema_update(self.teacher, self.student, 1.5)


class GramPolicyTests(SimpleTestCase):
    def test_refresh_schedule(self):
        policy = GramTeacherPolicy(refresh_interval=2, max_refreshes=2)
        refreshes, due = 0, []
        for phase_step in range(10):
            if policy.refresh_due(phase_step, refreshes):
                refreshes += 1
                due.append(phase_step)
        self.assertEqual(due, [1, 3])

    def test_disabled_policy_never_refreshes(self):
        self.assertFalse(GramTeacherPolicy(refresh_interval=1, enabled=False).refresh_due(0, 0))
        self.assertFalse(GramTeacherPolicy(refresh_interval=0).refresh_due(0, 0))

    def test_default_source_step(self):
        self.assertEqual(default_gram_source_step(200), 40)
        self.assertEqual(default_gram_source_step(4), 1)

    def test_invalid_factor(self):
        with self.assertRaises(ConfigError):
            GramTeacherPolicy(highres_factor=0).validate()


class MixSamplerTests(SimpleTestCase):
    def setUp(self):
        self.parts = {'curated': np.arange(0, 10), 'web': np.arange(10, 50), 'extra': np.arange(50, 60)}

    def test_homogeneous_frequency(self):
        sampler = MixSamplerConfig(p_homogeneous=0.3)
        rng = np.random.default_rng(0)
        batches = [next_batch(sampler, self.parts, 4, rng) for _ in range(2000)]
        frequency = np.mean([b.homogeneous for b in batches])
        self.assertAlmostEqual(frequency, 0.3, delta=0.04)
        for batch in batches:
            if batch.homogeneous:
                self.assertTrue((batch.indices < 10).all())
            else:
                self.assertNotIn('curated', batch.parts)

    def test_weights_steer_heterogeneous_batches(self):
        sampler = MixSamplerConfig(p_homogeneous=0.0, weights={'web': 1.0, 'extra': 0.0})
        batch = next_batch(sampler, self.parts, 16, np.random.default_rng(1))
        self.assertEqual(set(batch.parts), {'web'})
        self.assertTrue(((batch.indices >= 10) & (batch.indices < 50)).all())

    def test_invalid_weights(self):
        with self.assertRaises(ConfigError):
            MixSamplerConfig(weights={'web': 0.5}).validate()
        with self.assertRaises(ConfigError):
            next_batch(MixSamplerConfig(p_homogeneous=0.0, weights={'nope': 1.0}), self.parts, 2,
                       np.random.default_rng(0))
        with self.assertRaises(ConfigError):
            next_batch(MixSamplerConfig(), {}, 2, np.random.default_rng(0))


class CropTests(SimpleTestCase):
    def setUp(self):
        self.images = SyntheticShapes(DatasetConfig(image_size=32, length=3)).images(range(3))

    def test_batch_layout(self):
        config = CropConfig(global_size=16, local_size=8, n_local=3, patch_size=8, gram_size=32)
        batch = build_crop_batch(self.images, [0, 1, 2], config, np.random.default_rng(0))
        self.assertEqual(batch.global_crops.shape, (2, 3, 16, 16, 3))
        self.assertEqual(batch.local_crops.shape, (3, 3, 8, 8, 3))
        self.assertEqual(batch.gram_crops.shape, (2, 3, 32, 32, 3))
        self.assertEqual(batch.masks.shape, (2, 3, 4))
        self.assertEqual(batch.batch_size, 3)

    def test_crops_are_deterministic_per_stream(self):
        config = CropConfig(global_size=16, local_size=8, n_local=1, patch_size=8)
        a = build_crop_batch(self.images, [0, 1, 2], config, derive_rng(3, 'crops', 7))
        b = build_crop_batch(self.images, [0, 1, 2], config, derive_rng(3, 'crops', 7))
        np.testing.assert_array_equal(a.global_crops, b.global_crops)
        np.testing.assert_array_equal(a.masks, b.masks)

    def test_mask_plan(self):
        rng = np.random.default_rng(0)
        self.assertFalse(mask_plan(rng, 16, probability=0.0).any())
        for _ in range(50):
            count = mask_plan(rng, 16, probability=1.0, ratio=(0.25, 0.5)).sum()
            self.assertTrue(4 <= count <= 8)

    def test_invalid_geometry(self):
        with self.assertRaises(ConfigError):
            CropConfig(global_size=12, patch_size=8).validate()


class AdaptationTripleTests(SimpleTestCase):
    def test_probabilities_sum_to_one(self):
        self.assertAlmostEqual(sum(p for _, p in ADAPTATION_TRIPLES), 1.0)

    def test_scaled_triples_round_to_patches(self):
        triples = scaled_triples(8, 8)
        self.assertEqual(triples[0][0], (64, 16, 96))
        for sizes, _ in triples:
            self.assertTrue(all(side % 8 == 0 for side in sizes))

    def test_draw_frequencies(self):
        triples = scaled_triples(8, 8)
        rng = np.random.default_rng(0)
        draws = [draw_resolution_triple(rng, triples) for _ in range(4000)]
        share = draws.count(triples[0][0]) / len(draws)
        self.assertAlmostEqual(share, 0.3, delta=0.03)

    def test_adaptation_config(self):
        config = adaptation_config(CropConfig(patch_size=8), (64, 16, 96))
        self.assertEqual((config.global_size, config.local_size, config.gram_size), (64, 16, 96))


class DatasetTests(SimpleTestCase):
    def test_scenes_are_reproducible(self):
        a, b = SyntheticShapes(DatasetConfig(image_size=32, length=4), seed=5), \
            SyntheticShapes(DatasetConfig(image_size=32, length=4), seed=5)
        np.testing.assert_array_equal(a[2].image, b[2].image)
        self.assertEqual(a[2].image.shape, (32, 32, 3))

    def test_labels_and_parts(self):
        dataset = SyntheticShapes(DatasetConfig(image_size=32, length=12))
        self.assertEqual(dataset.class_count, len(shape_multisets(3)))
        labels = dataset.labels()
        self.assertTrue(((labels >= 0) & (labels < dataset.class_count)).all())
        covered = np.sort(np.concatenate(list(dataset.shape_count_parts().values())))
        np.testing.assert_array_equal(covered, np.arange(12))

    def test_index_out_of_range(self):
        with self.assertRaises(IndexError):
            SyntheticShapes(DatasetConfig(image_size=32, length=2))[2]


class OptimizerGroupTests(SimpleTestCase):
    def test_decay_and_layer_scales(self):
        models = init_models(TINY_VIT, HeadConfig(hidden_dim=8, bottleneck_dim=4, prototype_count=4, layer_count=2),
                             np.random.default_rng(0))
        specs = param_groups(models.trainable_trees(), layerwise_decay=0.5)
        self.assertEqual(specs['student/patch_embed.weight'].lr_scale, 0.25)
        self.assertEqual(specs['student/blocks.1.attn.qkv.weight'].lr_scale, 1.0)
        self.assertFalse(specs['student/norm.weight'].apply_wd)
        self.assertTrue(specs['student/blocks.0.mlp.w3.weight'].apply_wd)
        self.assertFalse(specs['dino_head/prototypes'].apply_wd)
        self.assertEqual(models.dino_head.config.in_dim, TINY_VIT.embed_dim)


class TrainingStepTests(SimpleTestCase):
    def setUp(self):
        self.options = resolve_config(overrides={**TINY_CONFIG, 'warmup_steps': 0, 'base_lr': 1e-3,
                                                 'gram_highres_factor': 1})
        self.batch = Trainer(self.options).make_batch(0)

    def test_loss_falls_on_a_fixed_batch(self):
        trainer = Trainer(self.options)
        totals = [pretrain_step(trainer.models, trainer.optimizer, self.batch, trainer.schedule_config, step,
                                trainer.settings).total for step in range(50)]
        self.assertLess(np.mean(totals[-5:]), np.mean(totals[:5]))
        self.assertLess(totals[-1], totals[0])

    def test_zero_gram_weight_refine_matches_pretrain(self):
        plain, anchored = Trainer(self.options), Trainer(self.options)
        gram = GramTeacherState(state=anchored.models.teacher.copy(requires_grad=False))
        policy = GramTeacherPolicy(refresh_interval=0)
        expected = [pretrain_step(plain.models, plain.optimizer, self.batch, plain.schedule_config, step,
                                  plain.settings).total for step in range(3)]
        refined = [refine_step(anchored.models, gram, anchored.optimizer, self.batch, anchored.schedule_config,
                               step, anchored.settings, policy, phase_step=step).total for step in range(3)]
        self.assertEqual(anchored.settings.weights.gram, 0.0)
        self.assertEqual(refined, expected)

    def test_unit_highres_factor_anchors_on_the_global_crops(self):
        batch = BatchSource(self.options, 'refine').make_batch(0)
        self.assertIsNone(batch.gram_crops)
        teacher = Trainer(self.options).models.teacher
        targets = gram_teacher_features(teacher, batch, (2, 2))
        same_resolution = gram_teacher_features(teacher, replace(batch, gram_crops=batch.global_crops), (2, 2))
        np.testing.assert_array_equal(targets, same_resolution)
        flat = batch.global_crops.reshape(-1, *batch.global_crops.shape[2:])
        patches = forward(teacher, flat, crop_kind='global').patches.data
        np.testing.assert_allclose(targets, patches / np.linalg.norm(patches, axis=-1, keepdims=True),
                                   rtol=1e-5, atol=1e-6)


class TrainerTests(SimpleTestCase):
    def setUp(self):
        self.options = resolve_config(overrides={**TINY_CONFIG, 'steps': 2, 'warmup_steps': 1})

    def test_same_seed_same_losses(self):
        first = Trainer(self.options).run(2, log_every=0)
        second = Trainer(self.options).run(2, log_every=0)
        self.assertEqual([r.total for r in first], [r.total for r in second])

    def test_resume_matches_uninterrupted_run(self):
        straight = Trainer(self.options)
        straight.run(3, log_every=0)
        interrupted = Trainer(self.options)
        interrupted.run(1, log_every=0)
        arrays = {k: v.copy() for k, v in interrupted.checkpoint_arrays().items()}
        resumed = Trainer(self.options)
        resumed.restore(arrays)
        resumed.run(3, log_every=0)
        expected = straight.checkpoint_arrays()
        for key, value in resumed.checkpoint_arrays().items():
            np.testing.assert_array_equal(value, expected[key], err_msg=key)

    def test_refine_needs_lineage(self):
        with self.assertRaises(LineageError):
            Trainer(self.options, 'refine').run(1)
        with self.assertRaises(ConfigError):
            Trainer(self.options, 'distill')

    def test_refine_adds_gram_term(self):
        parent = Trainer(self.options)
        parent.run(2, log_every=0)
        arrays = parent.checkpoint_arrays()
        refine = Trainer(self.options, 'refine')
        refine.load_parent(arrays)
        refine.load_gram_teacher(arrays)
        reports = refine.run(2, log_every=0)
        self.assertEqual(refine.step, 4)
        self.assertEqual([r.step for r in reports], [2, 3])
        self.assertTrue(all(r.gram >= 0 for r in reports))
        self.assertTrue(np.isfinite(reports[-1].total))

    def test_parent_with_other_backbone_rejected(self):
        parent = Trainer(self.options)
        arrays = parent.checkpoint_arrays()
        other = Trainer(resolve_config(overrides={**TINY_CONFIG, 'depth': 2}), 'refine')
        with self.assertRaises(LineageError):
            other.load_parent(arrays)
