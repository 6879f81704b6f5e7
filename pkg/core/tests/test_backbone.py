from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigError, GeometryError
from core.services.head_service import HeadConfig, head_config_from_arrays, head_forward, init_head
from core.services.vit_service import (ViTConfig, attention, extract_layer_features, forward, init_vit,
                                       param_layer_id)
from core.utils.rope import apply_rope, patch_coordinates, sample_jitter_scale
from core.utils.tensor import Tensor, no_grad, precision

SMALL = ViTConfig(depth=2, embed_dim=16, ffn_hidden_dim=32, head_count=2, head_dim=8, patch_size=4,
                  register_count=2)


def images(n=2, size=16, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3)).astype(np.float32)


class ViTConfigTests(SimpleTestCase):
    def test_embed_dim_must_split_into_heads(self):
        with self.assertRaises(ConfigError):
            replace(SMALL, embed_dim=18).validate()

    def test_registers_strategy_needs_registers(self):
        with self.assertRaises(ConfigError):
            replace(SMALL, register_count=0).validate()

    def test_head_dim_must_allow_two_axis_rope(self):
        with self.assertRaises(ConfigError):
            ViTConfig(embed_dim=12, head_count=2, head_dim=6).validate()

    def test_text_round_trip(self):
        self.assertEqual(ViTConfig.from_text(SMALL.to_text()), SMALL)

    def test_separate_output_norms_add_one_norm(self):
        rng = np.random.default_rng(0)
        shared = init_vit(replace(SMALL, separate_output_norms=False), rng)
        separate = init_vit(SMALL, np.random.default_rng(0))
        self.assertEqual(separate.parameter_count() - shared.parameter_count(), 2 * SMALL.embed_dim)

    def test_layer_ids(self):
        self.assertEqual(param_layer_id('patch_embed.weight', 4), 0)
        self.assertEqual(param_layer_id('blocks.2.attn.qkv.weight', 4), 3)
        self.assertEqual(param_layer_id('norm.weight', 4), 4)


class ForwardTests(SimpleTestCase):
    def setUp(self):
        self.state = init_vit(SMALL, np.random.default_rng(1))

    def test_output_shapes(self):
        with no_grad():
            out = forward(self.state, images(3))
        self.assertEqual(out.cls.shape, (3, 16))
        self.assertEqual(out.registers.shape, (3, 2, 16))
        self.assertEqual(out.patches.shape, (3, 16, 16))
        self.assertEqual(out.grid, (4, 4))
        self.assertEqual(out.token_count, 1 + 2 + 16)

    def test_image_side_must_divide_patch(self):
        with self.assertRaises(GeometryError):
            forward(self.state, images(1, size=18))

    def test_single_image_is_a_batch_of_one(self):
        with no_grad():
            single = forward(self.state, images(1)[0])
            batch = forward(self.state, images(1))
        np.testing.assert_array_equal(single.cls.data, batch.cls.data)

    def test_fully_masked_inputs_lose_image_content(self):
        mask = np.ones(16, dtype=bool)
        with no_grad():
            a = forward(self.state, images(1, seed=1), mask=mask)
            b = forward(self.state, images(1, seed=2), mask=mask)
        np.testing.assert_allclose(a.cls.data, b.cls.data, atol=1e-6)

    def test_local_crops_use_their_own_norm(self):
        self.state.params['local_norm.bias'].data[:] = 5.0
        with no_grad():
            global_out = forward(self.state, images(1), crop_kind='global')
            local_out = forward(self.state, images(1), crop_kind='local')
        self.assertFalse(np.allclose(global_out.cls.data, local_out.cls.data))

    def test_layer_features(self):
        with no_grad():
            first = extract_layer_features(self.state, images(1), 1)
            last = extract_layer_features(self.state, images(1), 2, apply_norm=True)
            out = forward(self.state, images(1))
        self.assertEqual(first.shape, (1, 16, 16))
        np.testing.assert_allclose(last.data, out.patches.data, atol=1e-6)
        with self.assertRaises(ConfigError):
            extract_layer_features(self.state, images(1), 3)

    def test_outlier_strategies_create_their_parameters(self):
        bias = init_vit(replace(SMALL, outlier_strategy='attention_bias', register_count=0),
                        np.random.default_rng(0))
        gating = init_vit(replace(SMALL, outlier_strategy='value_gating', register_count=0),
                          np.random.default_rng(0))
        self.assertIn('blocks.0.attn.k_bias', bias.params)
        self.assertIn('blocks.0.attn.v_bias', gating.params)
        self.assertNotIn('blocks.0.attn.k_bias', gating.params)
        with no_grad():
            self.assertEqual(forward(bias, images(1)).patches.shape, (1, 16, 16))
            self.assertEqual(forward(gating, images(1)).patches.shape, (1, 16, 16))


class AttentionTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.q, self.k, self.v = (Tensor(rng.standard_normal((2, 5, 4)), dtype=np.float64) for _ in range(3))

    def test_weights_are_row_stochastic(self):
        _, weights = attention(self.q, self.k, self.v, return_weights=True)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_attention_bias_adds_one_slot(self):
        slot = Tensor(np.zeros((2, 1, 4)), dtype=np.float64)
        _, weights = attention(self.q, self.k, self.v, 'attention_bias', k_bias=slot, v_bias=slot,
                               return_weights=True)
        self.assertEqual(weights.shape, (2, 5, 6))

    def test_value_gating_shifts_output(self):
        shift = Tensor(np.ones((2, 1, 4)), dtype=np.float64)
        plain = attention(self.q, self.k, self.v)
        gated = attention(self.q, self.k, self.v, 'value_gating', v_bias=shift)
        np.testing.assert_allclose(gated.data - plain.data, 1.0, atol=1e-12)

    def test_missing_strategy_parameters(self):
        with self.assertRaises(ConfigError):
            attention(self.q, self.k, self.v, 'value_gating')


class RopeTests(SimpleTestCase):
    def test_rotation_preserves_norms(self):
        with precision(np.float64):
            x = Tensor(np.random.default_rng(0).standard_normal((4, 8)))
            rotated = apply_rope(x, patch_coordinates(2, 2), jitter_scale=1.7)
        np.testing.assert_allclose(np.linalg.norm(rotated.data, axis=-1), np.linalg.norm(x.data, axis=-1))

    def test_scores_depend_on_relative_position(self):
        rng = np.random.default_rng(1)
        q, k = rng.standard_normal(8), rng.standard_normal(8)
        coords = np.array([[0.1, -0.3], [0.4, 0.2]])
        shifted = coords + np.array([0.25, -0.5])
        with precision(np.float64):
            def score(c):
                rq = apply_rope(Tensor(q[None]), c[:1]).data[0]
                rk = apply_rope(Tensor(k[None]), c[1:]).data[0]
                return rq @ rk
            self.assertAlmostEqual(score(coords), score(shifted), places=10)

    def test_jitter_scale_is_log_uniform_in_range(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_jitter_scale(rng, 0.5, 2.0) for _ in range(2000)])
        self.assertTrue(((draws >= 0.5) & (draws <= 2.0)).all())
        self.assertAlmostEqual(float(np.median(np.log(draws))), 0.0, delta=0.1)
        self.assertEqual(sample_jitter_scale(rng, 1.0, 1.0), 1.0)

    def test_scale_outside_range_rejected(self):
        with self.assertRaises(ValueError):
            apply_rope(Tensor(np.zeros((4, 8))), patch_coordinates(2, 2), 3.0, jitter_range=(0.5, 2.0))


class HeadTests(SimpleTestCase):
    def test_scores_are_cosines_against_unit_prototypes(self):
        config = HeadConfig(in_dim=16, hidden_dim=32, bottleneck_dim=8, prototype_count=10, layer_count=3)
        head = init_head(config, np.random.default_rng(0))
        with no_grad():
            scores = head_forward(head, Tensor(np.random.default_rng(1).standard_normal((4, 16))))
        self.assertEqual(scores.shape, (4, 10))
        self.assertTrue((np.abs(scores.data) <= 1 + 1e-5).all())

    def test_config_recovered_from_arrays(self):
        config = HeadConfig(in_dim=16, hidden_dim=32, bottleneck_dim=8, prototype_count=10, layer_count=3)
        head = init_head(config, np.random.default_rng(0))
        self.assertEqual(head_config_from_arrays(head.arrays()), config)
