import shutil
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigError, GeometryError
from core.services.diagnostics_service import (FeatureMap, chebyshev_distances, cls_patch_cosine, cosine_map,
                                               feature_dimension_outliers, highres_smooth, locality_score,
                                               patch_norm_stats, pca_rgb, pca_variant, standardize_features)
from core.services.image_service import pgm_bytes, ppm_bytes, read_image, to_uint8, write_pgm, write_ppm


def feature_map(data, **provenance):
    return FeatureMap(np.asarray(data, dtype=np.float64),
                      {'checkpoint': 'test', 'layer': 1, 'resolution': 0, 'norm_applied': False, **provenance})


def smooth_map(side=6, theta=0.4):
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing='ij')
    return feature_map(np.stack([np.cos(theta * rows), np.sin(theta * rows),
                                 np.cos(theta * cols), np.sin(theta * cols)], axis=-1))


class FeatureMapTests(SimpleTestCase):
    def test_provenance_required(self):
        with self.assertRaises(ConfigError):
            FeatureMap(np.zeros((2, 2, 3)), {'checkpoint': 'x'})
        with self.assertRaises(GeometryError):
            feature_map(np.zeros((4, 3)))

    def test_from_tokens(self):
        f = FeatureMap.from_tokens(np.arange(24.0).reshape(6, 4), (2, 3), checkpoint='c.dnv3', layer=2)
        self.assertEqual(f.grid, (2, 3))
        self.assertEqual(f.dim, 4)
        self.assertEqual(f.provenance['layer'], 2)
        np.testing.assert_array_equal(f.data[1, 0], [12, 13, 14, 15])


class CosineTests(SimpleTestCase):
    def test_reference_is_one(self):
        f = feature_map(np.random.default_rng(0).standard_normal((4, 5, 6)))
        sims = cosine_map(f, (2, 3))
        self.assertEqual(sims.shape, (4, 5))
        self.assertEqual(sims[2, 3], 1.0)
        self.assertTrue((np.abs(sims) <= 1.0).all())

    def test_constant_map(self):
        np.testing.assert_allclose(cosine_map(feature_map(np.ones((3, 3, 2))), (0, 0)), 1.0)

    def test_reference_outside_grid(self):
        with self.assertRaises(GeometryError):
            cosine_map(feature_map(np.ones((3, 3, 2))), (3, 0))

    def test_cls_patch_cosine(self):
        cls = np.array([[1.0, 0.0]])
        patches = np.array([[[2.0, 0.0], [0.0, 1.0]]])
        self.assertAlmostEqual(cls_patch_cosine(cls=cls, patches=patches), 0.5)
        self.assertAlmostEqual(cls_patch_cosine(cls=cls[0], patches=patches[0][:1]), 1.0)


class LocalityTests(SimpleTestCase):
    def test_chebyshev(self):
        dist = chebyshev_distances(2, 3)
        self.assertEqual(dist[0, 5], 2)
        self.assertEqual(dist[0, 4], 1)

    def test_smooth_features_are_local(self):
        self.assertGreater(locality_score(smooth_map()), 0.1)

    def test_constant_features_are_not(self):
        self.assertAlmostEqual(locality_score(feature_map(np.ones((5, 5, 3)))), 0.0)

    def test_scrambling_destroys_locality(self):
        f = smooth_map(8)
        tokens = f.tokens()[np.random.default_rng(1).permutation(64)]
        scrambled = FeatureMap.from_tokens(tokens, (8, 8))
        self.assertLess(locality_score(scrambled), locality_score(f))

    def test_iid_features_score_near_zero(self):
        rng = np.random.default_rng(11)
        scores = [locality_score(feature_map(rng.standard_normal((10, 10, 32)))) for _ in range(20)]
        self.assertLess(abs(np.mean(scores)), 0.02)

    def test_grid_too_small(self):
        with self.assertRaises(GeometryError):
            locality_score(feature_map(np.ones((2, 2, 3))))
        with self.assertRaises(GeometryError):
            locality_score(feature_map(np.ones((4, 4, 3))), radius=2)
        with self.assertRaises(ConfigError):
            locality_score(feature_map(np.ones((4, 4, 3))), radius=0)


class PCATests(SimpleTestCase):
    def test_variants(self):
        self.assertEqual(pca_variant(0), ((0, 1, 2), (1, 1, 1)))
        self.assertEqual(pca_variant(9), ((0, 2, 1), (-1, 1, 1)))
        with self.assertRaises(ConfigError):
            pca_variant(48)

    def test_rendering(self):
        rendering = pca_rgb(feature_map(np.random.default_rng(2).standard_normal((5, 6, 8))))
        self.assertEqual(rendering.image.shape, (5, 6, 3))
        self.assertTrue(((rendering.image >= 0) & (rendering.image <= 1)).all())
        self.assertEqual(len(rendering.scores), 48)
        self.assertEqual(rendering.variant, int(np.argmax(rendering.scores)))
        self.assertEqual(rendering.flagged_channels, [])
        self.assertTrue((np.diff(rendering.explained_variance_ratio) <= 0).all())

    def test_sign_flip_inverts_channel(self):
        f = feature_map(np.random.default_rng(3).standard_normal((4, 4, 5)))
        plain, flipped = pca_rgb(f, variant=0), pca_rgb(f, variant=1)
        np.testing.assert_allclose(flipped.image[..., 0], 1.0 - plain.image[..., 0], atol=1e-12)
        np.testing.assert_allclose(flipped.image[..., 1:], plain.image[..., 1:])

    def test_directions_match_covariance_eigenvectors(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((10, 10, 6)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.25])
        data = data @ np.linalg.qr(rng.standard_normal((6, 6)))[0]
        rendering = pca_rgb(feature_map(data))
        eigenvalues, eigenvectors = np.linalg.eigh(np.cov(data.reshape(-1, 6), rowvar=False))
        top = eigenvectors[:, ::-1][:, :3].T
        np.testing.assert_allclose(np.abs((rendering.components * top).sum(axis=1)), 1.0, atol=1e-8)
        np.testing.assert_allclose(rendering.explained_variance_ratio, eigenvalues[::-1][:3] / eigenvalues.sum(),
                                   rtol=1e-8)

    def test_rank_deficient_channels_flagged(self):
        values = np.linspace(-1, 1, 16)
        data = np.outer(values, [1.0, 2.0, 0.5]).reshape(4, 4, 3)
        rendering = pca_rgb(feature_map(data))
        self.assertEqual(rendering.flagged_channels, [1, 2])
        self.assertTrue((rendering.image[..., 1:] == 0).all())
        self.assertTrue((rendering.components[1:] == 0).all())


class HighresSmoothTests(SimpleTestCase):
    def test_factor_two(self):
        features = np.random.default_rng(4).standard_normal((8, 8, 5))
        out = highres_smooth(features, factor=2)
        self.assertEqual(out.shape, (4, 4, 5))
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, rtol=1e-6)

    def test_constant_map_stays_constant(self):
        out = highres_smooth(np.full((2, 6, 6, 3), 2.0), target_grid=(3, 3))
        np.testing.assert_allclose(out, 1 / np.sqrt(3), rtol=1e-6)

    def test_feature_map_keeps_provenance(self):
        out = highres_smooth(feature_map(np.ones((4, 4, 2)), resolution=64), factor=2)
        self.assertEqual(out.grid, (2, 2))
        self.assertEqual(out.provenance['resolution'], 64)

    def test_smoothed_highres_map_is_at_least_as_local(self):
        def noisy_field(coords, rng):
            rows, cols = np.meshgrid(coords, coords, indexing='ij')
            signal = np.stack([np.cos(0.5 * rows), np.sin(0.5 * rows), np.cos(0.5 * cols), np.sin(0.5 * cols)],
                              axis=-1)
            return feature_map(signal + rng.normal(0, 0.5, signal.shape))

        for seed in range(5):
            rng = np.random.default_rng(seed)
            base = noisy_field(np.arange(8.0), rng)
            # 16x16 samples of the same field, centred on the 8x8 grid after a 2x downsample
            highres = noisy_field((np.arange(16) + 0.5) / 2 - 0.5, rng)
            self.assertGreaterEqual(locality_score(highres_smooth(highres, factor=2)), locality_score(base))

    def test_invalid(self):
        with self.assertRaises(GeometryError):
            highres_smooth(np.ones((7, 8, 2)), factor=2)
        with self.assertRaises(ConfigError):
            highres_smooth(np.ones((8, 8, 2)))


class OutlierStatTests(SimpleTestCase):
    def test_patch_norms(self):
        patches = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [10.0, 0.0]])
        stats = patch_norm_stats(patches)
        self.assertEqual(stats['median'], 1.0)
        self.assertEqual(stats['max'], 10.0)
        self.assertEqual(stats['outlier_fraction'], 0.25)

    def test_dominant_channels(self):
        features = np.ones((10, 6))
        features[:, 4] = 50.0
        np.testing.assert_array_equal(feature_dimension_outliers(features), [4])

    def test_standardize_uses_train_statistics(self):
        train = np.random.default_rng(5).normal(3.0, 2.0, (100, 4))
        scaled_train, scaled_test = standardize_features(train, train[:10])
        np.testing.assert_allclose(scaled_train.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(scaled_train.std(axis=0), 1.0, rtol=1e-5)
        np.testing.assert_allclose(scaled_test, scaled_train[:10])


class ImageExportTests(SimpleTestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_uint8_mapping(self):
        np.testing.assert_array_equal(to_uint8([0.0, 0.5, 1.0, 2.0]), [0, 128, 255, 255])
        np.testing.assert_array_equal(to_uint8([-1.0, 0.0, 1.0], lo=-1, hi=1), [0, 128, 255])

    def test_headers(self):
        self.assertTrue(ppm_bytes(np.zeros((2, 2, 3))).startswith(b'P6'))
        self.assertTrue(pgm_bytes(np.zeros((2, 2))).startswith(b'P5'))
        with self.assertRaises(GeometryError):
            ppm_bytes(np.zeros((2, 2)))
        with self.assertRaises(GeometryError):
            pgm_bytes(np.zeros((2, 2, 3)))

    def test_round_trip_with_upscale(self):
        rgb = np.random.default_rng(6).random((3, 4, 3))
        back = read_image(write_ppm(self.tmp / 'pca.ppm', rgb, upscale=2))
        self.assertEqual(back.shape, (6, 8, 3))
        np.testing.assert_array_equal(back[::2, ::2], to_uint8(rgb))

    def test_cosine_map_export(self):
        grey = read_image(write_pgm(self.tmp / 'cos.pgm', np.array([[-1.0, 1.0]]), lo=-1, hi=1))
        np.testing.assert_array_equal(grey, [[0, 255]])
