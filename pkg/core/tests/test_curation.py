import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from core.exceptions import CurationError
from core.services.curation_service import (balanced_sample, build_hierarchy, iid_sample, kmeans, occupancy_entropy,
                                            pixel_embeddings, split_quota, write_index_file, write_report)
from core.services.training_service import read_index_file


def skewed_points(seed=0):
    """Three well separated 2-D blobs holding 80, 15 and 5 points."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
    sizes = (80, 15, 5)
    points = np.concatenate([c + rng.normal(0, 0.5, (n, 2)) for c, n in zip(centers, sizes)])
    truth = np.repeat(np.arange(3), sizes)
    return points, truth


class KMeansTests(SimpleTestCase):
    def test_one_dimensional_pairs(self):
        result = kmeans([0.0, 1.0, 10.0, 11.0], 2, seed=0)
        np.testing.assert_allclose(np.sort(result.centroids[:, 0]), [0.5, 10.5])
        self.assertEqual(result.labels[0], result.labels[1])
        self.assertNotEqual(result.labels[1], result.labels[2])
        self.assertAlmostEqual(result.sse, 1.0)

    def test_sse_never_increases(self):
        points = np.random.default_rng(1).standard_normal((200, 3))
        result = kmeans(points, 6, seed=2)
        history = np.array(result.sse_history)
        self.assertTrue((np.diff(history) <= 1e-9).all())

    def test_labels_are_nearest_centroids(self):
        points = np.random.default_rng(6).standard_normal((120, 2))
        result = kmeans(points, 5, seed=1)
        distances = ((points[:, None, :] - result.centroids[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(result.labels, distances.argmin(axis=1))
        self.assertAlmostEqual(result.sse, distances.min(axis=1).sum())

    def test_clusters_are_never_empty(self):
        points = np.concatenate([np.zeros((10, 2)), np.ones((2, 2))])
        result = kmeans(points, 4, seed=0)
        self.assertEqual(len(np.unique(result.labels)), 4)

    def test_deterministic_for_seed(self):
        points = np.random.default_rng(3).standard_normal((50, 2))
        np.testing.assert_array_equal(kmeans(points, 3, seed=4).labels, kmeans(points, 3, seed=4).labels)

    def test_invalid_k(self):
        with self.assertRaises(CurationError):
            kmeans([[0.0], [1.0]], 3)
        with self.assertRaises(CurationError):
            kmeans([[0.0], [1.0]], 0)


class HierarchyTests(SimpleTestCase):
    def test_levels_are_consistent(self):
        points = np.random.default_rng(5).standard_normal((120, 4))
        hierarchy = build_hierarchy(points, [24, 6, 2], seed=1)
        self.assertEqual(hierarchy.counts, [24, 6, 2])
        self.assertTrue(hierarchy.is_consistent())
        self.assertEqual(len(hierarchy.levels[0].point_labels), 120)

    def test_counts_must_decrease(self):
        with self.assertRaises(CurationError):
            build_hierarchy(np.zeros((10, 2)), [3, 3])
        with self.assertRaises(CurationError):
            build_hierarchy(np.zeros((10, 2)), [])


class SamplingTests(SimpleTestCase):
    def test_split_quota_respects_capacity(self):
        rng = np.random.default_rng(0)
        alloc = split_quota(10, [1, 20, 2], rng)
        self.assertEqual(alloc.sum(), 10)
        self.assertEqual(alloc[0], 1)
        self.assertEqual(alloc[2], 2)
        self.assertEqual(list(split_quota(6, [5, 5, 5], rng)), [2, 2, 2])

    def test_balanced_sample_equalizes_skewed_clusters(self):
        points, truth = skewed_points()
        hierarchy = build_hierarchy(points, [3], seed=0)
        indices, report = balanced_sample(hierarchy, 15, seed=0)
        self.assertEqual(report.sampled, 15)
        self.assertEqual(len(set(indices.tolist())), 15)
        np.testing.assert_array_equal(np.bincount(truth[indices], minlength=3), [5, 5, 5])
        self.assertAlmostEqual(report.entropy[0], math.log(3))

    def test_balanced_beats_iid_entropy(self):
        points, truth = skewed_points(1)
        hierarchy = build_hierarchy(points, [9, 3], seed=0)
        indices, report = balanced_sample(hierarchy, 30, seed=0)
        iid = iid_sample(len(points), 30, seed=0)
        self.assertGreaterEqual(report.entropy[-1], occupancy_entropy(hierarchy.levels[-1].point_labels[iid], 3))

    def test_whole_population(self):
        points, _ = skewed_points()
        indices, _ = balanced_sample(build_hierarchy(points, [3]), len(points))
        np.testing.assert_array_equal(indices, np.arange(len(points)))

    def test_oversized_request(self):
        hierarchy = build_hierarchy(np.random.default_rng(0).standard_normal((10, 2)), [2])
        with self.assertRaises(CurationError):
            balanced_sample(hierarchy, 11)

    def test_entropy(self):
        self.assertAlmostEqual(occupancy_entropy([0, 1, 2, 3], 4), math.log(4))
        self.assertEqual(occupancy_entropy([1, 1, 1], 4), 0.0)
        self.assertEqual(occupancy_entropy([], 4), 0.0)


class OutputTests(SimpleTestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_index_file_round_trip(self):
        path = write_index_file(self.tmp / 'index.txt', [3, 1, 4])
        self.assertEqual(path.read_text(), '3\n1\n4\n')
        np.testing.assert_array_equal(read_index_file(path), [3, 1, 4])

    def test_report_csv(self):
        points, _ = skewed_points()
        _, report = balanced_sample(build_hierarchy(points, [3]), 6)
        frame = pd.read_csv(write_report(self.tmp / 'report.csv', report))
        self.assertEqual(list(frame.columns), ['level', 'cluster', 'sampled', 'level_entropy'])
        self.assertEqual(frame['sampled'].sum(), 6)

    def test_pixel_embeddings(self):
        images = np.random.default_rng(0).random((3, 16, 16, 3)).astype(np.float32)
        self.assertEqual(pixel_embeddings(images, size=4).shape, (3, 48))
