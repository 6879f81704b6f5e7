"""Shared fixtures: a tiny run config and a temporary runs root."""
import shutil
import tempfile
from pathlib import Path

from django.test import override_settings

TINY_CONFIG = {
    'depth': 1,
    'embed_dim': 16,
    'head_count': 2,
    'head_dim': 8,
    'ffn_hidden_dim': 16,
    'patch_size': 8,
    'register_count': 1,
    'head_hidden_dim': 16,
    'head_bottleneck_dim': 8,
    'prototype_count': 8,
    'head_layers': 2,
    'dataset_size': 24,
    'image_size': 32,
    'batch_size': 2,
    'global_size': 16,
    'local_size': 8,
    'n_local': 2,
    'koleo_group_size': 2,
    'steps': 4,
    'checkpoint_every': 2,
    'log_every': 0,
    'adapt_toy_factor': 16,
    'probe_train_size': 12,
    'probe_test_size': 8,
    'probe_epochs': 5,
    'probe_lrs': '0.1',
    'probe_wds': '0.0001',
    'curate_levels': '6,2',
    'curate_size': 8,
    'kmeans_max_iter': 10,
}


class TempRunsMixin:
    """Points DINOLAB_RUNS_ROOT at a fresh temporary directory for each test."""

    def setUp(self):
        super().setUp()
        self.runs_root = Path(tempfile.mkdtemp(prefix='dinolab-test-'))
        self._settings = override_settings(DINOLAB_RUNS_ROOT=self.runs_root)
        self._settings.enable()

    def tearDown(self):
        self._settings.disable()
        shutil.rmtree(self.runs_root, ignore_errors=True)
        super().tearDown()

    def tiny(self, **overrides):
        return {**TINY_CONFIG, **overrides}
