"""
Seed discipline: one master seed, one independent stream per consumer.

A stream is identified by (master seed, consumer name, *keys) and built with
numpy's SeedSequence, so e.g. the crop stream of step 1200 is the same
whether the run got there in one go or was resumed at step 1000.
"""
import zlib

import numpy as np


def stream_code(name: str) -> int:
    return zlib.crc32(name.encode('utf-8'))


def derive_rng(master_seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Generator for `stream` (optionally per step / per image) under `master_seed`."""
    entropy = [int(master_seed) & 0xFFFFFFFF, stream_code(stream), *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
