"""Seed derivation and worker-count helpers shared by all stages."""

import os
import zlib

import numpy as np

WORKERS_ENV = "MBN_WORKERS"


def stream_seed(master_seed, *keys):
    """Derive an unsigned 32-bit seed for a named sub-stream.

    String keys are hashed with CRC32 so that ``stream_seed(7, "ubm")`` is
    stable across Python processes (unlike ``hash``).
    """
    words = [int(master_seed)]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def make_rng(*words):
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in words]))


def worker_count(workers=None):
    """Resolve the number of worker threads.

    An explicit argument wins, then the ``MBN_WORKERS`` environment variable,
    then the number of available CPUs.
    """
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)
