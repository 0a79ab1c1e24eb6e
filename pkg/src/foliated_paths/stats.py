"""Mergeable running moments and deterministic chunked parallel map."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


@dataclass
class RunningStats:
    """Count, mean and centred second moment (Chan et al. parallel merge).

    Works elementwise for array-valued samples.
    """

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, samples):
        x = np.asarray(samples, dtype=float)
        if len(x) == 0:
            return cls(0, np.zeros(x.shape[1:]), np.zeros(x.shape[1:]))
        mu = x.mean(axis=0)
        return cls(len(x), mu, ((x - mu) ** 2).sum(axis=0))

    def merge(self, other):
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return RunningStats(n, mean, m2)

    @property
    def variance(self):
        return self.m2 / (self.count - 1) if self.count > 1 else np.zeros_like(self.m2)

    @property
    def stderr(self):
        if self.count < 2:
            return np.zeros_like(np.asarray(self.m2, dtype=float))
        return np.sqrt(self.variance / self.count)

    @property
    def rms(self):
        # root mean square about zero
        if self.count == 0:
            return np.zeros_like(self.mean)
        return np.sqrt(self.mean**2 + self.m2 / self.count)


def merge_all(stats_list):
    out = None
    for s in stats_list:
        out = s if out is None else out.merge(s)
    return out


FOLIATED_THREADS_ENV = "FOLIATED_PATHS_THREADS"


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get(FOLIATED_THREADS_ENV)
        threads = int(env) if env else 1
    return max(1, int(threads))


def chunk_ranges(n_paths, chunk):
    return [(s, min(chunk, n_paths - s)) for s in range(0, n_paths, chunk)]


def map_chunks(fn, n_paths, chunk, threads=None):
    """Apply fn(start, count) over fixed chunks; results returned in chunk order.

    Chunking never depends on the thread count, so any reduction performed
    in the returned order is bitwise reproducible.
    """
    ranges = chunk_ranges(n_paths, chunk)
    workers = resolve_threads(threads)
    if workers == 1 or len(ranges) == 1:
        return [fn(s, c) for s, c in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda sc: fn(*sc), ranges))


def reduce_chunks(results):
    """Merge a list of {key: RunningStats} dicts in order."""
    out = {}
    for res in results:
        for key, st in res.items():
            out[key] = st if key not in out else out[key].merge(st)
    return out
