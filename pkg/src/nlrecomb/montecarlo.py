"""Reproducible Monte Carlo plumbing.

Every Monte Carlo loop in the package is split into fixed-size chunks. Chunk
``j`` of stream ``name`` draws from a generator seeded by
``SeedSequence(seed, spawn_key=(tag(name), j))``, so results depend only on
``(seed, chunk size)`` and never on how many threads execute the chunks.
Per-chunk sufficient statistics are merged in chunk-index order.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


def stream_tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *key: int | str) -> np.random.Generator:
    """Generator for an independent stream identified by ``key``."""
    spawn_key = tuple(stream_tag(k) if isinstance(k, str) else int(k) for k in key)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))


def chunk_sizes(total: int, chunk: int) -> list[int]:
    if total < 0 or chunk < 1:
        raise ValueError("need total >= 0 and chunk >= 1")
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])


def run_chunks(
    fn: Callable[[np.random.Generator, int], T],
    total: int,
    *,
    seed: int,
    stream: str,
    chunk: int = 10_000,
    threads: int = 1,
) -> list[T]:
    """Run ``fn(rng, size)`` over chunks of ``total`` samples.

    Results come back in chunk order regardless of ``threads``.
    """
    sizes = chunk_sizes(total, chunk)
    jobs = [(make_rng(seed, stream, j), m) for j, m in enumerate(sizes)]
    if threads <= 1 or len(jobs) <= 1:
        return [fn(rng, m) for rng, m in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate: mean, standard error and sample count."""

    mean: float
    se: float
    n: int

    def within(self, target: float, z: float = 3.0) -> bool:
        return abs(self.mean - target) <= z * self.se

    def as_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "samples": self.n}


@dataclass
class Moments:
    """Running count / sum / sum of squares for a vector of statistics.

    Merging is associative, and :func:`merge_all` fixes the order so the
    floating-point result is reproducible.
    """

    count: int
    total: np.ndarray
    total_sq: np.ndarray

    @classmethod
    def of(cls, values) -> "Moments":
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        return cls(v.shape[0], v.sum(axis=0), (v * v).sum(axis=0))

    def merge(self, other: "Moments") -> "Moments":
        return Moments(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
        )

    @staticmethod
    def merge_all(parts: Sequence["Moments"]) -> "Moments":
        # pairwise reduction in index order
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to merge")
        while len(parts) > 1:
            nxt = [parts[i].merge(parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
            if len(parts) % 2:
                nxt.append(parts[-1])
            parts = nxt
        return parts[0]

    def mean(self) -> np.ndarray:
        return self.total / self.count

    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.full_like(self.total, np.nan)
        m = self.mean()
        v = (self.total_sq - self.count * m * m) / (self.count - 1)
        return np.maximum(v, 0.0)

    def estimates(self) -> list[Estimate]:
        m, v = self.mean(), self.var()
        return [
            Estimate(float(mi), float(math.sqrt(vi / self.count)), self.count)
            for mi, vi in zip(m, v)
        ]

    def estimate(self, j: int = 0) -> Estimate:
        return self.estimates()[j]


def proportion(successes: int, trials: int) -> Estimate:
    p = successes / trials
    return Estimate(p, math.sqrt(p * (1.0 - p) / trials), trials)
