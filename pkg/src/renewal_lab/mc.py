"""Partitioned random streams.

The sample index space of every Monte Carlo computation is cut into fixed
blocks. Block ``b`` of a computation tagged ``tag`` draws from
``SeedSequence([seed, crc32(tag)], spawn_key=(b,))``, so results do not
depend on how blocks are spread over workers; merging is always done in
block order.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

BLOCK = 256


def block_rng(seed: int, tag: str, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode())], spawn_key=(block,))
    return np.random.default_rng(ss)


def block_sizes(count: int, block: int = BLOCK) -> list[int]:
    full, rest = divmod(count, block)
    return [block] * full + ([rest] if rest else [])


def run_blocks(
    fn: Callable[[np.random.Generator, int, int], T],
    count: int,
    seed: int,
    tag: str,
    workers: int = 1,
    block: int = BLOCK,
) -> list[T]:
    """Call ``fn(rng, block_index, size)`` for every block, return results in
    block order."""
    sizes = block_sizes(count, block)
    jobs = [(b, s) for b, s in enumerate(sizes)]

    def one(job):
        b, s = job
        return fn(block_rng(seed, tag, b), b, s)

    if workers <= 1 or len(jobs) <= 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(parts)) if parts else np.empty(0)
