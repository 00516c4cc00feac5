"""Gaussian noise sampling and Monte-Carlo estimates of the smoothed embedding.

Noise is drawn from a counter-based generator (Philox) keyed by
``(seed, stream_id)``.  Sample ``i`` of a stream lives in counter block
``i // BLOCK``; every block is regenerated whole and sliced, so a sample's value
depends only on ``(seed, stream_id, i)`` and never on how a request is split
into batches.  Half-means are accumulated per block in a fixed order, which
makes an extended estimate bit-identical to one computed from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

BLOCK = 1024
MASK64 = (1 << 64) - 1

# stream ids: certification uses the two halves, everything else sits above
STREAM_FIRST_HALF = 0
STREAM_SECOND_HALF = 1
STREAM_PREDICT = 2
STREAM_ORACLE = 3

Embedder = Callable[[np.ndarray], np.ndarray]


class EmbedderFailure(RuntimeError):
    """Raised when the embedder fails on a batch of noisy inputs."""

    def __init__(self, message: str, sample_index: int):
        super().__init__(f"{message} (sample index {sample_index})")
        self.sample_index = sample_index


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    seed: int = 0
    batch_size: int = 4096

    def __post_init__(self):
        # sigma == 0 is accepted here so the sampler can be tested on it;
        # the certifier rejects it
        if not self.sigma >= 0.0:
            raise ValueError("sigma must be nonnegative")
        if not 0 <= int(self.seed) <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def _block_normals(n: int, seed: int, stream_id: int, block: int) -> np.ndarray:
    bitgen = np.random.Philox(key=(int(seed) & MASK64) | ((int(stream_id) & MASK64) << 64),
                              counter=[0, 0, int(block), 0])
    return np.random.Generator(bitgen).standard_normal((BLOCK, n))


def sample_noise(n: int, count: int, config: SmoothingConfig, stream_id: int,
                 start: int = 0) -> np.ndarray:
    """Draws ``count`` vectors from N(0, sigma^2 I_n): samples ``start .. start+count-1``."""
    if count < 0 or start < 0:
        raise ValueError("count and start must be nonnegative")
    out = np.empty((count, n))
    if count == 0:
        return out
    stop = start + count
    pos = 0
    for b in range(start // BLOCK, (stop - 1) // BLOCK + 1):
        lo = max(start, b * BLOCK) - b * BLOCK
        hi = min(stop, (b + 1) * BLOCK) - b * BLOCK
        out[pos:pos + hi - lo] = _block_normals(n, config.seed, stream_id, b)[lo:hi]
        pos += hi - lo
    out *= config.sigma
    return out


def embed_noisy(x: np.ndarray, embedder: Embedder, config: SmoothingConfig,
              stream_id: int, start: int, count: int) -> np.ndarray:
    """Embeddings of ``x + eps_i`` for sample indices ``start .. start+count-1``."""
    chunks = []
    step = max(BLOCK, (config.batch_size // BLOCK) * BLOCK)
    for s in range(start, start + count, step):
        c = min(step, start + count - s)
        noisy = x[None, :] + sample_noise(x.size, c, config, stream_id, s)
        try:
            emb = np.asarray(embedder(noisy), dtype=np.float64)
        except Exception as exc:
            raise EmbedderFailure(f"embedder failed: {exc}", s) from exc
        if emb.ndim != 2 or emb.shape[0] != c:
            raise EmbedderFailure(f"embedder returned shape {emb.shape} for {c} inputs", s)
        chunks.append(emb)
    return np.concatenate(chunks, axis=0)


@dataclass
class _HalfAccumulator:
    """Block-ordered running sum over one half's samples."""

    dim: int
    count: int = 0
    complete: Optional[np.ndarray] = None
    tail: Optional[np.ndarray] = None
    retained: Optional[list] = None

    def __post_init__(self):
        if self.complete is None:
            self.complete = np.zeros(self.dim)
        if self.tail is None:
            self.tail = np.empty((0, self.dim))

    def add(self, rows: np.ndarray, retain: bool):
        # block boundaries are fixed by sample index, so the summation order
        # is the same however the samples arrived
        self.tail = np.concatenate([self.tail, rows], axis=0)
        while self.tail.shape[0] >= BLOCK:
            self.complete = self.complete + self.tail[:BLOCK].sum(axis=0)
            self.tail = self.tail[BLOCK:]
        self.count += rows.shape[0]
        if retain:
            self.retained.append(rows)

    def mean(self) -> np.ndarray:
        return (self.complete + self.tail.sum(axis=0)) / self.count

    def copy(self) -> "_HalfAccumulator":
        return _HalfAccumulator(self.dim, self.count, self.complete.copy(), self.tail.copy(),
                                None if self.retained is None else list(self.retained))


@dataclass
class PairedEstimate:
    """Two independent half-means of the smoothed embedding over N samples each."""

    g1: np.ndarray
    g2: np.ndarray
    n_per_half: int
    per_sample_first: Optional[np.ndarray] = None
    per_sample_second: Optional[np.ndarray] = None
    _acc: tuple = field(default=(), repr=False, compare=False)

    @property
    def n_total(self) -> int:
        return 2 * self.n_per_half

    @property
    def g(self) -> np.ndarray:
        return 0.5 * (self.g1 + self.g2)

    @property
    def retained(self) -> bool:
        return self.per_sample_first is not None

    def per_sample_all(self) -> np.ndarray:
        if not self.retained:
            raise ValueError("per-sample embeddings were not retained")
        return np.concatenate([self.per_sample_first, self.per_sample_second], axis=0)


def _finish(acc1: _HalfAccumulator, acc2: _HalfAccumulator) -> PairedEstimate:
    first = second = None
    if acc1.retained is not None:
        first = np.concatenate(acc1.retained, axis=0) if acc1.retained else np.empty((0, acc1.dim))
        second = np.concatenate(acc2.retained, axis=0) if acc2.retained else np.empty((0, acc2.dim))
        # collapse into one array so later extensions do not re-concatenate
        acc1.retained = [first]
        acc2.retained = [second]
    return PairedEstimate(acc1.mean(), acc2.mean(), acc1.count, first, second, (acc1, acc2))


def _grow(acc1, acc2, x, embedder, per_half, config, retain):
    start = acc1.count
    for acc, stream in ((acc1, STREAM_FIRST_HALF), (acc2, STREAM_SECOND_HALF)):
        acc.add(embed_noisy(x, embedder, config, stream, start, per_half), retain)


def _input_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def estimate_smoothed(x, embedder: Embedder, n_total: int, config: SmoothingConfig,
                      retain: bool = False) -> PairedEstimate:
    """Estimates g(x) = E f(x + eps) by two half-means of N = n_total / 2 samples.

    The halves use disjoint noise streams.  With ``retain`` the per-sample
    embeddings of both halves are kept on the result.
    """
    if n_total < 2 or n_total % 2:
        raise ValueError("n_total must be even and at least 2")
    xa = _input_array(x)
    per_half = n_total // 2
    rows1 = embed_noisy(xa, embedder, config, STREAM_FIRST_HALF, 0, per_half)
    rows2 = embed_noisy(xa, embedder, config, STREAM_SECOND_HALF, 0, per_half)
    accs = []
    for rows in (rows1, rows2):
        acc = _HalfAccumulator(rows.shape[1], retained=[] if retain else None)
        acc.add(rows, retain)
        accs.append(acc)
    return _finish(*accs)


def extend_estimate(prev: PairedEstimate, x, embedder: Embedder, additional: int,
                    config: SmoothingConfig) -> PairedEstimate:
    """Appends ``additional / 2`` fresh samples to each half of ``prev``.

    Earlier samples are reused; the new ones continue each half's counter
    stream, so the result equals ``estimate_smoothed`` at the larger size.
    """
    if additional < 0 or additional % 2:
        raise ValueError("additional must be a nonnegative even number")
    if additional == 0:
        return prev
    if not prev._acc:
        raise ValueError("estimate carries no accumulator state; recompute instead")
    acc1, acc2 = (a.copy() for a in prev._acc)
    _grow(acc1, acc2, _input_array(x), embedder, additional // 2, config, prev.retained)
    return _finish(acc1, acc2)


def smoothed_mean(x, embedder: Embedder, n: int, config: SmoothingConfig,
                  stream_id: int = STREAM_PREDICT) -> np.ndarray:
    """Single-stream sample mean of f(x + eps) over n samples."""
    if n < 1:
        raise ValueError("n must be positive")
    xa = _input_array(x)
    rows = embed_noisy(xa, embedder, config, stream_id, 0, n)
    acc = _HalfAccumulator(rows.shape[1])
    acc.add(rows, False)
    return acc.mean()
