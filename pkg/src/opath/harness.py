"""Replica orchestration, seeding and mergeable statistics.

Replica ``i`` of an experiment always reads stream ``env0.stream + i`` of the
base seed and nothing else. Work is cut into chunks of fixed size that depend
only on the replica count, so results are identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__

MANIFEST_SCHEMA = 1
Z95 = 1.96


@dataclass(frozen=True)
class Estimate:
    """Sample count, mean and unbiased variance; mergeable by pooled moments."""
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0                  # sum of squared deviations from the mean
    extinct_or_discarded: int = 0

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def sigma(self) -> float:
        """Standard error of the mean."""
        return math.sqrt(self.variance / self.n) if self.n else math.inf

    @property
    def ci95(self) -> float:
        return Z95 * self.sigma

    def merge(self, other: Estimate) -> Estimate:
        return merge(self, other)

    def to_json(self) -> dict:
        return {"n": self.n, "mean": self.mean, "variance": self.variance,
                "ci95": self.ci95, "extinct_or_discarded": self.extinct_or_discarded}


def merge(a: Estimate, b: Estimate) -> Estimate:
    disc = a.extinct_or_discarded + b.extinct_or_discarded
    if a.n == 0:
        return Estimate(b.n, b.mean, b.m2, disc)
    if b.n == 0:
        return Estimate(a.n, a.mean, a.m2, disc)
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = (a.n * a.mean + b.n * b.mean) / n
    m2 = a.m2 + b.m2 + delta * delta * a.n * b.n / n
    return Estimate(n, mean, m2, disc)


def estimate_from_samples(x, discarded: int = 0) -> Estimate:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return Estimate(0, 0.0, 0.0, discarded)
    mean = float(x.mean())
    return Estimate(int(x.size), mean, float(((x - mean) ** 2).sum()), discarded)


@dataclass(frozen=True)
class ExperimentManifest:
    """Everything needed to reproduce an experiment's output bytes."""
    operation: str
    kernel: dict
    p: float | list
    replicas: int
    seed_hex: str
    stream0: int = 0
    N: int | None = None
    N0: int | None = None
    extra: dict = field(default_factory=dict)
    version: str = __version__
    schema: int = MANIFEST_SCHEMA

    def to_json(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def csv_header(self) -> str:
        return f"# manifest-sha256: {self.sha256()}\n"


def worker_count(requested: int | None = None) -> int:
    """Requested workers, capped by OPATH_THREADS and the CPU count."""
    cap = os.environ.get("OPATH_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"OPATH_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def chunks(items: Sequence[int], size: int) -> list[Sequence[int]]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def map_chunks(fn: Callable, streams: Sequence[int], chunk: int,
               make_args: Callable[[Sequence[int]], object],
               workers: int | None = None) -> list:
    """Apply ``fn`` to fixed-size stream chunks; results come back in stream order."""
    parts = chunks(streams, max(1, chunk))
    args = [make_args(c) for c in parts]
    n = min(worker_count(workers), len(parts))
    if n <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, args))


class ReplicaFailure(RuntimeError):
    def __init__(self, stream: int, cause: BaseException):
        super().__init__(f"replica on stream {stream} failed: {cause!r}")
        self.stream = stream


def _run_chunk(args):
    task, manifest, streams = args
    out = []
    for s in streams:
        try:
            out.append(float(task(manifest, s)))
        except Exception as exc:
            raise ReplicaFailure(s, exc) from exc
    return out


def run_replicas(task: Callable[[ExperimentManifest, int], float],
                 manifest: ExperimentManifest, workers: int | None = None,
                 chunk: int = 256) -> Estimate:
    """Evaluate ``task(manifest, stream)`` for every replica stream and merge.

    ``task`` must be a module-level function so it can be sent to workers.
    """
    if manifest.replicas < 1:
        raise ValueError("replicas must be >= 1")
    streams = range(manifest.stream0, manifest.stream0 + manifest.replicas)
    parts = map_chunks(_run_chunk, streams, chunk, lambda c: (task, manifest, c), workers)
    est = Estimate()
    for vals in parts:
        est = merge(est, estimate_from_samples(vals))
    return est


def merge_all(estimates: Iterable[Estimate]) -> Estimate:
    out = Estimate()
    for e in estimates:
        out = merge(out, e)
    return out
