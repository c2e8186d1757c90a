"""Open-path counting by sparse dynamic programming over frontiers.

The engine evolves many independent environments at once: a batch frontier is
a set of rows ``(member, site, count)``. Counts are exact integers (int64,
promoted to Python ints before they could overflow) or natural logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .environment import Edge, EnvSeed, SeedEnsemble, check_parameter
from .harness import Estimate, estimate_from_samples
from .kernel import Kernel, p_max

EXACT_MAX_LEVEL = 64
_INT64_SAFE = 1 << 62


class LogCount(float):
    """A path count stored as its natural logarithm."""


class PathBudgetError(RuntimeError):
    pass


@dataclass
class Frontier:
    level: int
    counts: dict[tuple[int, ...], int | float] = field(default_factory=dict)
    log_space: bool = False

    @classmethod
    def origin(cls, dim: int, log_space: bool = False) -> Frontier:
        return cls(0, {(0,) * dim: 0.0 if log_space else 1}, log_space)

    def total(self):
        """Z at this level: an int, or a LogCount in log space."""
        if not self.log_space:
            return sum(self.counts.values())
        if not self.counts:
            return LogCount(-math.inf)
        vals = np.fromiter(self.counts.values(), dtype=float)
        top = vals.max()
        return LogCount(top + math.log(np.exp(vals - top).sum()))

    def log_total(self) -> float:
        t = self.total()
        if self.log_space:
            return float(t)
        return math.log(t) if t > 0 else -math.inf


# ---------------------------------------------------------------------------
# batch engine

@dataclass
class _Batch:
    rep: np.ndarray      # (S,) member index
    sites: np.ndarray    # (S, d)
    vals: np.ndarray     # (S,) int64 / object counts, or float64 logs
    log_space: bool


def _origin_batch(n_members: int, dim: int, log_space: bool) -> _Batch:
    vals = np.zeros(n_members) if log_space else np.ones(n_members, dtype=np.int64)
    return _Batch(np.arange(n_members, dtype=np.int64),
                  np.zeros((n_members, dim), dtype=np.int64), vals, log_space)


def _group_keys(rep: np.ndarray, y: np.ndarray) -> np.ndarray:
    lo = y.min(axis=0)
    span = y.max(axis=0) - lo + 1
    if float(np.prod(span.astype(float))) * (float(rep.max()) + 1) < 2.0 ** 62:
        key = rep.copy()
        for i in range(y.shape[1]):
            key = key * int(span[i]) + (y[:, i] - lo[i])
        return key
    _, inv = np.unique(np.column_stack([rep, y]), axis=0, return_inverse=True)
    return inv.ravel()


def _reduce(batch_rep, y, vals, log_space) -> _Batch:
    """Sum counts landing on the same (member, site)."""
    key = _group_keys(batch_rep, y)
    order = np.argsort(key, kind="stable")
    key = key[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    v = vals[order]
    if log_space:
        top = np.maximum.reduceat(v, starts)
        gid = np.cumsum(np.r_[False, key[1:] != key[:-1]])
        summed = top + np.log(np.add.reduceat(np.exp(v - top[gid]), starts))
    else:
        summed = np.add.reduceat(v, starts)
    first = order[starts]
    return _Batch(batch_rep[first], y[first], summed, log_space)


def _step(batch: _Batch, env, level: int, p, k: Kernel, offsets: np.ndarray,
          keep=None) -> _Batch:
    if batch.rep.size == 0:
        return batch
    mask = env.open_mask(batch.rep, level, batch.sites, k, p)
    src, off = np.nonzero(mask)
    y = batch.sites[src] + offsets[off]
    rep = batch.rep[src]
    vals = batch.vals[src]
    if keep is not None:
        ok = keep(rep, level + 1, y)
        y, rep, vals = y[ok], rep[ok], vals[ok]
    if rep.size == 0:
        return _Batch(rep, y, vals, batch.log_space)
    if not batch.log_space and vals.dtype == np.int64:
        if int(vals.max()) * len(offsets) >= _INT64_SAFE:
            vals = vals.astype(object)
    return _reduce(rep, y, vals, batch.log_space)


def _member_totals(batch: _Batch, n_members: int) -> np.ndarray:
    """log Z per member (-inf when extinct)."""
    out = np.full(n_members, -math.inf)
    if batch.rep.size == 0:
        return out
    order = np.argsort(batch.rep, kind="stable")
    rep = batch.rep[order]
    v = batch.vals[order]
    starts = np.flatnonzero(np.r_[True, rep[1:] != rep[:-1]])
    if batch.log_space:
        top = np.maximum.reduceat(v, starts)
        gid = np.cumsum(np.r_[False, rep[1:] != rep[:-1]])
        out[rep[starts]] = top + np.log(np.add.reduceat(np.exp(v - top[gid]), starts))
    else:
        sums = np.add.reduceat(v, starts)
        out[rep[starts]] = [math.log(int(s)) for s in sums]
    return out


def _member_exact_totals(batch: _Batch, n_members: int) -> list[int]:
    out = [0] * n_members
    for r, v in zip(batch.rep.tolist(), batch.vals.tolist()):
        out[r] += int(v)
    return out


def resolve_mode(mode: str, N: int) -> bool:
    """True for log space."""
    if mode == "auto":
        return N > EXACT_MAX_LEVEL
    if mode not in ("exact", "log"):
        raise ValueError(f"unknown arithmetic mode {mode!r}")
    return mode == "log"


@dataclass
class EnsembleResult:
    log_totals: dict[int, np.ndarray]        # level -> log Z per member
    exact_totals: list[int] | None           # Z_N per member in exact mode
    final: _Batch


def evolve_ensemble(env, n_members: int, p, k: Kernel, N: int, mode: str = "auto",
                    record: Iterable[int] = (), keep=None) -> EnsembleResult:
    """Evolve ``n_members`` frontiers from the origin for N levels.

    ``env`` answers ``open_mask(rep, level, x, kernel, p)`` for member ``rep``.
    ``record`` lists intermediate levels whose log totals are kept.
    """
    log_space = resolve_mode(mode, N)
    offsets = k.offsets
    batch = _origin_batch(n_members, k.dim, log_space)
    record = set(record)
    logs = {}
    if 0 in record:
        logs[0] = np.zeros(n_members)
    for n in range(N):
        batch = _step(batch, env, n, p, k, offsets, keep)
        if n + 1 in record:
            logs[n + 1] = _member_totals(batch, n_members)
        if batch.rep.size == 0:
            for m in record:
                if m > n + 1:
                    logs[m] = np.full(n_members, -math.inf)
            break
    logs[N] = _member_totals(batch, n_members)
    exact = None if log_space else _member_exact_totals(batch, n_members)
    return EnsembleResult(logs, exact, batch)


def _to_frontier(batch: _Batch, level: int, member: int = 0) -> Frontier:
    sel = batch.rep == member
    counts = {}
    for site, v in zip(map(tuple, batch.sites[sel].tolist()), batch.vals[sel].tolist()):
        counts[site] = float(v) if batch.log_space else int(v)
    return Frontier(level, dict(sorted(counts.items())), batch.log_space)


def _from_frontier(fr: Frontier, dim: int) -> _Batch:
    sites = np.array(list(fr.counts), dtype=np.int64).reshape(-1, dim)
    if fr.log_space:
        vals = np.array(list(fr.counts.values()), dtype=float)
    else:
        raw = list(fr.counts.values())
        big = any(v >= _INT64_SAFE for v in raw)
        vals = np.array(raw, dtype=object if big else np.int64)
    return _Batch(np.zeros(len(sites), dtype=np.int64), sites, vals, fr.log_space)


# ---------------------------------------------------------------------------
# public operations

def frontier_step(fr: Frontier, env, p, k: Kernel) -> Frontier:
    if isinstance(env, EnvSeed):
        check_parameter(p, k)
    batch = _step(_from_frontier(fr, k.dim), env, fr.level, p, k, k.offsets)
    return _to_frontier(batch, fr.level + 1)


def count_paths(env, p, k: Kernel, N: int, mode: str = "auto"):
    """Z_N and the per-site frontier at level N.

    Z_N is an int in exact mode and a :class:`LogCount` in log mode.
    """
    if N < 0:
        raise ValueError("N must be nonnegative")
    if isinstance(env, EnvSeed):
        check_parameter(p, k)
    res = evolve_ensemble(env, 1, p, k, N, mode)
    fr = _to_frontier(res.final, N)
    return fr.total(), fr


def renormalized(Z, p, N: int) -> float:
    """log W_N = log Z_N - N log p (-inf when Z_N = 0)."""
    if isinstance(Z, LogCount):
        logz = float(Z)
    else:
        if Z == 0:
            return -math.inf
        logz = math.log(Z)
    if logz == -math.inf:
        return -math.inf
    return logz - N * math.log(p)


def survives(env, p, k: Kernel, N: int) -> bool:
    if N < 1:
        raise ValueError("N must be >= 1")
    check_parameter(p, k) if isinstance(env, EnvSeed) else None
    fr = Frontier.origin(k.dim, log_space=True)
    batch = _from_frontier(fr, k.dim)
    for n in range(N):
        batch = _step(batch, env, n, p, k, k.offsets)
        if batch.rep.size == 0:
            return False
    return True


def enumerate_oracle(env, k: Kernel, N: int, p=None, budget: int = 10 ** 7) -> int:
    """Z_N by depth-first enumeration of every open path from the origin.

    Independent of the frontier code: walks edges one at a time through the
    environment's scalar ``edge_open``.
    """
    support = k.support
    visited = 0
    count = 0
    stack = [(0, (0,) * k.dim)]
    while stack:
        n, x = stack.pop()
        visited += 1
        if visited > budget:
            raise PathBudgetError(f"path budget {budget} exceeded")
        if n == N:
            count += 1
            continue
        for z in support:
            y = tuple(a + b for a, b in zip(x, z))
            if env.edge_open(Edge(n, x, y), p, k):
                stack.append((n + 1, y))
    return count


# ---------------------------------------------------------------------------
# exhaustive small instances

def reachable_edges(k: Kernel, N: int) -> list[Edge]:
    """Every edge out of a site reachable from the origin, levels 0..N-1."""
    edges = []
    sites = [(0,) * k.dim]
    for n in range(N):
        nxt = set()
        for x in sites:
            for z in k.support:
                y = tuple(a + b for a, b in zip(x, z))
                edges.append(Edge(n, x, y))
                nxt.add(y)
        sites = sorted(nxt)
    return edges


def config_probability(edges: Sequence[Edge], config: int, p, k: Kernel) -> Fraction:
    prob = Fraction(1)
    for i, e in enumerate(edges):
        q = Fraction(p) * Fraction(k.weight(e.offset()))
        prob *= q if (config >> i) & 1 else 1 - q
    return prob


def martingale_defects(k: Kernel, N: int, p) -> list[Fraction]:
    """E[W_{N+1} | levels < N] - W_N for every configuration of levels < N.

    Exact rational arithmetic over all edge configurations up to level N.
    """
    from .environment import BitmaskEnsemble

    edges = reachable_edges(k, N + 1)
    n_past = sum(1 for e in edges if e.level < N)
    past, future = edges[:n_past], edges[n_past:]
    p = Fraction(p)
    fut_probs = [config_probability(future, c, p, k) for c in range(1 << len(future))]
    past_configs = np.arange(1 << n_past, dtype=np.int64)
    all_configs = (np.arange(1 << len(future), dtype=np.int64)[None, :] << n_past) | \
        past_configs[:, None]
    env = BitmaskEnsemble(edges, all_configs.ravel(), k)
    z_next = evolve_ensemble(env, all_configs.size, p, k, N + 1, "exact").exact_totals
    env_past = BitmaskEnsemble(edges, past_configs, k)
    z_now = evolve_ensemble(env_past, past_configs.size, p, k, N, "exact").exact_totals
    defects = []
    n_fut = 1 << len(future)
    for i in range(past_configs.size):
        cond = sum(fut_probs[j] * z_next[i * n_fut + j] for j in range(n_fut)) / p ** (N + 1)
        defects.append(cond - Fraction(z_now[i]) / p ** N)
    return defects


# ---------------------------------------------------------------------------
# Monte Carlo over independent environments

@dataclass
class GrowthSample:
    N: int
    logZ: float
    survived: bool
    p: float
    seed: EnvSeed

    def __post_init__(self):
        if self.survived != (self.logZ > -math.inf):
            raise ValueError("survived must match logZ > -inf")


@dataclass
class GrowthEstimate:
    """Estimate of F(p) from (1/N) log Z_N over surviving replicas."""
    p: float
    N: int
    estimate: Estimate | None           # None when no replica survived
    half_horizon: Estimate | None       # same statistic at N // 2, same survivors
    survival_fraction: float
    replicas: int
    samples: list[GrowthSample]

    @property
    def no_survivor(self) -> bool:
        return self.estimate is None

    @property
    def drift(self) -> float | None:
        """Slope at N minus slope at N // 2 (convergence diagnostic)."""
        if self.estimate is None or self.half_horizon is None:
            return None
        return self.estimate.mean - self.half_horizon.mean


def simulate_log_counts(p, k: Kernel, N: int, seeds: Sequence[EnvSeed], mode: str = "auto",
                        record: Iterable[int] = ()) -> dict[int, np.ndarray]:
    """log Z at level N (and recorded levels) for each seed's environment."""
    check_parameter(p, k)
    res = evolve_ensemble(SeedEnsemble(seeds), len(seeds), p, k, N, mode, record)
    return res.log_totals


def _growth_chunk(args) -> dict[int, np.ndarray]:
    p, k, N, seed, streams, mode = args
    seeds = [EnvSeed(seed, s) for s in streams]
    return simulate_log_counts(p, k, N, seeds, mode, record=(N // 2,))


def growth_rate_estimate(p, k: Kernel, N: int, replicas: int, env0: EnvSeed,
                         mode: str = "auto", min_survivors: int | None = None,
                         workers: int | None = None, chunk: int = 256) -> GrowthEstimate:
    """Mean of (1/N) log Z_N over replicas that survive to level N.

    Replica i uses stream ``env0.stream + i``. With ``min_survivors`` more
    replicas are drawn, ``replicas`` at a time, until enough survive.
    """
    from .harness import map_chunks

    if p <= 0:
        raise ValueError("p must be positive")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    check_parameter(p, k)
    logs_N, logs_half = [], []
    total = 0
    while True:
        first = env0.stream + total
        parts = map_chunks(_growth_chunk, range(first, first + replicas), chunk,
                           lambda streams: (p, k, N, env0.seed, streams, mode), workers)
        for part in parts:
            logs_N.append(part[N])
            logs_half.append(part[N // 2])
        total += replicas
        n_surv = int(sum(int(np.sum(a > -math.inf)) for a in logs_N))
        if min_survivors is None or n_surv >= min_survivors or total >= 1000 * replicas:
            break
    logN = np.concatenate(logs_N)
    logH = np.concatenate(logs_half)
    alive = logN > -math.inf
    samples = [GrowthSample(N, float(v), bool(a), float(p), EnvSeed(env0.seed, env0.stream + i))
               for i, (v, a) in enumerate(zip(logN, alive))]
    extinct = int((~alive).sum())
    if alive.any():
        est = estimate_from_samples(logN[alive] / N, discarded=extinct)
        half = estimate_from_samples(logH[alive] / max(N // 2, 1), discarded=extinct) \
            if N // 2 > 0 else None
    else:
        est = half = None
    return GrowthEstimate(float(p), N, est, half, float(alive.mean()), total, samples)


def enumerate_paths(k: Kernel, N: int) -> list[tuple[Edge, ...]]:
    """Every lattice path of length N from the origin, as a tuple of edges."""
    out = []
    stack = [((0,) * k.dim, ())]
    while stack:
        x, path = stack.pop()
        n = len(path)
        if n == N:
            out.append(path)
            continue
        for z in k.support:
            y = tuple(a + b for a, b in zip(x, z))
            stack.append((y, path + (Edge(n, x, y),)))
    return out


def path_mask_oracle(edges: Sequence[Edge], configs, k: Kernel, N: int) -> np.ndarray:
    """Z_N for each bitmask configuration by testing every path's edge set.

    Independent of the frontier code: a path is open iff all its edge bits
    are set, and Z_N is the number of open paths.
    """
    index = {e: i for i, e in enumerate(edges)}
    configs = np.asarray(configs, dtype=np.int64)
    z = np.zeros(configs.size, dtype=np.int64)
    for path in enumerate_paths(k, N):
        m = 0
        for e in path:
            m |= 1 << index[e]
        z += (configs & m) == m
    return z


def exhaustive_count_check(k: Kernel, N: int, p=None, dfs_sample: int = 4096) -> tuple[int, int]:
    """Compare the frontier DP with enumeration on every edge configuration.

    Every configuration is checked against the path-mask oracle; the first
    ``dfs_sample`` configurations are also checked against the depth-first
    oracle. Returns (configurations checked, mismatches).
    """
    from .environment import BitmaskEnsemble

    edges = reachable_edges(k, N)
    configs = np.arange(1 << len(edges), dtype=np.int64)
    p = p_max(k) if p is None else p
    mismatches = 0
    block = 1 << 16
    for start in range(0, configs.size, block):
        part = configs[start:start + block]
        env = BitmaskEnsemble(edges, part, k)
        dp = np.array(evolve_ensemble(env, part.size, p, k, N, "exact").exact_totals)
        mismatches += int(np.sum(dp != path_mask_oracle(edges, part, k, N)))
        for r, c in enumerate(part[:max(0, dfs_sample - start)].tolist()):
            if _dfs_bitmask(edges, c, k, N) != dp[r]:
                mismatches += 1
    return configs.size, mismatches


def _dfs_bitmask(edges: Sequence[Edge], config: int, k: Kernel, N: int) -> int:
    index = {(e.level, e.src, e.dst): i for i, e in enumerate(edges)}
    return enumerate_oracle(_BitEnv(index, config), k, N)


class _BitEnv:
    def __init__(self, index, config):
        self.index = index
        self.config = config

    def edge_open(self, e: Edge, p=None, k=None) -> bool:
        i = self.index.get((e.level, e.src, e.dst))
        return i is not None and bool((self.config >> i) & 1)

