"""Spine-tilted environments and pinned path counts.

A spine ``T`` is a random walk with step law f. Tilting an environment forces
every spine edge open; ``Zbar_N`` counts open paths from the origin to
``(N, T_N)`` in the tilted environment and is always at least 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .environment import (BitmaskEnsemble, Edge, EnvSeed, SeedEnsemble, check_parameter,
                          spine_uniforms)
from .harness import Estimate, estimate_from_samples, map_chunks
from .kernel import Kernel, p_max
from .pathcount import (_Batch, _member_exact_totals, _member_totals, _origin_batch, _step,
                        config_probability, evolve_ensemble, reachable_edges, resolve_mode)

MIN_CRITERION_REPLICAS = 10


@dataclass(frozen=True)
class SpineWalk:
    steps: np.ndarray       # (N,) indices into kernel.support
    positions: np.ndarray   # (N+1, d), positions[0] = origin

    @property
    def N(self) -> int:
        return len(self.steps)

    def offsets(self) -> np.ndarray:
        return np.diff(self.positions, axis=0)

    def edges(self) -> list[Edge]:
        pos = [tuple(int(c) for c in r) for r in self.positions]
        return [Edge(n, pos[n], pos[n + 1]) for n in range(self.N)]

    @classmethod
    def from_offsets(cls, k: Kernel, offsets: Sequence[Sequence[int]]) -> SpineWalk:
        index = {z: j for j, z in enumerate(k.support)}
        steps = np.array([index[tuple(z)] for z in offsets], dtype=np.int64)
        pos = np.zeros((len(steps) + 1, k.dim), dtype=np.int64)
        if len(steps):
            pos[1:] = np.cumsum(k.offsets[steps], axis=0)
        return cls(steps, pos)


def _step_cdf(k: Kernel) -> np.ndarray:
    cdf = np.cumsum(k.probs)
    cdf[-1] = 1.0
    return cdf


def sample_spine(k: Kernel, N: int, stream: EnvSeed) -> SpineWalk:
    """N i.i.d. steps with law f, from the spine domain of ``stream``."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    u = spine_uniforms(stream, N)
    steps = np.searchsorted(_step_cdf(k), u, side="right").astype(np.int64)
    steps = np.minimum(steps, len(k) - 1)
    pos = np.zeros((N + 1, k.dim), dtype=np.int64)
    if N:
        pos[1:] = np.cumsum(k.offsets[steps], axis=0)
    return SpineWalk(steps, pos)


class TiltedEnsemble:
    """Members of a base ensemble, each with its own spine forced open."""

    def __init__(self, base, spines: Sequence[SpineWalk]):
        self.base = base
        self.spines = list(spines)
        n = max((s.N for s in self.spines), default=0)
        d = self.spines[0].positions.shape[1] if self.spines else 1
        # padded arrays; levels past a spine's length hold an unreachable marker
        self._pos = np.full((len(self.spines), n + 1, d), np.iinfo(np.int64).min // 4)
        self._steps = np.full((len(self.spines), n), -1, dtype=np.int64)
        for r, s in enumerate(self.spines):
            self._pos[r, :s.N + 1] = s.positions
            self._steps[r, :s.N] = s.steps

    def spine_site(self, rep, level: int) -> np.ndarray:
        return self._pos[rep, level]

    def open_mask(self, rep, level, x, k: Kernel, p) -> np.ndarray:
        rep = np.asarray(rep)
        mask = self.base.open_mask(rep, level, x, k, p)
        if level < self._steps.shape[1] and len(x):
            on = np.all(x == self._pos[rep, level], axis=1) & (self._steps[rep, level] >= 0)
            rows = np.flatnonzero(on)
            mask[rows, self._steps[rep[rows], level]] = True
        return mask


@dataclass
class TiltedEnv:
    """One environment with a spine forced open."""
    base: object
    spine: SpineWalk

    def __post_init__(self):
        self._spine_edges = {(e.level, e.src, e.dst) for e in self.spine.edges()}

    def is_spine_edge(self, e: Edge) -> bool:
        return (e.level, e.src, e.dst) in self._spine_edges

    def edge_open(self, e: Edge, p, k: Kernel) -> bool:
        return self.is_spine_edge(e) or self.base.edge_open(e, p, k)

    def open_mask(self, rep, level, x, k: Kernel, p) -> np.ndarray:
        return TiltedEnsemble(_Single(self.base), [self.spine]).open_mask(rep, level, x, k, p)


class _Single:
    def __init__(self, env):
        self.env = env

    def open_mask(self, rep, level, x, k, p):
        return self.env.open_mask(np.zeros(len(x), dtype=np.int64), level, x, k, p)


def tilt_environment(env, T: SpineWalk) -> TiltedEnv:
    return TiltedEnv(env, T)


# ---------------------------------------------------------------------------
# pinned counts

def _pinned_totals(tilted: TiltedEnsemble, n_members: int, p, k: Kernel, start: int,
                   end: int, start_sites: np.ndarray | None = None, mode: str = "auto"):
    """Counts of open paths from (start, T_start) to (end, T_end) per member.

    Returns (log totals, exact totals or None). Sites that can no longer reach
    the target within the remaining levels are dropped as the frontier evolves.
    """
    log_space = resolve_mode(mode, end - start)
    batch = _origin_batch(n_members, k.dim, log_space)
    members = np.arange(n_members)
    if start_sites is None:
        start_sites = tilted.spine_site(members, start)
    batch.sites = np.array(start_sites, dtype=np.int64).reshape(n_members, k.dim)
    target = tilted.spine_site(members, end)
    reach = k.reach

    def keep(rep, level, y):
        return np.max(np.abs(y - target[rep]), axis=1) <= reach * (end - level)

    offsets = k.offsets
    for n in range(start, end):
        batch = _step(batch, tilted, n, p, k, offsets, keep)
        if batch.rep.size == 0:
            break
    hit = np.all(batch.sites == target[batch.rep], axis=1) if batch.rep.size else \
        np.zeros(0, dtype=bool)
    final = _Batch(batch.rep[hit], batch.sites[hit], batch.vals[hit], log_space)
    logs = _member_totals(final, n_members)
    exact = None if log_space else _member_exact_totals(final, n_members)
    return logs, exact


def pinned_count(te: TiltedEnv, p, k: Kernel, N: int, mode: str = "auto"):
    """Zbar_N: open paths in the tilted environment from the origin to (N, T_N)."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    if N > te.spine.N:
        raise ValueError("spine shorter than N")
    if isinstance(te.base, (EnvSeed, SeedEnsemble)):
        check_parameter(p, k)
    if N == 0:
        return 1
    tilted = TiltedEnsemble(_Single(te.base), [te.spine])
    logs, exact = _pinned_totals(tilted, 1, p, k, 0, N, mode=mode)
    if exact is not None:
        return exact[0]
    from .pathcount import LogCount
    return LogCount(logs[0])


def pinned_log_counts(k: Kernel, p, N: int, seeds: Sequence[EnvSeed],
                      mode: str = "auto") -> np.ndarray:
    """log Zbar_N for each seed; spine and environment both come from the seed."""
    check_parameter(p, k)
    spines = [sample_spine(k, N, s) for s in seeds]
    tilted = TiltedEnsemble(SeedEnsemble(seeds), spines)
    if N == 0:
        return np.zeros(len(seeds))
    logs, _ = _pinned_totals(tilted, len(seeds), p, k, 0, N, mode=mode)
    return logs


# ---------------------------------------------------------------------------
# exact size-bias identity

TEST_FUNCTIONS: dict[str, Callable[[int], int]] = {
    "one": lambda z: 1,
    "identity": lambda z: z,
    "ge2": lambda z: int(z >= 2),
}

MAX_IDENTITY_EDGES = 20


def all_spines(k: Kernel, N: int):
    """Every spine of length N with its exact probability."""
    support = k.support
    for idx in np.ndindex(*([len(support)] * N)):
        prob = Fraction(1)
        for j in idx:
            prob *= Fraction(k.weights[support[j]])
        if prob:
            yield SpineWalk.from_offsets(k, [support[j] for j in idx]), prob


def sizebias_identity_check(k: Kernel, N: int, F: str = "identity", p=1) -> Fraction:
    """E_p E[F(Ztilde_N)] - E_p[W_N F(Z_N)], exactly, by full enumeration.

    Ztilde_N counts all open paths of length N in the spine-tilted environment;
    both sides sum over every configuration of the edges reachable within N
    levels, and the left side also over every spine.
    """
    if not k.exact:
        raise ValueError("the identity check needs rational kernel weights")
    fn = TEST_FUNCTIONS[F] if isinstance(F, str) else F
    edges = reachable_edges(k, N)
    if len(edges) > MAX_IDENTITY_EDGES:
        raise ValueError(f"instance too large: {len(edges)} edges")
    p = Fraction(p)
    configs = np.arange(1 << len(edges), dtype=np.int64)
    probs = [config_probability(edges, int(c), p, k) for c in configs]
    z = evolve_ensemble(BitmaskEnsemble(edges, configs, k), configs.size, p, k, N,
                        "exact").exact_totals
    rhs = sum((pr * Fraction(zc) / p ** N * fn(zc) for pr, zc in zip(probs, z)), Fraction(0))
    index = {e: i for i, e in enumerate(edges)}
    lhs = Fraction(0)
    for T, tp in all_spines(k, N):
        forced = 0
        for e in T.edges():
            forced |= 1 << index[e]
        zt = evolve_ensemble(BitmaskEnsemble(edges, configs | forced, k), configs.size, p, k, N,
                             "exact").exact_totals
        lhs += tp * sum((pr * fn(zc) for pr, zc in zip(probs, zt)), Fraction(0))
    return lhs - rhs


# ---------------------------------------------------------------------------
# finite-volume criterion

VERDICT_MET = "met"
VERDICT_NOT_MET = "not met"
VERDICT_INCONCLUSIVE = "inconclusive"


def verdict(mean: float, ci95: float, threshold: float) -> str:
    if mean - ci95 > threshold:
        return VERDICT_MET
    if mean + ci95 < threshold:
        return VERDICT_NOT_MET
    return VERDICT_INCONCLUSIVE


@dataclass
class CriterionReport:
    N0: int
    p: float
    replicas: int
    mean_logZbar: float
    ci95: float
    threshold: float            # N0 * log p
    verdict: str
    estimate: Estimate
    log_zbar: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.verdict == VERDICT_MET and not self.mean_logZbar - self.ci95 > self.threshold:
            raise ValueError("verdict 'met' needs mean - ci95 > N0 log p")

    @property
    def sigma(self) -> float:
        return self.estimate.sigma

    def to_json(self) -> dict:
        return {"N0": self.N0, "p": self.p, "replicas": self.replicas,
                "mean_logZbar": self.mean_logZbar, "ci95": self.ci95,
                "threshold": self.threshold, "verdict": self.verdict,
                "variance": self.estimate.variance}


def _criterion_chunk(args) -> np.ndarray:
    k, p, N0, seed, streams, mode = args
    return pinned_log_counts(k, p, N0, [EnvSeed(seed, s) for s in streams], mode)


def sample_log_zbar(k: Kernel, p, N0: int, replicas: int, env0: EnvSeed, mode: str = "auto",
                    workers: int | None = None, chunk: int = 500) -> np.ndarray:
    """log Zbar_{N0} for replica streams env0.stream .. env0.stream + replicas - 1."""
    check_parameter(p, k)
    streams = range(env0.stream, env0.stream + replicas)
    parts = map_chunks(_criterion_chunk, streams, chunk,
                       lambda s: (k, p, N0, env0.seed, s, mode), workers)
    return np.concatenate(parts) if parts else np.zeros(0)


def criterion_estimate(k: Kernel, p, N0: int, replicas: int, env0: EnvSeed,
                       mode: str = "auto", workers: int | None = None,
                       chunk: int = 500) -> CriterionReport:
    """Monte Carlo test of E log Zbar_{N0} > N0 log p with a 95% interval."""
    if replicas < MIN_CRITERION_REPLICAS:
        raise ValueError(f"need at least {MIN_CRITERION_REPLICAS} replicas for a CI")
    if N0 < 1:
        raise ValueError("N0 must be >= 1")
    if not 0 < p <= p_max(k):
        raise ValueError(f"p must lie in (0, p_max = {p_max(k)}]")
    logs = sample_log_zbar(k, p, N0, replicas, env0, mode, workers, chunk)
    est = estimate_from_samples(logs)
    thr = N0 * math.log(p)
    return CriterionReport(N0, float(p), replicas, est.mean, est.ci95, thr,
                           verdict(est.mean, est.ci95, thr), est, logs)


# ---------------------------------------------------------------------------
# supermultiplicativity along the spine

@dataclass
class SupermultiplicativityResult:
    zbar_total: np.ndarray     # log Zbar_{N+M}
    zbar_head: np.ndarray      # log Zbar_N
    zbar_tail: np.ndarray      # log Zbar'_M in the environment shifted to (N, T_N)

    @property
    def holds(self) -> np.ndarray:
        # exact integers underlie these logs; compare with a rounding margin
        return self.zbar_total >= self.zbar_head + self.zbar_tail - 1e-9

    @property
    def violations(self) -> int:
        return int((~self.holds).sum())


def supermultiplicativity_check(k: Kernel, p, N: int, M: int, env0: EnvSeed,
                                replicas: int = 1) -> SupermultiplicativityResult:
    """Zbar_{N+M} >= Zbar_N * Zbar'_M on each sampled (spine, environment).

    Zbar'_M counts tilted-open paths from (N, T_N) to (N+M, T_{N+M}), i.e. the
    pinned count in the environment and spine shifted by (N, T_N).
    """
    check_parameter(p, k)
    seeds = [EnvSeed(env0.seed, env0.stream + i) for i in range(replicas)]
    spines = [sample_spine(k, N + M, s) for s in seeds]
    tilted = TiltedEnsemble(SeedEnsemble(seeds), spines)
    mode = "exact" if N + M <= 64 else "log"
    zero = np.zeros(replicas)
    total = _pinned_totals(tilted, replicas, p, k, 0, N + M, mode=mode)[0] if N + M else zero
    head = _pinned_totals(tilted, replicas, p, k, 0, N, mode=mode)[0] if N else zero
    tail = _pinned_totals(tilted, replicas, p, k, N, N + M, mode=mode)[0] if M else zero
    return SupermultiplicativityResult(total, head, tail)


# ---------------------------------------------------------------------------
# bridges

class BridgeBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bridge:
    a: int
    b: int
    path: tuple[tuple[int, ...], ...]   # B_a .. B_b


def find_bridges(te: TiltedEnv, p, k: Kernel, N: int, max_len: int | None = None,
                 budget: int = 10 ** 6) -> list[Bridge]:
    """Open paths leaving the spine at (a, T_a) and first returning at (b, T_b).

    Intermediate sites avoid the spine, so bridges have b >= a + 2 and never
    use a spine edge.
    """
    max_len = N if max_len is None else max_len
    T = [tuple(int(c) for c in r) for r in te.spine.positions[:N + 1]]
    found = []
    visited = 0
    for a in range(N - 1):
        stack = [(a, T[a], (T[a],))]
        while stack:
            n, x, path = stack.pop()
            visited += 1
            if visited > budget:
                raise BridgeBudgetError(f"bridge search budget {budget} exceeded")
            if n - a >= max_len or n >= N:
                continue
            for z in k.support:
                y = tuple(u + v for u, v in zip(x, z))
                e = Edge(n, x, y)
                if te.is_spine_edge(e) or not te.edge_open(e, p, k):
                    continue
                if y == T[n + 1]:
                    if n + 1 - a >= 2:
                        found.append(Bridge(a, n + 1, path + (y,)))
                    continue
                stack.append((n + 1, y, path + (y,)))
    return sorted(found, key=lambda br: (br.a, br.b, br.path))


class _AllOpen:
    def edge_open(self, e, p=None, k=None) -> bool:
        return True


def length2_bridge_counts(k: Kernel, T: SpineWalk) -> list[int]:
    """Lattice bridges of length two at each a, found by bridge search on an
    all-open environment."""
    te = TiltedEnv(_AllOpen(), T)
    counts = [0] * max(T.N - 1, 0)
    for br in find_bridges(te, None, k, T.N, max_len=2):
        if br.b - br.a == 2:
            counts[br.a] += 1
    return counts


def nn_length2_tally(z1: Sequence[int], z2: Sequence[int], d: int) -> int:
    """Case count for consecutive nearest-neighbour increments z1, z2."""
    if tuple(z1) == tuple(z2):
        return 0
    if all(a == -b for a, b in zip(z1, z2)):
        return 2 * d - 1
    return 1


def bridge_equivalence_check(k: Kernel, N: int, p=1) -> tuple[int, int]:
    """(Zbar_N >= 2) == (a bridge exists), over every edge configuration and spine.

    Returns (pairs checked, mismatches).
    """
    edges = reachable_edges(k, N)
    configs = np.arange(1 << len(edges), dtype=np.int64)
    ens = BitmaskEnsemble(edges, configs, k)
    checked = mismatches = 0
    for T, _ in all_spines(k, N):
        tilted = TiltedEnsemble(ens, [T] * configs.size)
        _, zbar = _pinned_totals(tilted, configs.size, p, k, 0, N, mode="exact")
        for r in range(configs.size):
            te = TiltedEnv(ens.member(r), T)
            has_bridge = bool(find_bridges(te, p, k, N))
            checked += 1
            mismatches += (zbar[r] >= 2) != has_bridge
    return checked, mismatches
