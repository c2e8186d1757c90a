"""Percolation environments as pure functions of a seed.

Every edge ``[(n, x), (n+1, y)]`` carries a uniform value ``U`` produced by a
keyed counter-based hash; the edge is open at parameter ``p`` iff
``U < p * f(y - x)``. Nothing is stored, so the same seed always reproduces
the same environment and all values of ``p`` are coupled monotonically.

Canonical encoding
------------------
The hash absorbs a sequence of unsigned 64-bit words::

    [DOMAIN_EDGE, n, pack(x), pack(y)]

where ``pack`` writes each coordinate as a 32-bit two's-complement integer and
concatenates them little-endian, two coordinates per word (the last word is
zero-padded when d is odd). The key is the hash state after absorbing the low
and high 64-bit halves of the seed and then the stream index. Each absorption
is ``h = fmix64((h ^ w) * 0x9E3779B97F4A7C15)`` with the MurmurHash3 64-bit
finalizer; the output is ``fmix64(h ^ 0xD6E8FEB86659FD93) >> 11`` scaled by
``2**-53``.
"""

from __future__ import annotations

import contextlib
import secrets
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .kernel import Kernel, p_max

MASK64 = (1 << 64) - 1
_MUL = 0x9E3779B97F4A7C15
_FMIX1 = 0xFF51AFD7ED558CCD
_FMIX2 = 0xC4CEB9FE1A85EC53
_FINAL = 0xD6E8FEB86659FD93
_IV = 0x6A09E667F3BCC908

DOMAIN_EDGE = 0x45444745
DOMAIN_SPINE = 0x5350494E

COORD_LIMIT = 1 << 31


class EnvironmentError_(ValueError):
    pass


class EncodingError(EnvironmentError_):
    """A coordinate does not fit the canonical 32-bit encoding."""


class ParameterError(EnvironmentError_):
    """Percolation parameter outside [0, p_max]."""


# ---------------------------------------------------------------------------
# scalar reference hash (pure Python integers)

def _fmix64(h: int) -> int:
    h ^= h >> 33
    h = (h * _FMIX1) & MASK64
    h ^= h >> 33
    h = (h * _FMIX2) & MASK64
    h ^= h >> 33
    return h


def _absorb(h: int, w: int) -> int:
    return _fmix64(((h ^ (w & MASK64)) * _MUL) & MASK64)


def _finish(h: int) -> float:
    return (_fmix64(h ^ _FINAL) >> 11) * 2.0 ** -53


def pack_coords(x: Sequence[int]) -> list[int]:
    words = []
    for i in range(0, len(x), 2):
        pair = list(x[i:i + 2])
        for c in pair:
            if not -COORD_LIMIT <= c < COORD_LIMIT:
                raise EncodingError(f"coordinate {c} outside the 32-bit encoding range")
        lo = pair[0] & 0xFFFFFFFF
        hi = (pair[1] & 0xFFFFFFFF) if len(pair) == 2 else 0
        words.append(lo | (hi << 32))
    return words


def edge_words(level: int, x: Sequence[int], y: Sequence[int]) -> list[int]:
    if level < 0 or level > MASK64:
        raise EncodingError(f"level {level} outside the 64-bit encoding range")
    return [DOMAIN_EDGE, level] + pack_coords(x) + pack_coords(y)


# ---------------------------------------------------------------------------
# vectorised hash (numpy uint64, wrapping arithmetic)

_U33 = np.uint64(33)
_U11 = np.uint64(11)
_UMUL = np.uint64(_MUL)
_UF1 = np.uint64(_FMIX1)
_UF2 = np.uint64(_FMIX2)
_UFINAL = np.uint64(_FINAL)


def _fmix64_arr(h: np.ndarray) -> np.ndarray:
    h ^= h >> _U33
    h *= _UF1
    h ^= h >> _U33
    h *= _UF2
    h ^= h >> _U33
    return h


def _absorb_arr(h: np.ndarray, w) -> np.ndarray:
    """In place: h <- fmix64((h ^ w) * MUL)."""
    h ^= w
    h *= _UMUL
    return _fmix64_arr(h)


def _finish_arr(h: np.ndarray) -> np.ndarray:
    out = h ^ _UFINAL
    _fmix64_arr(out)
    out >>= _U11
    return out.astype(np.float64) * 2.0 ** -53


def _pack_arr(x: np.ndarray) -> list[np.ndarray]:
    if x.size and (x.min() < -COORD_LIMIT or x.max() >= COORD_LIMIT):
        raise EncodingError("coordinate outside the 32-bit encoding range")
    u = (x.astype(np.int64) & 0xFFFFFFFF).astype(np.uint64)
    words = []
    for i in range(0, x.shape[-1], 2):
        w = u[..., i].copy()
        if i + 1 < x.shape[-1]:
            w |= u[..., i + 1] << np.uint64(32)
        words.append(w)
    return words


def threshold(p, w) -> float:
    """Open-probability p * f(z) as the float the uniform is compared against."""
    return float(Fraction(p) * Fraction(w)) if isinstance(w, Fraction) and \
        isinstance(p, (int, Fraction)) else float(p) * float(w)


def check_parameter(p, k: Kernel) -> None:
    if p < 0 or p > p_max(k):
        raise ParameterError(f"p = {p} outside [0, p_max = {p_max(k)}]")


@dataclass(frozen=True)
class Edge:
    level: int
    src: tuple[int, ...]
    dst: tuple[int, ...]

    def offset(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.src, self.dst))


@dataclass(frozen=True)
class EnvSeed:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < (1 << 128):
            raise ValueError("seed must be a 128-bit nonnegative integer")
        if self.stream < 0:
            raise ValueError("stream must be nonnegative")

    @classmethod
    def random(cls, stream: int = 0) -> EnvSeed:
        return cls(secrets.randbits(128), stream)

    @property
    def key(self) -> int:
        h = _IV
        h = _absorb(h, self.seed & MASK64)
        h = _absorb(h, self.seed >> 64)
        return _absorb(h, self.stream)

    def with_stream(self, stream: int) -> EnvSeed:
        return EnvSeed(self.seed, stream)

    def to_json(self) -> dict:
        return {"seed_hex": f"{self.seed:032x}", "stream": self.stream}

    @classmethod
    def from_json(cls, obj: Mapping) -> EnvSeed:
        return cls(int(obj["seed_hex"], 16), int(obj.get("stream", 0)))

    # environment protocol ---------------------------------------------------
    def edge_open(self, e: Edge, p, k: Kernel) -> bool:
        return is_open(self, e, p, k)

    def open_mask(self, rep, level, x, k, p):
        return SeedEnsemble([self]).open_mask(np.zeros(len(x), dtype=np.int64), level, x, k, p)


_corrupt = False


@contextlib.contextmanager
def corrupted_uniforms():
    """Test hook: make the scalar ``uniform_at`` return shifted values."""
    global _corrupt
    _corrupt = True
    try:
        yield
    finally:
        _corrupt = False


def uniform_at(env: EnvSeed, e: Edge) -> float:
    h = env.key
    for w in edge_words(e.level, e.src, e.dst):
        h = _absorb(h, w)
    u = _finish(h)
    if _corrupt:
        u = (u + 0.5) % 1.0
    return u


def is_open(env: EnvSeed, e: Edge, p, k: Kernel) -> bool:
    check_parameter(p, k)
    w = k.weight(e.offset())
    if w == 0:
        return False
    return uniform_at(env, e) < threshold(p, w)


def spine_uniforms(env: EnvSeed, count: int) -> np.ndarray:
    """Uniforms for spine steps 0..count-1, in a domain disjoint from edges."""
    if count == 0:
        return np.empty(0)
    h = np.full(count, env.key, dtype=np.uint64)
    _absorb_arr(h, np.uint64(DOMAIN_SPINE))
    _absorb_arr(h, np.arange(count, dtype=np.uint64))
    return _finish_arr(h)


class SeedEnsemble:
    """Independent environments, one per seed; row ``rep`` picks the member."""

    def __init__(self, seeds: Sequence[EnvSeed]):
        self.seeds = list(seeds)
        self.keys = np.array([s.key for s in self.seeds], dtype=np.uint64)

    def __len__(self):
        return len(self.seeds)

    def uniforms(self, rep: np.ndarray, level: int, x: np.ndarray,
                 offsets: np.ndarray) -> np.ndarray:
        """U for edges (level, x[i]) -> x[i] + offsets[j]; shape (len(x), len(offsets))."""
        h = self.keys[rep].copy()
        _absorb_arr(h, np.uint64(DOMAIN_EDGE))
        _absorb_arr(h, np.uint64(level))
        for w in _pack_arr(x):
            _absorb_arr(h, w)
        y = x[:, None, :] + offsets[None, :, :]
        hy = np.repeat(h[:, None], len(offsets), axis=1)
        for w in _pack_arr(y):
            _absorb_arr(hy, w)
        return _finish_arr(hy)

    def open_mask(self, rep, level, x, k: Kernel, p) -> np.ndarray:
        thr = np.array([threshold(p, w) for w in k.weights.values()])
        if np.all(thr >= 1.0):
            return np.ones((len(x), len(thr)), dtype=bool)
        cols = np.flatnonzero(thr > 0.0)
        mask = np.zeros((len(x), len(thr)), dtype=bool)
        if cols.size and len(x):
            u = self.uniforms(np.asarray(rep), level, x, k.offsets[cols])
            mask[:, cols] = u < thr[cols]
        return mask

    def edge_open(self, e: Edge, p, k: Kernel, rep: int = 0) -> bool:
        return is_open(self.seeds[rep], e, p, k)


class ExplicitEnvironment:
    """A finite list of edge states; unlisted edges are closed."""

    def __init__(self, states: Mapping[Edge, bool]):
        self.states = dict(states)
        self._open = {(e.level, e.src, e.dst) for e, s in self.states.items() if s}

    def edge_open(self, e: Edge, p=None, k=None) -> bool:
        return (e.level, e.src, e.dst) in self._open

    def open_mask(self, rep, level, x, k: Kernel, p=None) -> np.ndarray:
        offs = k.support
        mask = np.zeros((len(x), len(offs)), dtype=bool)
        for i, row in enumerate(map(tuple, x.tolist())):
            for j, z in enumerate(offs):
                y = tuple(a + b for a, b in zip(row, z))
                mask[i, j] = (level, row, y) in self._open
        return mask


class BitmaskEnsemble:
    """Many configurations of one finite edge list, encoded as integer bitmasks.

    Member ``r`` has edge ``edges[i]`` open iff bit ``i`` of ``configs[r]`` is set.
    """

    def __init__(self, edges: Sequence[Edge], configs, k: Kernel):
        if len(edges) > 62:
            raise ValueError("at most 62 edges fit an int64 bitmask")
        self.edges = list(edges)
        self.configs = np.asarray(configs, dtype=np.int64)
        offs = {z: j for j, z in enumerate(k.support)}
        sites = sorted({(e.level,) + e.src for e in self.edges})
        self._site_index = {s: i for i, s in enumerate(sites)}
        self._table = np.full((len(sites), len(offs)), -1, dtype=np.int64)
        for i, e in enumerate(self.edges):
            self._table[self._site_index[(e.level,) + e.src], offs[e.offset()]] = i
        self._site_keys = np.array([hash_site(s) for s in sites], dtype=np.int64)
        order = np.argsort(self._site_keys)
        self._sorted_keys = self._site_keys[order]
        self._sorted_rows = order

    def __len__(self):
        return len(self.configs)

    def open_mask(self, rep, level, x, k: Kernel, p=None) -> np.ndarray:
        mask = np.zeros((len(x), len(k.support)), dtype=bool)
        if not len(x):
            return mask
        uniq, inv = np.unique(x, axis=0, return_inverse=True)
        ukeys = np.array([hash_site((level,) + tuple(r)) for r in uniq.tolist()], dtype=np.int64)
        keys = ukeys[inv.ravel()]
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        found = self._sorted_keys[pos] == keys
        rows = self._sorted_rows[pos]
        ids = np.where(found[:, None], self._table[rows], -1)
        bits = (self.configs[np.asarray(rep)][:, None] >> np.maximum(ids, 0)) & 1
        mask[:] = (ids >= 0) & (bits == 1)
        return mask

    def member(self, r: int) -> ExplicitEnvironment:
        c = int(self.configs[r])
        return ExplicitEnvironment({e: bool((c >> i) & 1) for i, e in enumerate(self.edges)})


def hash_site(s: tuple) -> int:
    # distinct sites of the small exhaustive instances never collide at this width
    h = 0x345678
    for c in s:
        h = _absorb(h, c)
    return h >> 1


class ShiftedEnv:
    """The environment seen from space-time point (level, site)."""

    def __init__(self, base, level: int, site: Sequence[int]):
        self.base = base
        self.level = level
        self.site = np.asarray(site, dtype=np.int64)

    def open_mask(self, rep, level, x, k: Kernel, p) -> np.ndarray:
        return self.base.open_mask(rep, level + self.level, x + self.site, k, p)

    def edge_open(self, e: Edge, p, k: Kernel) -> bool:
        s = tuple(int(c) for c in self.site)
        shifted = Edge(e.level + self.level,
                       tuple(a + b for a, b in zip(e.src, s)),
                       tuple(a + b for a, b in zip(e.dst, s)))
        return self.base.edge_open(shifted, p, k)


def materialize(env: EnvSeed, p, k: Kernel, N: int) -> ExplicitEnvironment:
    """Explicit states of every edge reachable from the origin within N levels."""
    check_parameter(p, k)
    states = {}
    sites = {(0,) * k.dim}
    for n in range(N):
        nxt = set()
        for x in sorted(sites):
            for z in k.support:
                y = tuple(a + b for a, b in zip(x, z))
                e = Edge(n, x, y)
                states[e] = is_open(env, e, p, k)
                nxt.add(y)
        sites = nxt
    return ExplicitEnvironment(states)
