"""Finitely supported step kernels and their convolution powers.

A kernel is a probability mass function on Z^d with finite support. Weights are
either all :class:`fractions.Fraction` (exact mode) or all floats (real mode).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

Offset = tuple[int, ...]

REAL_NORM_TOL = 1e-12


class KernelError(ValueError):
    """Invalid kernel construction or operation."""


class DivergenceError(KernelError):
    """A return-probability series that does not converge (recurrent walk)."""


class Kernel:
    """Step law f on Z^d.

    Product kernels may be built from their 1D factors (``factors=``); the full
    weight table is then materialised only when first needed.
    """

    def __init__(self, dim: int, weights: Mapping[Offset, Fraction | float] | None = None,
                 symmetric: bool = False, descriptor: Mapping[str, object] | None = None,
                 factors: Sequence[Mapping[int, Fraction | float]] | None = None):
        if dim < 1:
            raise KernelError("dimension must be positive")
        self.dim = dim
        self.symmetric = symmetric
        self.descriptor = dict(descriptor or {})
        self._factors = None
        self._weights = None
        if factors is not None:
            if len(factors) != dim:
                raise KernelError("need one factor per coordinate")
            self._factors = [_normalized({(c,): w for c, w in h.items()}, 1) for h in factors]
            self._factors = [{z[0]: w for z, w in h.items()} for h in self._factors]
            flips_ok = all(_is_reflection_invariant({(c,): w for c, w in h.items()}, 1)
                           for h in self._factors)
        else:
            if not weights:
                raise KernelError("empty support")
            self._weights = _normalized(weights, dim)
            flips_ok = _is_reflection_invariant(self._weights, dim)
        if symmetric and not flips_ok:
            raise KernelError("symmetric flag set but kernel is not sign-flip invariant")

    @property
    def weights(self) -> dict[Offset, Fraction | float]:
        if self._weights is None:
            items = [list(h.items()) for h in self._factors]
            self._weights = {
                tuple(c for c, _ in combo): math.prod(w for _, w in combo)
                for combo in itertools.product(*items)
            }
        return self._weights

    @property
    def product_factors(self):
        return self._factors

    def __eq__(self, other):
        if not isinstance(other, Kernel):
            return NotImplemented
        return self.dim == other.dim and self.weights == other.weights

    def __hash__(self):
        return hash((self.dim, len(self)))

    def __len__(self):
        if self._factors is not None:
            return math.prod(len(h) for h in self._factors)
        return len(self._weights)

    def __repr__(self):
        desc = self.descriptor or {"support": len(self)}
        return f"Kernel(dim={self.dim}, {desc})"

    @property
    def exact(self) -> bool:
        if self._factors is not None:
            return all(isinstance(w, Fraction) for h in self._factors for w in h.values())
        return all(isinstance(w, Fraction) for w in self._weights.values())

    @property
    def support(self) -> list[Offset]:
        return list(self.weights)

    def weight(self, z: Sequence[int]) -> Fraction | float:
        zero = Fraction(0) if self.exact else 0.0
        return self.weights.get(tuple(z), zero)

    @property
    def offsets(self) -> np.ndarray:
        return np.array(self.support, dtype=np.int64).reshape(-1, self.dim)

    @property
    def probs(self) -> np.ndarray:
        return np.array([float(w) for w in self.weights.values()])

    @property
    def reach(self) -> int:
        """Largest |z_i| over the support."""
        if self._factors is not None:
            return max(abs(c) for h in self._factors for c in h)
        return max(abs(c) for z in self._weights for c in z)

    def max_weight(self) -> Fraction | float:
        if self._factors is not None:
            return math.prod(max(h.values()) for h in self._factors)
        return max(self._weights.values())

    def to_float(self) -> Kernel:
        if self._factors is not None:
            return Kernel(self.dim, symmetric=self.symmetric, descriptor=self.descriptor,
                          factors=[{c: float(w) for c, w in h.items()} for h in self._factors])
        return Kernel(self.dim, {z: float(w) for z, w in self.weights.items()},
                      self.symmetric, self.descriptor)

    def to_json(self) -> dict:
        def fmt(w):
            if isinstance(w, Fraction):
                return f"{w.numerator}/{w.denominator}"
            return repr(float(w))
        return {
            "dim": self.dim,
            "entries": [[list(z), fmt(w)] for z, w in self.weights.items()],
            "symmetric": self.symmetric,
        }

    @classmethod
    def from_json(cls, obj: Mapping | str) -> Kernel:
        if isinstance(obj, str):
            obj = json.loads(obj)
        weights = {}
        for z, w in obj["entries"]:
            weights[tuple(z)] = Fraction(w) if "/" in str(w) else float(w)
        return cls(int(obj["dim"]), weights, bool(obj.get("symmetric", False)))


def _normalized(weights: Mapping, dim: int) -> dict:
    clean = {}
    for z, w in weights.items():
        z = tuple(int(c) for c in z)
        if len(z) != dim:
            raise KernelError(f"offset {z} has wrong dimension")
        if w < 0:
            raise KernelError(f"negative weight at {z}")
        if w > 0:
            clean[z] = w
    if not clean:
        raise KernelError("empty support")
    if all(isinstance(w, (Fraction, int)) for w in clean.values()):
        clean = {z: Fraction(w) for z, w in clean.items()}
        if sum(clean.values()) != 1:
            raise KernelError(f"weights sum to {sum(clean.values())}, not 1")
    else:
        clean = {z: float(w) for z, w in clean.items()}
        total = math.fsum(clean.values())
        if abs(total - 1.0) > REAL_NORM_TOL:
            raise KernelError(f"weights sum to {total!r}, not 1")
    return dict(sorted(clean.items()))


def _is_reflection_invariant(weights: Mapping[Offset, object], dim: int) -> bool:
    for z, w in weights.items():
        for i in range(dim):
            flipped = z[:i] + (-z[i],) + z[i + 1:]
            other = weights.get(flipped, 0)
            if isinstance(w, float) or isinstance(other, float):
                if not math.isclose(w, other, rel_tol=1e-12, abs_tol=0.0):
                    return False
            elif w != other:
                return False
    return True


def delta(dim: int) -> Kernel:
    """Point mass at the origin, the identity for convolution."""
    return Kernel(dim, {(0,) * dim: Fraction(1)}, symmetric=True,
                  descriptor={"family": "delta", "d": dim})


def make_nn_kernel(d: int) -> Kernel:
    if d < 1:
        raise KernelError("d must be >= 1")
    w = Fraction(1, 2 * d)
    weights = {}
    for i in range(d):
        for s in (1, -1):
            z = [0] * d
            z[i] = s
            weights[tuple(z)] = w
    return Kernel(d, weights, symmetric=True, descriptor={"family": "nn", "d": d})


def make_box_kernel(d: int, L: int) -> Kernel:
    if d < 1 or L < 1:
        raise KernelError("need d >= 1 and L >= 1")
    side = {c: Fraction(1, 2 * L + 1) for c in range(-L, L + 1)}
    return Kernel(d, symmetric=True, descriptor={"family": "box", "d": d, "L": L},
                  factors=[side] * d)


def make_profile_kernel(profile: Callable[[tuple], float | Fraction], d: int, L: int,
                        support_radius: float = 1.0, name: str | None = None) -> Kernel:
    """Kernel proportional to ``profile(x / L)`` on the lattice.

    ``profile`` receives a tuple of coordinates (Fractions, so exact profiles stay
    exact) and must vanish outside ``[-support_radius, support_radius]^d``.
    """
    if d < 1 or L < 1:
        raise KernelError("need d >= 1 and L >= 1")
    r = int(math.floor(support_radius * L))
    raw = {}
    for x in itertools.product(range(-r, r + 1), repeat=d):
        v = profile(tuple(Fraction(c, L) for c in x))
        if v < 0:
            raise KernelError(f"profile negative at {x}")
        if v > 0:
            raw[x] = v
    if not raw:
        raise KernelError("profile vanishes on every lattice point; increase L")
    if all(isinstance(v, (int, Fraction)) for v in raw.values()):
        total = sum(Fraction(v) for v in raw.values())
        weights = {x: Fraction(v) / total for x, v in raw.items()}
    else:
        total = math.fsum(float(v) for v in raw.values())
        weights = {x: float(v) / total for x, v in raw.items()}
    if not _is_reflection_invariant(weights, d):
        raise KernelError("profile is not invariant under coordinate reflections")
    return Kernel(d, weights, symmetric=True,
                  descriptor={"family": "profile", "d": d, "L": L, "profile": name})


def indicator_profile(x) -> int:
    return int(all(abs(c) <= 1 for c in x))


def tent_profile(x) -> Fraction:
    v = Fraction(1)
    for c in x:
        v *= max(Fraction(0), 1 - abs(Fraction(c)))
    return v


def ball_profile(x) -> int:
    return int(sum(Fraction(c) ** 2 for c in x) <= 1)


PROFILES = {"indicator": indicator_profile, "tent": tent_profile, "ball": ball_profile}


def p_max(k: Kernel) -> Fraction | float:
    top = k.max_weight()
    return 1 / top if isinstance(top, Fraction) else 1.0 / top


def convolve(a: Kernel, b: Kernel) -> Kernel:
    if a.dim != b.dim:
        raise KernelError(f"dimension mismatch: {a.dim} vs {b.dim}")
    symmetric = a.symmetric and b.symmetric
    if a.product_factors is not None and b.product_factors is not None:
        factors = [_convolve_maps(ha, hb) for ha, hb in zip(a.product_factors,
                                                             b.product_factors)]
        return Kernel(a.dim, symmetric=symmetric, factors=factors)
    if a.exact and b.exact:
        out = _convolve_maps(a.weights, b.weights)
        return Kernel(a.dim, out, symmetric=symmetric)
    return _dense_to_kernel(*_dense_convolve(_to_dense(a), _to_dense(b)), a.dim, symmetric)


def _convolve_maps(a: Mapping, b: Mapping) -> dict:
    out: dict = {}
    for (za, wa), (zb, wb) in itertools.product(a.items(), b.items()):
        z = za + zb if isinstance(za, int) else tuple(i + j for i, j in zip(za, zb))
        out[z] = out.get(z, 0) + wa * wb
    return out


def _to_dense(k: Kernel) -> tuple[np.ndarray, int]:
    r = k.reach
    arr = np.zeros((2 * r + 1,) * k.dim)
    arr[tuple((k.offsets + r).T)] = k.probs
    return arr, r


def _dense_convolve(a: tuple[np.ndarray, int], b: tuple[np.ndarray, int]):
    from scipy import signal
    out = signal.fftconvolve(a[0], b[0]) if a[0].size * b[0].size > 4096 else \
        signal.convolve(a[0], b[0], method="direct")
    out[np.abs(out) < 1e-300] = 0.0
    return np.clip(out, 0.0, None), a[1] + b[1]


def _dense_to_kernel(arr: np.ndarray, r: int, dim: int, symmetric: bool) -> Kernel:
    idx = np.argwhere(arr > 1e-17)
    weights = {tuple(int(c) - r for c in i): float(arr[tuple(i)]) for i in idx}
    total = math.fsum(weights.values())
    weights = {z: w / total for z, w in weights.items()}
    return Kernel(dim, weights, symmetric=symmetric)


# ---------------------------------------------------------------------------
# structure detection, used to get convolution powers without d-dim arrays

def _marginals(k: Kernel) -> list[dict[int, Fraction | float]]:
    zero = Fraction(0) if k.exact else 0.0
    margs = [dict() for _ in range(k.dim)]
    for z, w in k.weights.items():
        for i, c in enumerate(z):
            margs[i][c] = margs[i].get(c, zero) + w
    return [dict(sorted(m.items())) for m in margs]


def factorize(k: Kernel) -> list[dict[int, Fraction | float]] | None:
    """Per-coordinate factors if ``k`` is a product measure, else None."""
    if k.product_factors is not None:
        return k.product_factors
    margs = _marginals(k)
    if k.dim == 1:
        return margs
    n_prod = math.prod(len(m) for m in margs)
    if n_prod != len(k.weights):
        return None
    for z, w in k.weights.items():
        prod = math.prod(margs[i][c] for i, c in enumerate(z))
        if k.exact:
            if prod != w:
                return None
        elif not math.isclose(prod, w, rel_tol=1e-10):
            return None
    return margs


def axis_mixture(k: Kernel):
    """Decompose a kernel supported on the coordinate axes.

    Returns ``(w0, [(w_i, h_i)])`` where ``w0`` is the mass at the origin, ``w_i``
    the mass on axis i and ``h_i`` the conditional 1D law on that axis, or None.
    """
    zero = Fraction(0) if k.exact else 0.0
    w0 = zero
    axes: list[dict[int, Fraction | float]] = [dict() for _ in range(k.dim)]
    for z, w in k.weights.items():
        nz = [i for i, c in enumerate(z) if c != 0]
        if not nz:
            w0 += w
        elif len(nz) == 1:
            axes[nz[0]][z[nz[0]]] = w
        else:
            return None
    parts = []
    for h in axes:
        if not h:
            continue
        wi = sum(h.values(), zero)
        parts.append((wi, {c: v / wi for c, v in sorted(h.items())}))
    return w0, parts


def _returns_1d_exact(h: Mapping[int, Fraction], m_max: int) -> list[Fraction]:
    dist = {0: Fraction(1)}
    out = [Fraction(1)]
    for _ in range(m_max):
        nxt: dict[int, Fraction] = {}
        for x, w in dist.items():
            for z, v in h.items():
                nxt[x + z] = nxt.get(x + z, Fraction(0)) + w * v
        dist = nxt
        out.append(dist.get(0, Fraction(0)))
    return out


# past this many steps a 1D return probability comes from a quadrature of the
# characteristic function rather than from repeated convolution
DIRECT_1D_STEPS = 512
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def _returns_1d_float(h: Mapping[int, float], ms: np.ndarray) -> np.ndarray:
    """h^{*m}(0) for each m in the sorted integer array ``ms``."""
    ms = np.asarray(ms, dtype=np.int64)
    out = np.empty(ms.size)
    if ms.size == 0:
        return out
    if all(z % 2 for z in h):
        # period two: odd orders vanish, even orders follow the two-step law on 2Z
        two = {}
        for a, wa in h.items():
            for b, wb in h.items():
                two[(a + b) // 2] = two.get((a + b) // 2, 0.0) + wa * wb
        even = ms % 2 == 0
        out[~even] = 0.0
        out[even] = _returns_1d_float(two, ms[even] // 2)
        return out
    lo, hi = min(h), max(h)
    step = np.zeros(hi - lo + 1)
    for z, v in h.items():
        step[z - lo] = float(v)
    small = ms <= DIRECT_1D_STEPS
    m_direct = int(ms[small].max()) if small.any() else 0
    direct = np.empty(m_direct + 1)
    direct[0] = 1.0
    dist = np.array([1.0])
    origin = 0  # index of site 0 in dist
    for m in range(1, m_direct + 1):
        dist = np.convolve(dist, step)
        origin -= lo
        nz = np.flatnonzero(dist > 1e-300)
        dist = dist[nz[0]:nz[-1] + 1]
        origin -= nz[0]
        direct[m] = dist[origin] if 0 <= origin < dist.size else 0.0
    out[small] = direct[ms[small]]
    if (~small).any():
        out[~small] = _returns_1d_quadrature(h, ms[~small])
    return out


def _char_fn(h: Mapping[int, float], theta: np.ndarray) -> np.ndarray:
    zs = np.array(list(h), dtype=float)
    ws = np.array([float(v) for v in h.values()])
    return np.cos(np.multiply.outer(theta, zs)) @ ws


def _returns_1d_quadrature(h: Mapping[int, float], ms: np.ndarray) -> np.ndarray:
    """h^{*m}(0) = (1/pi) int_0^pi phi(t)^m dt, for large m.

    The integrand is a narrow peak at 0. Orders are processed in bands
    [m0, 2 m0) sharing Gauss-Legendre nodes on [0, t_max(m0)]; the mass beyond
    t_max is bounded by sup |phi|^m0 there and must be negligible.
    """
    var = float(sum(float(v) * z * z for z, v in h.items()))
    mean = float(sum(float(v) * z for z, v in h.items()))
    if abs(mean) > 1e-12 or var == 0:
        raise KernelError("quadrature path needs a centred, non-degenerate step law")
    grid = np.linspace(0.0, math.pi, 20001)[1:]
    phi_grid = np.abs(_char_fn(h, grid))
    out = np.empty(ms.size)
    start = 0
    while start < ms.size:
        m0 = int(ms[start])
        stop = int(np.searchsorted(ms, 2 * m0, side="left"))
        band = ms[start:stop].astype(float)
        tmax = min(math.pi, 40.0 / math.sqrt(m0 * var))
        nodes = 0.5 * tmax * (_GL_NODES + 1.0)
        phi = _char_fn(h, nodes)
        logabs = np.log(np.abs(phi))
        neg = phi < 0
        for lo in range(0, band.size, 4096):
            m = band[lo:lo + 4096]
            vals = np.exp(np.multiply.outer(m, logabs))
            if neg.any():
                odd = (m.astype(np.int64) % 2 == 1)
                vals[np.ix_(odd, neg)] *= -1.0
            out[start + lo:start + lo + m.size] = 0.5 * tmax * (vals @ _GL_WEIGHTS) / math.pi
        if tmax < math.pi:
            sup = phi_grid[grid > tmax].max()
            if sup >= 1.0 - 1e-12:
                raise KernelError("periodic step law: quadrature path not applicable")
            if math.exp(m0 * math.log(sup)) > 1e-17 * out[start]:
                raise KernelError("quadrature remainder not negligible")
        start = stop
    return out


def _merge_axis_returns(seqs: list[tuple], exact: bool, m_max: int):
    """Combine per-class return sequences of a mixture over coordinate classes.

    Splitting m steps among two classes is binomial, so
    P_{A+B}(m) = sum_t Binom(m, t; q) P_B(t) P_A(m - t).
    """
    total, acc = seqs[0]
    for w, seq in seqs[1:]:
        q = w / (total + w)
        if exact:
            merged = []
            for m in range(m_max + 1):
                s = Fraction(0)
                for t in range(m + 1):
                    s += math.comb(m, t) * q ** t * (1 - q) ** (m - t) * seq[t] * acc[m - t]
                merged.append(s)
        else:
            merged = np.empty(m_max + 1)
            acc_arr = np.asarray(acc, dtype=float)
            seq_arr = np.asarray(seq, dtype=float)
            lq, l1q = math.log(float(q)), math.log1p(-float(q))
            lfact = special.gammaln(np.arange(m_max + 1) + 1.0)
            qf = float(q)
            for m in range(m_max + 1):
                # binomial mass beyond 12 standard deviations is below 1e-30
                half = 12.0 * math.sqrt(m * qf * (1 - qf)) + 12.0
                t = np.arange(max(0, int(qf * m - half)), min(m, int(qf * m + half)) + 1)
                pmf = np.exp(lfact[m] - lfact[t] - lfact[m - t] + t * lq + (m - t) * l1q)
                merged[m] = np.dot(pmf * seq_arr[t], acc_arr[m - t])
        total, acc = total + w, merged
    return acc


def _factor_returns(factors, ms: np.ndarray) -> np.ndarray:
    out = np.ones(ms.size)
    cache: dict[tuple, np.ndarray] = {}
    for h in factors:
        key = tuple(sorted((z, float(v)) for z, v in h.items()))
        if key not in cache:
            cache[key] = _returns_1d_float({z: float(v) for z, v in h.items()}, ms)
        out *= cache[key]
    return out


def return_probabilities(k: Kernel, m_max: int, exact: bool | None = None):
    """Sequence f^{*m}(0) for m = 0..m_max.

    Exact (list of Fractions) when ``exact`` is true, which needs an exact kernel;
    otherwise a float array. Product and axis-supported kernels avoid d-dim arrays.
    """
    if exact is None:
        exact = k.exact and m_max <= 64
    if exact and not k.exact:
        raise KernelError("exact mode needs rational weights")
    if m_max < 0:
        raise KernelError("m must be nonnegative")
    factors = factorize(k)
    if factors is not None:
        if exact:
            out = [Fraction(1)] * (m_max + 1)
            for h in factors:
                seq = _returns_1d_exact(h, m_max)
                out = [a * b for a, b in zip(out, seq)]
            return out
        return _factor_returns(factors, np.arange(m_max + 1))
    mix = axis_mixture(k)
    if mix is not None:
        w0, parts = mix
        seqs = []
        if exact:
            if w0 > 0:
                seqs.append((w0, [Fraction(1)] * (m_max + 1)))
            seqs += [(w, _returns_1d_exact(h, m_max)) for w, h in parts]
        else:
            if w0 > 0:
                seqs.append((float(w0), np.ones(m_max + 1)))
            seqs += [(float(w), _returns_1d_float(h, np.arange(m_max + 1))) for w, h in parts]
        return _merge_axis_returns(seqs, exact, m_max)
    return _returns_dense(k, m_max, exact)


# largest order for which mixtures over coordinate classes are merged term by term
MERGE_ORDER_LIMIT = 1 << 18


def even_return_probabilities(k: Kernel, j_max: int) -> np.ndarray:
    """Float array of f^{*2j}(0) for j = 0..j_max."""
    factors = factorize(k)
    if factors is not None:
        return _factor_returns(factors, 2 * np.arange(j_max + 1))
    if 2 * j_max > MERGE_ORDER_LIMIT and axis_mixture(k) is not None:
        raise KernelError(f"order {2 * j_max} exceeds the merge limit {MERGE_ORDER_LIMIT} "
                          "for this kernel; loosen rel_tol or pass a truncation cap")
    return np.asarray(return_probabilities(k.to_float(), 2 * j_max, exact=False))[0::2]


DENSE_CELL_LIMIT = 20_000_000


def _returns_dense(k: Kernel, m_max: int, exact: bool):
    if exact:
        dist = {(0,) * k.dim: Fraction(1)}
        out = [Fraction(1)]
        for _ in range(m_max):
            nxt: dict[Offset, Fraction] = {}
            for x, w in dist.items():
                for z, v in k.weights.items():
                    y = tuple(a + b for a, b in zip(x, z))
                    nxt[y] = nxt.get(y, Fraction(0)) + w * v
            dist = nxt
            out.append(dist.get((0,) * k.dim, Fraction(0)))
        return out
    r = k.reach
    if (2 * r * m_max + 1) ** k.dim > DENSE_CELL_LIMIT:
        raise KernelError(f"convolution power {m_max} too large for a dense {k.dim}-d array")
    step = _to_dense(k)
    cur = (np.ones((1,) * k.dim), 0)
    out = np.empty(m_max + 1)
    out[0] = 1.0
    for m in range(1, m_max + 1):
        cur = _dense_convolve(cur, step)
        out[m] = cur[0][(cur[1],) * k.dim]
    return out


def conv_power_at_zero(k: Kernel, m: int, exact: bool | None = None):
    """f^{*m}(0): probability that the walk with step law f is at 0 after m steps."""
    if m < 0:
        raise KernelError("m must be nonnegative")
    return return_probabilities(k, m, exact)[m]


@dataclass(frozen=True)
class ReturnSum:
    value: float           # partial sum over j = 2..truncation_k
    truncation_k: int
    tail_estimate: float   # fitted c * sum_{j > K} j^{-d/2}
    fit_residual: float    # max relative residual of the power-law fit
    fit_coefficient: float

    def __iter__(self):
        return iter((self.value, self.truncation_k, self.tail_estimate))

    @property
    def total(self) -> float:
        return self.value + self.tail_estimate


def fit_tail(even_returns: np.ndarray, K: int, d: int) -> tuple[float, float, float]:
    """Fit c * j^{-d/2} to f^{*2j}(0), j = K-4..K; return (c, tail beyond K, residual)."""
    js = np.arange(K - 4, K + 1, dtype=float)
    ps = even_returns[K - 4:K + 1]
    basis = js ** (-d / 2)
    c = float(np.dot(ps, basis) / np.dot(basis, basis))
    resid = float(np.max(np.abs(ps - c * basis) / ps)) if np.all(ps > 0) else math.inf
    tail = c * float(special.zeta(d / 2, K + 1)) if d > 2 else math.inf
    return c, tail, resid


MAX_TRUNCATION = 1 << 25


def return_sum(k: Kernel, rel_tol: float = 1e-3, cap: int | None = None) -> ReturnSum:
    """Sum_{j>=2} f^{*2j}(0), truncated at K with a power-law tail estimate.

    K is the smallest power of two for which the fitted tail is below
    ``rel_tol`` times the partial sum, or ``cap`` when one is given.
    """
    if not k.symmetric:
        raise KernelError("return_sum needs a symmetric kernel")
    if k.dim <= 2 and cap is None:
        raise DivergenceError(f"return series diverges in dimension {k.dim}")
    if cap is not None and cap < 6:
        raise KernelError("truncation must be at least 6 for the tail fit")
    K = cap if cap is not None else 64
    while True:
        even = even_return_probabilities(k, K)
        partial = math.fsum(even[2:K + 1])
        c, tail, resid = fit_tail(even, K, k.dim)
        if cap is not None or tail <= rel_tol * partial:
            return ReturnSum(partial, K, tail, resid, c)
        if K >= MAX_TRUNCATION:
            raise KernelError("return_sum did not reach rel_tol before the truncation limit")
        # jump to the K the current fit predicts (tail ~ K^{1-d/2}), then re-check
        grow = (tail / (rel_tol * partial)) ** (1.0 / (k.dim / 2 - 1))
        K = min(MAX_TRUNCATION, max(2 * K, 1 << math.ceil(math.log2(K * grow))))


def kernel_from_spec(family: str, d: int, L: int | None = None,
                     profile: str | None = None) -> Kernel:
    if family == "nn":
        return make_nn_kernel(d)
    if family == "box":
        if L is None:
            raise KernelError("box kernel needs L")
        return make_box_kernel(d, L)
    if family == "profile":
        if L is None or profile is None:
            raise KernelError("profile kernel needs L and a profile name")
        if profile not in PROFILES:
            raise KernelError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return make_profile_kernel(PROFILES[profile], d, L, name=profile)
    raise KernelError(f"unknown kernel family {family!r}")


def describe(k: Kernel) -> dict:
    """Kernel descriptor for manifests: family and parameters if known, else the entries."""
    if k.descriptor:
        return dict(k.descriptor)
    return {"family": "explicit", **k.to_json()}

