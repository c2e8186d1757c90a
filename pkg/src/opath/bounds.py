"""Closed-form threshold bounds and the second moment of the normalized count.

Every evaluator returns a :class:`BoundReport` whose ``ingredients`` hold the
intermediate quantities (return sums, truncation orders, tails) so the value
can be recomputed by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from .kernel import (DivergenceError, Kernel, KernelError, _to_dense, convolve,
                     even_return_probabilities, fit_tail, p_max, return_sum)

LOG2 = math.log(2)
ESCAPE_TOL = 1e-9


@dataclass
class BoundReport:
    name: str
    value: float
    ingredients: dict = field(default_factory=dict)
    note: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "value": self.value,
                "ingredients": self.ingredients, "note": self.note}


def reference_pc_expansion(d: int) -> float:
    """1 + 1/(4 d^2): the known large-d expansion of p_c, for display only."""
    return 1 + 1 / (4 * d * d)


# ---------------------------------------------------------------------------
# nearest-neighbour bounds

def nn_pc2_lower(d: int) -> BoundReport:
    if d < 1:
        raise ValueError("d must be >= 1")
    value = 1 + LOG2 / (2 * d * d)
    note = "leading order as d grows; the o(d^-2) remainder is not bounded"
    if d < 5:
        note += "; small d is outside the asymptotic regime"
    return BoundReport("nn_pc2_lower", value,
                       {"d": d, "log2_over_2d2": LOG2 / (2 * d * d),
                        "reference_pc_expansion": reference_pc_expansion(d)}, note)


def nn_bridge_factor(d: int) -> Fraction:
    """Per-step bound g(d) on the chance that a spine step adds no length-2 bridge.

    With probability 1/(2d) the next increment cancels the current one and 2d-1
    bridges are available; with probability (d-1)/d it is orthogonal and one is
    available; with probability 1/(2d) it repeats and none is. Each available
    bridge is closed with probability at least 1 - (2d)^-2.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    closed = 1 - Fraction(1, (2 * d) ** 2)
    return (Fraction(1, 2 * d) * closed ** (2 * d - 1)
            + Fraction(d - 1, d) * closed + Fraction(1, 2 * d))


def nn_logZbar_lower(d: int, N: int) -> float:
    """log 2 * (1 - g(d)^(N-1)): lower bound on E log Zbar_N at p = 1."""
    if d < 1 or N < 1:
        raise ValueError("d and N must be >= 1")
    return LOG2 * (1 - float(nn_bridge_factor(d)) ** (N - 1))


# ---------------------------------------------------------------------------
# spread-out bounds

def _require_transient(k: Kernel, what: str) -> None:
    if k.dim <= 2:
        raise DivergenceError(f"{what} needs dimension >= 3 (got {k.dim})")
    if not k.symmetric:
        raise KernelError(f"{what} needs a symmetric kernel")


def _sum_ingredients(rs) -> dict:
    return {"return_sum_partial": rs.value, "truncation_k": rs.truncation_k,
            "tail_estimate": rs.tail_estimate, "return_sum": rs.total,
            "tail_fit_residual": rs.fit_residual}


def spreadout_pc2_lower(k: Kernel, rel_tol: float = 1e-3) -> BoundReport:
    """1 + log 2 * sum_{j>=2} f^{*2j}(0)."""
    _require_transient(k, "spreadout_pc2_lower")
    rs = return_sum(k, rel_tol)
    return BoundReport("spreadout_pc2_lower", 1 + LOG2 * rs.total,
                       {**_sum_ingredients(rs), "coefficient": LOG2},
                       "leading order as L grows; remainder O(L^(-3d/2)) not bounded")


def spreadout_pc_asymptotic(k: Kernel, rel_tol: float = 1e-3) -> BoundReport:
    """1 + (1/2) * sum_{j>=2} f^{*2j}(0), the known expansion of p_c itself."""
    _require_transient(k, "spreadout_pc_asymptotic")
    rs = return_sum(k, rel_tol)
    note = "expansion of p_c for large L"
    if k.dim <= 4:
        note += "; established for d > 4, expected but unproved for d = 3, 4"
    return BoundReport("spreadout_pc_asymptotic", 1 + 0.5 * rs.total,
                       {**_sum_ingredients(rs), "coefficient": 0.5}, note)


def spreadout_logZbar_leading(k: Kernel, N0: int) -> float:
    """log 2 * sum_{j=2}^{N0} ((N0 - j)/N0) f^{*2j}(0)."""
    even = even_return_probabilities(k, N0)
    j = np.arange(2, N0 + 1)
    return LOG2 * math.fsum((N0 - j) / N0 * even[2:N0 + 1])


def expected_bridge_mass(k: Kernel, N: int, rel_tol: float = 1e-2):
    """(main, correction) for the expected number of spine bridges.

    main = sum_{j=2}^N (N - j) f^{*2j}(0); correction bounds the subtracted
    double-intersection term by N * (sum_{b>=0} f^{*2b}(0) - 1)^2.
    """
    _require_transient(k, "expected_bridge_mass")
    if N < 2:
        raise ValueError("N must be >= 2")
    even = even_return_probabilities(k, N)
    j = np.arange(2, N + 1)
    main = math.fsum((N - j) * even[2:N + 1])
    rs = return_sum(k, rel_tol)
    green_minus_one = float(even[1]) + rs.total
    return main, N * green_minus_one ** 2


# ---------------------------------------------------------------------------
# second moment

def _difference_law(k: Kernel) -> Kernel:
    """Law of T1 - T2 after one step: f convolved with its reflection."""
    flipped = Kernel(k.dim, {tuple(-c for c in z): w for z, w in k.weights.items()},
                     k.symmetric)
    return convolve(k, flipped)


def _second_moment_exact(k: Kernel, p: Fraction, N: int) -> Fraction:
    g = _difference_law(k).weights
    g0 = g.get((0,) * k.dim, Fraction(0))
    origin = (0,) * k.dim
    mass = {origin: Fraction(1)}
    for _ in range(N):
        new: dict = {}
        for x, m in mass.items():
            for z, w in g.items():
                y = tuple(a + b for a, b in zip(x, z))
                new[y] = new.get(y, 0) + m * w
        m0 = mass.get(origin, 0)
        if m0:
            new[origin] = new.get(origin, 0) + m0 * (1 / p - g0)
        mass = new
    return sum(mass.values(), Fraction(0))


def second_moment(k: Kernel, p, N: int, range_cap: int | None = None,
                  exact: bool = False):
    """E_p[W_N^2] by dynamic programming over the difference walk D = T1 - T2.

    Off the diagonal D moves with law g = f * f-reflected and weight 1. From
    D = 0 the two copies share the next edge with weight 1/p in total, and
    otherwise move to w != 0 with weight g(w). ``range_cap`` limits |D|_inf;
    mass that leaves the box is added once with weight 1 and must stay below
    ``ESCAPE_TOL`` of the total.
    """
    if exact:
        _check_moment_args(k, p, N)
        return _second_moment_exact(k, Fraction(p), N)
    return float(second_moment_sequence(k, p, N, range_cap)[-1])


def _check_moment_args(k: Kernel, p, N: int) -> None:
    if not 0 < p <= p_max(k):
        raise ValueError(f"p must lie in (0, p_max = {p_max(k)}]")
    if N < 0:
        raise ValueError("N must be nonnegative")


def second_moment_sequence(k: Kernel, p, N: int, range_cap: int | None = None) -> np.ndarray:
    """E_p[W_n^2] for n = 0..N from a single pass of the difference-walk DP."""
    _check_moment_args(k, p, N)
    gk = _difference_law(k.to_float())
    g, rg = _to_dense(gk)
    g0 = float(g[(rg,) * k.dim])
    full = rg * N
    R = full if range_cap is None else min(range_cap, full)
    mass = np.zeros((1,) * k.dim)
    mass[(0,) * k.dim] = 1.0
    r = 0
    escaped = 0.0
    inv_p = 1.0 / float(p)
    out = np.empty(N + 1)
    out[0] = 1.0
    for n in range(N):
        m0 = float(mass[(r,) * k.dim])
        new = signal.fftconvolve(mass, g) if mass.size * g.size > 4096 else \
            signal.convolve(mass, g, method="direct")
        np.clip(new, 0.0, None, out=new)
        r += rg
        c = (r,) * k.dim
        new[c] = max(new[c] + m0 * (inv_p - g0), 0.0)
        if r > R:
            cut = r - R
            inner = tuple(slice(cut, new.shape[0] - cut) for _ in range(k.dim))
            escaped += float(new.sum() - new[inner].sum())
            new = new[inner].copy()
            r = R
        mass = new
        out[n + 1] = float(mass.sum()) + escaped
        if escaped > ESCAPE_TOL * out[n + 1]:
            raise KernelError(f"difference walk escaped range_cap={range_cap} with mass "
                              f"{escaped:.3g}; enlarge the cap")
    return out


# ---------------------------------------------------------------------------
# L^2 threshold upper bound

def pc3_upper(k: Kernel, horizon: int = 2000) -> BoundReport:
    """1 / (1 - pi) where pi = P(first steps differ, the copies meet again).

    Writing G = sum_n f^{*2n}(0) for the difference walk's Green function at 0,
    pi = 1 - 1/G - g(0) with g(0) = sum_z f(z)^2. G is summed to ``horizon``
    and a fitted power-law tail brackets the rest.
    """
    _require_transient(k, "pc3_upper")
    if horizon < 6:
        raise ValueError("horizon must be >= 6")
    even = even_return_probabilities(k, horizon)
    g0 = float(even[1])
    green_trunc = math.fsum(even)
    _, tail, resid = fit_tail(even, horizon, k.dim)
    lo = 1 / (1 / green_trunc + g0)
    hi = 1 / (1 / (green_trunc + tail) + g0)
    pi = 1 - 1 / (green_trunc + tail) - g0
    return BoundReport("pc3_upper", hi,
                       {"horizon": horizon, "green_truncated": green_trunc,
                        "green_tail": tail, "tail_fit_residual": resid,
                        "coincidence_probability": g0, "meeting_probability": pi,
                        "bracket": [lo, hi]},
                       "upper bound on the L2 threshold; bracket spans truncated and "
                       "tail-corrected Green function")


def meeting_probability_dense(k: Kernel, horizon: int) -> float:
    """sum_{x != 0} g(x) G_H(x, 0) / G_H(0, 0) from an explicit Green-function table.

    G_H(x, 0) = sum_{n <= H} g^{*n}(x) is accumulated on a dense grid; used as an
    independent check of the closed form in :func:`pc3_upper`.
    """
    g, rg = _to_dense(_difference_law(k.to_float()))
    dist = np.ones((1,) * k.dim)
    green = np.zeros((2 * rg * horizon + 1,) * k.dim)
    R = rg * horizon
    for n in range(horizon + 1):
        r = (dist.shape[0] - 1) // 2
        sl = tuple(slice(R - r, R + r + 1) for _ in range(k.dim))
        green[sl] += dist
        if n < horizon:
            dist = signal.fftconvolve(dist, g) if dist.size * g.size > 4096 else \
                signal.convolve(dist, g, method="direct")
    center = (R,) * k.dim
    sl = tuple(slice(R - rg, R + rg + 1) for _ in range(k.dim))
    weights = g.copy()
    weights[(rg,) * k.dim] = 0.0
    return float((weights * green[sl]).sum() / green[center])


def all_bounds(k: Kernel, rel_tol: float = 1e-3, horizon: int = 2000) -> dict:
    """Every applicable bound for ``k``; failures are reported per bound."""
    out: dict = {}
    fam = k.descriptor.get("family")
    jobs = []
    if fam == "nn":
        d = k.dim
        jobs += [("nn_pc2_lower", lambda: nn_pc2_lower(d).to_json()),
                 ("nn_bridge_factor", lambda: {"name": "nn_bridge_factor",
                                               "value": float(nn_bridge_factor(d)),
                                               "exact": str(nn_bridge_factor(d))})]
    jobs += [("spreadout_pc2_lower", lambda: spreadout_pc2_lower(k, rel_tol).to_json()),
             ("spreadout_pc_asymptotic", lambda: spreadout_pc_asymptotic(k, rel_tol).to_json()),
             ("pc3_upper", lambda: pc3_upper(k, horizon).to_json())]
    for name, job in jobs:
        try:
            out[name] = job()
        except (KernelError, ValueError) as exc:
            out[name] = {"name": name, "error": type(exc).__name__, "message": str(exc)}
    return out
