import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opath.environment import Edge, EnvSeed, ExplicitEnvironment, ShiftedEnv
from opath.kernel import Kernel, make_box_kernel, make_nn_kernel, p_max
from opath.pathcount import count_paths, reachable_edges
from opath.sizebias import (Bridge, BridgeBudgetError, CriterionReport, SpineWalk,
                            bridge_equivalence_check, criterion_estimate, find_bridges,
                            length2_bridge_counts, nn_length2_tally, pinned_count,
                            pinned_log_counts, sample_spine, sizebias_identity_check,
                            supermultiplicativity_check, tilt_environment, verdict)
from opath.harness import estimate_from_samples

ENV = EnvSeed(0x51DE, 0)


def brute_pinned(te, k, N, p):
    """Open paths to (N, T_N) by testing every lattice path edge by edge."""
    target = tuple(int(c) for c in te.spine.positions[N])
    total = 0
    for steps in itertools.product(k.support, repeat=N):
        x = (0,) * k.dim
        ok = True
        for n, z in enumerate(steps):
            y = tuple(a + b for a, b in zip(x, z))
            if not te.edge_open(Edge(n, x, y), p, k):
                ok = False
                break
            x = y
        total += ok and x == target
    return total


# spine ----------------------------------------------------------------------

def test_empty_spine():
    T = sample_spine(make_nn_kernel(2), 0, ENV)
    assert T.N == 0 and T.positions.tolist() == [[0, 0]]


def test_spine_positions_are_prefix_sums():
    k = make_box_kernel(2, 2)
    T = sample_spine(k, 50, ENV)
    assert np.array_equal(T.positions[0], [0, 0])
    assert np.array_equal(np.cumsum(k.offsets[T.steps], axis=0), T.positions[1:])
    assert np.array_equal(T.offsets(), k.offsets[T.steps])


def test_nn1_step_frequencies():
    T = sample_spine(make_nn_kernel(1), 100_000, ENV)
    up = float(np.mean(T.offsets()[:, 0] == 1))
    assert abs(up - 0.5) < 3 * math.sqrt(0.25 / 100_000)


def test_step_law_follows_weights():
    k = Kernel(1, {(-1,): Fraction(1, 6), (0,): Fraction(1, 2), (2,): Fraction(1, 3)})
    n = 100_000
    steps = sample_spine(k, n, EnvSeed(9)).offsets()[:, 0]
    for z, w in k.weights.items():
        q = float(w)
        assert abs(np.mean(steps == z[0]) - q) < 3 * math.sqrt(q * (1 - q) / n)


def test_first_steps_across_streams_are_uniform():
    k = make_nn_kernel(2)
    n = 20_000
    first = np.array([sample_spine(k, 1, EnvSeed(3, s)).steps[0] for s in range(n)])
    counts = np.bincount(first, minlength=4) / n
    assert np.all(np.abs(counts - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n))


def test_box_spine_stays_in_support():
    k = make_box_kernel(2, 1)
    off = sample_spine(k, 5000, ENV).offsets()
    assert np.abs(off).max() <= 1


def test_spine_is_reproducible_and_prefix_stable():
    k = make_nn_kernel(3)
    a, b = sample_spine(k, 40, ENV), sample_spine(k, 25, ENV)
    assert np.array_equal(a.positions[:26], b.positions)


# tilted environment ---------------------------------------------------------------

def test_spine_edges_forced_open_at_p_zero():
    k = make_nn_kernel(2)
    T = sample_spine(k, 20, ENV)
    te = tilt_environment(ENV, T)
    for e in T.edges():
        assert te.edge_open(e, 0, k)
    assert not te.edge_open(Edge(3, (100, 100), (101, 100)), 0, k)


def test_off_spine_edges_defer_to_base():
    k = make_nn_kernel(2)
    T = sample_spine(k, 10, ENV)
    te = tilt_environment(ENV, T)
    for n in range(10):
        x = (n + 50, 0)
        for z in k.support:
            e = Edge(n, x, (x[0] + z[0], z[1]))
            assert te.edge_open(e, 2.2, k) == ENV.edge_open(e, 2.2, k)


def test_tilted_open_mask_matches_scalar():
    k = make_box_kernel(2, 1)
    T = sample_spine(k, 8, ENV)
    te = tilt_environment(ENV, T)
    for n in range(8):
        x = np.array([T.positions[n], T.positions[n] + [1, 0], [7, 7]])
        m = te.open_mask(np.zeros(3, dtype=np.int64), n, x, k, 1.0)
        for i, row in enumerate(x.tolist()):
            for j, z in enumerate(k.support):
                e = Edge(n, tuple(row), (row[0] + z[0], row[1] + z[1]))
                assert m[i, j] == te.edge_open(e, 1.0, k)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1 << 64), st.integers(1, 25), st.floats(0.0, 4.0))
def test_tilted_count_at_least_one(seed, N, p):
    k = make_nn_kernel(2)
    env = EnvSeed(seed)
    te = tilt_environment(env, sample_spine(k, N, env))
    z, _ = count_paths(te, p, k, N, mode="exact")
    zbar = pinned_count(te, p, k, N, mode="exact")
    assert z >= zbar >= 1


# pinned counts ----------------------------------------------------------------------

def test_pinned_trivial_cases():
    k = make_nn_kernel(2)
    T = sample_spine(k, 15, ENV)
    assert pinned_count(tilt_environment(ENV, T), 1.0, k, 0) == 1
    assert pinned_count(tilt_environment(ENV, T), 0, k, 15) == 1


def test_pinned_at_pmax_counts_lattice_paths():
    k = make_nn_kernel(1)
    for s in range(5):
        env = EnvSeed(8, s)
        T = sample_spine(k, 30, env)
        end = int(T.positions[-1, 0])
        assert pinned_count(tilt_environment(env, T), 2, k, 30) == math.comb(30, (30 + end) // 2)


def test_pinned_matches_enumeration_all_environments_nn1():
    k = make_nn_kernel(1)
    edges = reachable_edges(k, 2)
    for offs in ([(1,), (1,)], [(1,), (-1,)], [(-1,), (1,)]):
        T = SpineWalk.from_offsets(k, offs)
        for c in range(1 << len(edges)):
            base = ExplicitEnvironment({e: bool((c >> i) & 1) for i, e in enumerate(edges)})
            te = tilt_environment(base, T)
            assert pinned_count(te, 1, k, 2, mode="exact") == brute_pinned(te, k, 2, 1)


def test_pinned_matches_enumeration_seeded():
    k = make_nn_kernel(2)
    for s in range(8):
        env = EnvSeed(21, s)
        te = tilt_environment(env, sample_spine(k, 6, env))
        assert pinned_count(te, 2.5, k, 6, mode="exact") == brute_pinned(te, k, 6, 2.5)


def test_pinned_log_counts_match_single():
    k = make_box_kernel(2, 1)
    seeds = [EnvSeed(44, s) for s in range(12)]
    logs = pinned_log_counts(k, 3.0, 14, seeds, mode="exact")
    for s, v in zip(seeds, logs):
        z = pinned_count(tilt_environment(s, sample_spine(k, 14, s)), 3.0, k, 14, mode="exact")
        assert v == pytest.approx(math.log(z), abs=1e-12)
    logs_log = pinned_log_counts(k, 3.0, 14, seeds, mode="log")
    assert np.allclose(logs, logs_log, atol=1e-9, rtol=0)


def test_pinned_needs_long_enough_spine():
    k = make_nn_kernel(1)
    with pytest.raises(ValueError):
        pinned_count(tilt_environment(ENV, sample_spine(k, 3, ENV)), 1, k, 4)


# size-bias identity -------------------------------------------------------------------

@pytest.mark.parametrize("F", ["one", "identity", "ge2"])
@pytest.mark.parametrize("p", [Fraction(1), Fraction(1, 2), Fraction(7, 4)])
def test_identity_exact_two_levels(F, p):
    assert sizebias_identity_check(make_nn_kernel(1), 2, F, p) == 0


@pytest.mark.parametrize("F", ["identity", "ge2"])
def test_identity_exact_three_levels(F):
    assert sizebias_identity_check(make_nn_kernel(1), 3, F, 1) == 0


def test_identity_with_custom_function():
    assert sizebias_identity_check(make_nn_kernel(1), 2, lambda z: z * z - 3 * z, 1) == 0


def test_identity_rejects_large_instances():
    with pytest.raises(ValueError):
        sizebias_identity_check(make_nn_kernel(2), 3, "identity")


# criterion -----------------------------------------------------------------------

def test_verdict_three_ways():
    assert verdict(1.0, 0.5, 0.4) == "met"
    assert verdict(1.0, 0.5, 1.6) == "not met"
    assert verdict(1.0, 0.5, 0.7) == "inconclusive"
    assert verdict(1.0, 0.5, 0.5) == "inconclusive"


def test_report_rejects_unjustified_met():
    est = estimate_from_samples([0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        CriterionReport(5, 1.0, 3, 0.2, 1.0, 0.0, "met", est, np.zeros(3))


def test_criterion_refuses_few_replicas():
    with pytest.raises(ValueError):
        criterion_estimate(make_nn_kernel(1), 1.0, 5, 9, ENV)
    with pytest.raises(ValueError):
        criterion_estimate(make_nn_kernel(1), 2.5, 5, 100, ENV)
    with pytest.raises(ValueError):
        criterion_estimate(make_nn_kernel(1), 0, 5, 100, ENV)


def test_criterion_at_p_one_is_nonnegative():
    r = criterion_estimate(make_nn_kernel(2), 1.0, 12, 400, ENV, workers=1)
    assert r.threshold == 0.0 and np.all(r.log_zbar >= 0)
    assert r.mean_logZbar >= 0
    assert r.verdict == ("met" if r.mean_logZbar - r.ci95 > 0 else "inconclusive")
    js = r.to_json()
    assert js["verdict"] == r.verdict and js["replicas"] == 400


def test_criterion_at_pmax_is_deterministic_count():
    k = make_nn_kernel(1)
    r = criterion_estimate(k, 2, 20, 50, ENV, workers=1)
    for i, v in enumerate(r.log_zbar):
        T = sample_spine(k, 20, EnvSeed(ENV.seed, ENV.stream + i))
        end = int(T.positions[-1, 0])
        assert v == pytest.approx(math.log(math.comb(20, (20 + end) // 2)), abs=1e-12)
    assert r.threshold == pytest.approx(20 * math.log(2))


def test_criterion_nn1_above_nn_lower_bound():
    r = criterion_estimate(make_nn_kernel(1), 1.0, 30, 10_000, EnvSeed(0xA11CE), workers=1)
    bound = math.log(2) * (1 - (7 / 8) ** 29)
    assert r.mean_logZbar + r.ci95 >= bound
    assert r.verdict == "met"


@pytest.mark.parametrize("N", [10, 20, 30])
def test_single_path_probability_below_bridge_bound(N):
    logs = pinned_log_counts(make_nn_kernel(1), 1, N,
                             [EnvSeed(0xB0B, s) for s in range(5000)], mode="exact")
    frac = float(np.mean(logs == 0))
    bound = (7 / 8) ** (N - 1)
    assert frac <= bound + 3 * math.sqrt(bound * (1 - bound) / 5000)


# supermultiplicativity --------------------------------------------------------------

def test_supermultiplicativity_nn2_no_violations():
    r = supermultiplicativity_check(make_nn_kernel(2), 1.0, 10, 10, ENV, replicas=1000)
    assert r.violations == 0 and len(r.holds) == 1000


def test_supermultiplicativity_trivial_cases():
    k = make_nn_kernel(2)
    r = supermultiplicativity_check(k, 1.0, 8, 0, ENV, replicas=50)
    assert np.array_equal(r.zbar_total, r.zbar_head) and np.all(r.zbar_tail == 0)
    r0 = supermultiplicativity_check(k, 0, 8, 8, ENV, replicas=50)
    assert np.all(r0.zbar_total == 0) and np.all(r0.zbar_head == 0) and r0.violations == 0


def test_tail_segment_equals_shifted_pinned_count():
    k = make_box_kernel(2, 1)
    N, M = 6, 5
    r = supermultiplicativity_check(k, 2.0, N, M, ENV, replicas=6)
    for i in range(6):
        env = EnvSeed(ENV.seed, ENV.stream + i)
        T = sample_spine(k, N + M, env)
        shifted = SpineWalk.from_offsets(k, [tuple(z) for z in T.offsets()[N:]])
        te = tilt_environment(ShiftedEnv(env, N, T.positions[N]), shifted)
        z = pinned_count(te, 2.0, k, M, mode="exact")
        assert r.zbar_tail[i] == pytest.approx(math.log(z), abs=1e-12)


# bridges ---------------------------------------------------------------------------

def test_no_bridges_at_p_zero():
    k = make_nn_kernel(2)
    te = tilt_environment(ENV, sample_spine(k, 30, ENV))
    assert find_bridges(te, 0, k, 30) == []


def test_bridges_are_valid_paths():
    k = make_nn_kernel(2)
    for s in range(10):
        env = EnvSeed(12, s)
        T = sample_spine(k, 12, env)
        te = tilt_environment(env, T)
        pos = [tuple(int(c) for c in r) for r in T.positions]
        for br in find_bridges(te, 1.5, k, 12):
            assert br.b - br.a >= 2 and len(br.path) == br.b - br.a + 1
            assert br.path[0] == pos[br.a] and br.path[-1] == pos[br.b]
            for c in range(br.a + 1, br.b):
                assert br.path[c - br.a] != pos[c]
            for n in range(br.a, br.b):
                e = Edge(n, br.path[n - br.a], br.path[n - br.a + 1])
                assert te.edge_open(e, 1.5, k) and not te.is_spine_edge(e)


@pytest.mark.parametrize("N", [2, 3])
def test_bridge_iff_two_pinned_paths(N):
    checked, bad = bridge_equivalence_check(make_nn_kernel(1), N)
    assert bad == 0 and checked == 2 ** N * 2 ** len(reachable_edges(make_nn_kernel(1), N))


def test_bridge_budget():
    k = make_nn_kernel(2)
    te = tilt_environment(ENV, sample_spine(k, 20, ENV))
    with pytest.raises(BridgeBudgetError):
        find_bridges(te, 4, k, 20, budget=50)


def test_length2_tally_cases():
    for d in (2, 3, 4):
        e1 = (1,) + (0,) * (d - 1)
        e2 = (0, 1) + (0,) * (d - 2)
        neg = tuple(-c for c in e1)
        assert nn_length2_tally(e1, e1, d) == 0
        assert nn_length2_tally(e1, neg, d) == 2 * d - 1
        assert nn_length2_tally(e1, e2, d) == 1


@pytest.mark.parametrize("d", [2, 3])
def test_length2_bridges_match_case_analysis(d):
    k = make_nn_kernel(d)
    for s in range(20):
        T = sample_spine(k, 15, EnvSeed(99, s))
        off = [tuple(int(c) for c in z) for z in T.offsets()]
        want = [nn_length2_tally(off[a], off[a + 1], d) for a in range(T.N - 1)]
        assert length2_bridge_counts(k, T) == want


def test_bridge_record_is_hashable():
    assert len({Bridge(0, 2, ((0,), (1,), (0,))), Bridge(0, 2, ((0,), (1,), (0,)))}) == 1
