"""End-to-end acceptance runs.

Each criterion prints one PASS/FAIL line before asserting. Monte Carlo runs
go through the command line twice, once with one worker and once with two,
and the determinism criterion compares the two sets of output files byte for
byte.
"""
import csv
import io
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from opath.bounds import pc3_upper, second_moment, second_moment_sequence, spreadout_logZbar_leading
from opath.cli import main
from opath.kernel import make_box_kernel, make_nn_kernel
from opath.pathcount import exhaustive_count_check, martingale_defects, reachable_edges
from opath.sizebias import length2_bridge_counts, nn_length2_tally, sample_spine, \
    sizebias_identity_check
from opath.environment import EnvSeed

pytestmark = pytest.mark.slow

RUNS = {
    "mean_one": ["simulate", "--family", "nn", "--d", 2, "--p", 1.2, "--N", 15,
                 "--replicas", 10000, "--seed", "0xA11CE"],
    "pinned_10": ["criterion", "--family", "nn", "--d", 1, "--p", 1, "--N0", 10,
                  "--replicas", 10000, "--seed", 11],
    "pinned_20": ["criterion", "--family", "nn", "--d", 1, "--p", 1, "--N0", 20,
                  "--replicas", 10000, "--seed", 12],
    "pinned_30": ["criterion", "--family", "nn", "--d", 1, "--p", 1, "--N0", 30,
                  "--replicas", 10000, "--seed", 13],
    "criterion_box": ["criterion", "--family", "box", "--d", 3, "--L", 3, "--p", 1,
                      "--N0", 25, "--replicas", 10000, "--seed", 5],
    "second_moment": ["simulate", "--family", "nn", "--d", 3, "--p", 1.5, "--N", 6,
                      "--replicas", 100000, "--seed", 6],
    "gap_L2": ["bounds", "--family", "box", "--d", 5, "--L", 2, "--rel-tol", 1e-4],
    "gap_L4": ["bounds", "--family", "box", "--d", 5, "--L", 4, "--rel-tol", 1e-4],
    "gap_L8": ["bounds", "--family", "box", "--d", 5, "--L", 8, "--rel-tol", 1e-4],
    "growth": ["simulate", "--family", "nn", "--d", 1, "--p", 1.9, "--N", 400,
               "--replicas", 200, "--min-survivors", 200, "--seed", 8],
}


def report(n, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Lazily executes each named run with one and with two workers."""
    root = tmp_path_factory.mktemp("acceptance")
    done = {}

    def get(name):
        if name not in done:
            paths, secs = [], 0.0
            for workers in (1, 2):
                out = root / f"{name}-w{workers}"
                t0 = time.perf_counter()
                code = main([str(a) for a in RUNS[name]] + ["--out", str(out),
                                                            "--workers", str(workers)])
                if workers == 1:
                    secs = time.perf_counter() - t0
                assert code == 0, f"{name} exited with {code}"
                paths.append(out)
            done[name] = (paths[0], paths[1], secs)
        return done[name]

    return get


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print()
            report(n, ok, detail)
    return emit


def csv_rows(path):
    lines = path.read_text().splitlines()
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def test_criterion_1_oracle_equivalence(say):
    t0 = time.perf_counter()
    cases = [(make_nn_kernel(1), N) for N in (1, 2, 3)] + [(make_nn_kernel(2), 2)]
    results = [(exhaustive_count_check(k, N), 2 ** len(reachable_edges(k, N))) for k, N in cases]
    secs = time.perf_counter() - t0
    checked = sum(c for (c, _), _ in results)
    bad = sum(b for (_, b), _ in results)
    complete = all(c == want for (c, _), want in results)
    ok = complete and bad == 0 and secs < 120
    say(1, ok, f"{checked} configurations, {bad} mismatches, {secs:.1f}s")
    assert ok


def test_criterion_2_sizebias_identity(say):
    t0 = time.perf_counter()
    diffs = {F: sizebias_identity_check(make_nn_kernel(1), 2, F, 1) for F in ("one", "identity", "ge2")}
    secs = time.perf_counter() - t0
    ok = all(v == 0 for v in diffs.values()) and secs < 60
    say(2, ok, f"discrepancies {dict((k, str(v)) for k, v in diffs.items())}, {secs:.1f}s")
    assert ok


def test_criterion_3_martingale(runs, say):
    defects = [d for N in (0, 1, 2) for p in (Fraction(1, 2), Fraction(1), Fraction(2))
               for d in martingale_defects(make_nn_kernel(1), N, p)]
    exact_ok = bool(defects) and all(d == 0 for d in defects)
    a, _, _ = runs("mean_one")
    w = np.array([math.exp(float(r["logZ"]) - 15 * math.log(1.2)) if r["survived"] == "1" else 0.0
                  for r in csv_rows(a / "simulate.csv")])
    sigma = w.std(ddof=1) / math.sqrt(w.size)
    mc_ok = abs(w.mean() - 1) <= 3 * sigma
    ok = exact_ok and mc_ok
    say(3, ok, f"{len(defects)} exact conditional checks; E W_15 = {w.mean():.4f} "
               f"+/- {sigma:.4f} (n={w.size})")
    assert ok


def test_criterion_4_bridge_probability(runs, say):
    parts, ok, secs = [], True, 0.0
    for N in (10, 20, 30):
        a, _, s = runs(f"pinned_{N}")
        secs += s
        one = np.array([float(r["logZbar"]) == 0.0 for r in csv_rows(a / "criterion.csv")])
        frac = one.mean()
        sigma = math.sqrt(frac * (1 - frac) / one.size)
        bound = (7 / 8) ** (N - 1)
        ok &= frac <= bound + 3 * sigma
        parts.append(f"N={N}: {frac:.4f} <= {bound:.4f}+3*{sigma:.4f}")
    t0 = time.perf_counter()
    mismatches = 0
    for d in (2, 3):
        k = make_nn_kernel(d)
        for s in range(1000):
            T = sample_spine(k, 12, EnvSeed(0xB41D, s))
            off = [tuple(int(c) for c in z) for z in T.offsets()]
            want = [nn_length2_tally(off[i], off[i + 1], d) for i in range(T.N - 1)]
            mismatches += length2_bridge_counts(k, T) != want
    secs += time.perf_counter() - t0
    ok = bool(ok and mismatches == 0 and secs < 300)
    say(4, ok, "; ".join(parts) + f"; classifier mismatches {mismatches}/2000; {secs:.1f}s")
    assert ok


def test_criterion_5_spreadout_criterion(runs, say):
    a, _, secs = runs("criterion_box")
    rep = json.loads((a / "criterion.json").read_text())["report"]
    sigma = math.sqrt(rep["variance"] / rep["replicas"])
    lead = spreadout_logZbar_leading(make_box_kernel(3, 3), 25)
    ok = rep["verdict"] == "met" and rep["mean_logZbar"] - rep["ci95"] > 0 \
        and rep["mean_logZbar"] >= lead - 3 * sigma and secs < 900
    say(5, ok, f"verdict {rep['verdict']}, mean log Zbar {rep['mean_logZbar']:.4f} "
               f"+/- {rep['ci95']:.4f}, leading term {lead:.4f}, {secs:.1f}s")
    assert ok


def test_criterion_6_second_moment(runs, say):
    k = make_nn_kernel(3)
    dp = second_moment(k, 1.5, 6)
    a, _, _ = runs("second_moment")
    w2 = np.array([math.exp(2 * (float(r["logZ"]) - 6 * math.log(1.5)))
                   if r["survived"] == "1" else 0.0 for r in csv_rows(a / "simulate.csv")])
    sigma = w2.std(ddof=1) / math.sqrt(w2.size)
    mc_ok = abs(w2.mean() - dp) <= 3 * sigma
    hand = second_moment(make_nn_kernel(1), Fraction(1), 1, exact=True)
    above = second_moment_sequence(k, 1.5, 40)
    bounded = 1.5 > pc3_upper(k).value and max(above) <= above[40] * 1.01
    below = second_moment_sequence(k, 1.0, 40)[1:]
    grows = all(x < y for x, y in zip(below, below[1:])) and below[-1] / below[0] > 10
    ok = mc_ok and hand == Fraction(3, 2) and bounded and grows
    say(6, ok, f"DP {dp:.5f} vs MC {w2.mean():.5f} +/- {sigma:.5f}; hand value {hand}; "
               f"bounded at p=1.5 {bounded}; growth ratio at p=1 {below[-1] / below[0]:.1f}")
    assert ok


def test_criterion_7_gap_ratio(runs, say):
    target = 2 * math.log(2)
    parts, ok, secs = [], True, 0.0
    for L in (2, 4, 8):
        a, _, s = runs(f"gap_L{L}")
        secs += s
        b = json.loads((a / "bounds.json").read_text())["bounds"]
        ratio = (b["spreadout_pc2_lower"]["value"] - 1) / (b["spreadout_pc_asymptotic"]["value"] - 1)
        ok &= abs(ratio / target - 1) < 0.05
        parts.append(f"L={L}: {ratio:.6f}")
    ok = bool(ok and secs < 300)
    say(7, ok, "; ".join(parts) + f" (target {target:.6f}); {secs:.1f}s")
    assert ok


def test_criterion_8_growth_gap(runs, say):
    a, _, secs = runs("growth")
    row = json.loads((a / "simulate.json").read_text())["summary"][0]
    est = row["estimate"]
    ok = est["n"] >= 200 and est["mean"] + est["ci95"] < math.log(1.9) and secs < 600
    say(8, ok, f"F estimate {est['mean']:.5f} +/- {est['ci95']:.5f} over {est['n']} survivors "
               f"vs log 1.9 = {math.log(1.9):.5f}; {secs:.1f}s")
    assert ok


def test_criterion_9_determinism(runs, say):
    compared, differ = 0, []
    for name in RUNS:
        a, b, _ = runs(name)
        for f in sorted(a.iterdir()):
            if f.suffix in (".csv", ".json"):
                compared += 1
                if f.read_bytes() != (b / f.name).read_bytes():
                    differ.append(f"{name}/{f.name}")
    ok = compared > 0 and not differ
    say(9, ok, f"{compared} files compared across 1 and 2 workers, differing: {differ or 'none'}")
    assert ok
