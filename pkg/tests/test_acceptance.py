"""Acceptance criteria 1-9.

Each test prints a ``CRITERION k: PASS/FAIL`` line (also collected into the
terminal summary). Criteria 5, 6 and 8 run the full experiments and take
on the order of an hour each on a single core; select the fast ones with
``pytest tests/test_acceptance.py -k "not slow"``.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from fluidrpm.cli import EXIT_OK, main
from fluidrpm.experiments import Condition, run_extensive, run_naive_condition
from fluidrpm.model import init, gradient_check
from fluidrpm.optim import loss_bound, loss_dis, loss_pred
from fluidrpm.solver import SolveConfig
from fluidrpm.testgen import FEATURES, FeatureName, SeqSpec, check_invariants, generate_test

pytestmark = pytest.mark.acceptance

C, S, N = FeatureName.COLOR, FeatureName.SIZE, FeatureName.NUMBER
DIFFICULT = {r: frozenset(f for f in FEATURES if f is not r) for r in (C, S)}


def minutes(t0: float) -> float:
    return (time.perf_counter() - t0) / 60


def test_c1_gradient_check(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    params = init(2024, dtype=np.float64)
    report = gradient_check(params, rng.uniform(0.0, 1.0, (100, 100)), num_coords=100, rng=rng, h=1e-3)
    enc = sum(n.startswith("enc.") for n, _ in report.coords)
    pred = sum(n.startswith("pred.") for n, _ in report.coords)
    elapsed = minutes(t0)
    ok = len(report.coords) == 100 and enc > 0 and pred > 0 and report.max_rel_error < 1e-6 and elapsed < 2
    acceptance_report(
        1, ok,
        f"max rel err {report.max_rel_error:.3g} over {len(report.coords)} coords "
        f"({enc} encoder, {pred} predictor; {len(report.rejected)} kink-crossing draws redrawn), {elapsed:.2f} min",
    )
    assert ok


def test_c2_generator_invariants(acceptance_report):
    t0 = time.perf_counter()
    conditions = []
    for rule in (C, S, N):
        others = [f for f in FEATURES if f is not rule]
        for mask in range(1 << len(others)):
            conditions.append((rule, [f for b, f in enumerate(others) if mask >> b & 1]))
    rng = np.random.default_rng(7)
    bad, counts = 0, np.zeros(4, int)
    for i in range(10_000):
        rule, ds = conditions[i % len(conditions)]
        test = generate_test(SeqSpec.with_distractors(rule, ds), rng)
        bad += bool(check_invariants(test))
        counts[test.correct] += 1
    p = chisquare(counts).pvalue
    elapsed = minutes(t0)
    ok = bad == 0 and p > 0.01 and elapsed < 2
    acceptance_report(
        2, ok,
        f"{10_000 - bad}/10000 valid over {len(conditions)} conditions, correct-index counts {counts.tolist()} "
        f"chi-square p={p:.3f}, {elapsed:.2f} min",
    )
    assert ok


def test_c3_loss_closed_forms(acceptance_report):
    dis = loss_dis([0.0, 0.2], 0.2).item()
    bound = loss_bound([1.1]).item()
    z = [0.3, -0.1, 0.7, 0.2]
    pred = loss_pred(z, z[1:]).item()
    ok = abs(dis - math.exp(-1)) <= 1e-6 and abs(bound - 0.21) <= 1e-6 and pred == 0.0
    acceptance_report(3, ok, f"loss_dis={dis:.8f} (e^-1={math.exp(-1):.8f}), loss_bound={bound:.8f}, loss_pred={pred}")
    assert ok


def test_c4_chance_baseline(acceptance_report):
    t0 = time.perf_counter()
    cfg = SolveConfig(steps=0, record_traces=False)
    hits = sum(run_naive_condition(Condition(r), 500, base, cfg).successes for r, base in ((C, 10_000), (S, 20_000)))
    rate = hits / 1000
    elapsed = minutes(t0)
    ok = 0.21 <= rate <= 0.29 and elapsed < 10
    acceptance_report(4, ok, f"untrained accuracy {hits}/1000 = {rate:.3f} (band [0.21, 0.29]), {elapsed:.1f} min")
    assert ok


@pytest.fixture(scope="module")
def easy_results():
    """Criterion 5 runs: 50 color + 50 size easy tests, 200 steps, traces on."""
    t0 = time.perf_counter()
    cfg = SolveConfig(steps=200, record_traces=True)
    results = [run_naive_condition(Condition(C), 50, 30_000, cfg), run_naive_condition(Condition(S), 50, 40_000, cfg)]
    return results, minutes(t0)


@pytest.mark.slow
def test_c5_naive_easy(easy_results, acceptance_report):
    results, elapsed = easy_results
    hits = sum(r.successes for r in results)
    failed = sum(r.failures for r in results)
    ok = hits >= 75 and elapsed <= 60
    acceptance_report(
        5, ok,
        f"easy accuracy {hits}/100 (color {results[0].successes}/50, size {results[1].successes}/50, "
        f"{failed} diverged), need >= 75; {elapsed:.1f} min (budget 60)",
    )
    assert ok


@pytest.mark.slow
def test_c6_naive_difficult(acceptance_report):
    t0 = time.perf_counter()
    cfg = SolveConfig(steps=200, record_traces=False)
    results = [run_naive_condition(Condition(r, DIFFICULT[r]), 50, base, cfg) for r, base in ((C, 50_000), (S, 60_000))]
    hits = sum(r.successes for r in results)
    elapsed = minutes(t0)
    ok = hits >= 37 and elapsed <= 60
    acceptance_report(
        6, ok,
        f"difficult accuracy {hits}/100 (color {results[0].successes}/50, size {results[1].successes}/50), "
        f"need >= 37; {elapsed:.1f} min (budget 60)",
    )
    assert ok


@pytest.mark.slow
def test_c7_separation(easy_results, acceptance_report):
    results, _ = easy_results
    steps = [r.first_separation_step for res in results for r in res.records if r.correct]
    early = sum(s is not None and s <= 50 for s in steps)
    share = early / len(steps) if steps else 0.0
    median = float(np.median([s for s in steps if s is not None])) if steps else float("nan")
    ok = bool(steps) and share >= 0.5
    acceptance_report(
        7, ok,
        f"{early}/{len(steps)} correct easy solves separate by step 50 ({share:.0%}, need >= 50%); "
        f"median separation step {median:g} (the reference observation is under 10 steps)",
    )
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("rule", [C, S], ids=["color", "size"])
def test_c8_extensive_training(rule, acceptance_report):
    t0 = time.perf_counter()
    curve, _ = run_extensive(rule, num_train_sequences=2000, steps_per_sequence=2, eval_every=500, test_set_size=50, seed=0)
    gain = curve.final_accuracy - curve.initial_accuracy
    elapsed = minutes(t0)
    # 20 points on 50 tests is 10 more hits; compare counts to avoid float rounding
    ok = round(curve.final_accuracy * 50) - round(curve.initial_accuracy * 50) >= 10 and elapsed <= 90
    curve_text = ", ".join(f"{k}:{a:.2f}" for k, a in curve.points)
    acceptance_report(
        8, ok,
        f"rule={rule.value}: accuracy {curve.initial_accuracy:.2f} -> {curve.final_accuracy:.2f} "
        f"(gain {gain:+.2f}, need >= +0.20) curve [{curve_text}]; {elapsed:.1f} min (budget 90)",
    )
    assert ok


def test_c9_selftest_determinism(tmp_path, acceptance_report):
    argv = ["selftest", "--seed", "11", "--coords", "10", "--tests", "100", "--steps", "10"]
    codes = [main(argv + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    a, b = (tmp_path / "a" / "traces.csv").read_bytes(), (tmp_path / "b" / "traces.csv").read_bytes()
    ok = codes == [EXIT_OK, EXIT_OK] and a == b and len(a) > 0
    acceptance_report(9, ok, f"selftest exit codes {codes}, traces byte-identical: {a == b} ({len(a)} bytes)")
    assert ok
