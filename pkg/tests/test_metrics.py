import math
import random
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opento.canonical import cantilever
from opento.metrics import (CandidateUnsolvable, EvalRecord, NonPositiveSavings, aggregate, best_of_n, break_even,
                            candidate_compliance, compliance_error, evaluate, is_failure, select_best, time_solver,
                            volume_fraction_error)
from opento.simp import optimize


@pytest.fixture(scope="module")
def solved():
    p = cantilever(24, 12, 0.4)
    return p, optimize(p)


def test_reference_against_itself(solved):
    p, res = solved
    assert abs(compliance_error(res.densities, res.compliance, p)) < 1e-6


@pytest.mark.parametrize("ratio,ce,failed", [(2.0, 1.0, False), (1.05, 0.05, False), (2.0000001, 1.0000001, True),
                                             (0.9, -0.1, False)])
def test_ce_arithmetic_and_failure_threshold(ratio, ce, failed, solved):
    p, res = solved
    c = candidate_compliance(res.densities, p)
    got = compliance_error(res.densities, c / ratio, p)
    assert got == pytest.approx(ce, rel=1e-9)
    assert is_failure(got) is failed


def test_failure_predicate():
    assert not is_failure(1.0) and is_failure(1.0 + 1e-12)
    assert is_failure(math.inf) and is_failure(math.nan) and not is_failure(-0.5)


def test_reference_must_be_positive(solved):
    p, res = solved
    with pytest.raises(ValueError):
        compliance_error(res.densities, 0.0, p)


def test_unsolvable_candidates(solved):
    p, res = solved
    bad = res.densities.copy()
    bad[0] = np.nan
    with pytest.raises(CandidateUnsolvable):
        candidate_compliance(bad, p)
    rec = evaluate(bad, p, res.compliance)
    assert rec.failed and math.isinf(rec.ce)


def test_threshold_option(solved):
    p, res = solved
    binary = (res.densities > 0.5).astype(float)
    assert candidate_compliance(res.densities, p, threshold=0.5) == candidate_compliance(binary, p)


def test_vfe_signed():
    assert volume_fraction_error(np.full(10, 0.5), 0.5) == 0
    assert volume_fraction_error(np.full(10, 0.48), 0.5) == pytest.approx(-0.02)
    with pytest.raises(ValueError):
        volume_fraction_error(np.ones(3), 1.0)


def test_aggregate_small_suite():
    recs = [EvalRecord(0.1, 0.01, False), EvalRecord(0.2, -0.03, False), EvalRecord(3.0, 0.0, True)]
    a = aggregate(recs)
    assert a.mean_ce == pytest.approx(0.15) and a.median_ce == pytest.approx(0.15)
    assert a.failure_rate == pytest.approx(1 / 3) and a.mean_vfe == pytest.approx(-0.01)


def test_aggregate_all_failed_and_empty():
    a = aggregate([EvalRecord(math.inf, math.nan, True)] * 3)
    assert a.all_failed and a.failure_rate == 1.0 and math.isnan(a.mean_ce) and math.isnan(a.median_ce)
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_identical_records():
    a = aggregate([EvalRecord(0.3, 0.1, False)] * 7)
    assert a.mean_ce == a.median_ce == 0.3


def test_aggregate_matches_recomputation_on_1000_records():
    r = random.Random(4)
    recs = []
    for _ in range(1000):
        ce = r.choice([r.uniform(-0.2, 0.9), r.uniform(1.0, 5.0)])
        recs.append(EvalRecord(ce, r.uniform(-0.3, 0.3), is_failure(ce)))
    ok = [x for x in recs if not x.failed]
    a = aggregate(recs)
    assert a.mean_ce == math.fsum(x.ce for x in ok) / len(ok)
    assert a.median_ce == statistics.median(x.ce for x in ok)
    assert a.mean_vfe == math.fsum(x.vfe for x in ok) / len(ok)
    assert a.failure_rate == (1000 - len(ok)) / 1000


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-1, 4), st.floats(-1, 1)), min_size=1, max_size=40), st.randoms())
def test_aggregate_permutation_invariant(pairs, shuffler):
    recs = [EvalRecord(c, v, is_failure(c)) for c, v in pairs]
    shuffled = recs[:]
    shuffler.shuffle(shuffled)
    a, b = aggregate(recs), aggregate(shuffled)
    for x, y in zip(vars(a).values(), vars(b).values()):
        assert (x == y) or (math.isnan(x) and math.isnan(y))


def test_best_of_n(solved):
    p, res = solved
    r = np.random.default_rng(0)
    cands = []
    for frac in (0.4, 0.2, 0.1, 0.3):
        c = res.densities.copy()
        m = r.random(c.size) < frac
        c[m] = 1 - c[m]
        cands.append(c)
    single = best_of_n(cands[:1], p, res.compliance)
    direct = evaluate(cands[0], p, res.compliance)
    assert single.ce == direct.ce and single.failed == direct.failed
    ces = [best_of_n(cands[:n], p, res.compliance).ce for n in range(1, 5)]
    assert all(b <= a for a, b in zip(ces, ces[1:]))
    with pytest.raises(ValueError):
        best_of_n([], p, res.compliance)


def test_select_best_fails_only_if_all_fail():
    bad = EvalRecord(math.inf, math.nan, True, 0.1, math.inf)
    good = EvalRecord(1.5, 0.0, True, 0.1, 2.5)
    better = EvalRecord(0.2, 0.0, False, 0.1, 1.2)
    assert select_best([bad, bad]).failed
    pick = select_best([bad, good, better])
    assert pick.ce == 0.2 and pick.chosen == 2 and pick.wall_time == pytest.approx(0.3)


def test_failure_rate_non_increasing_in_n():
    r = np.random.default_rng(9)
    rates = []
    pool = [[EvalRecord(ce, 0.0, is_failure(ce), 0.0, 1 + ce) for ce in r.uniform(-0.1, 2.5, 8)] for _ in range(200)]
    for n in range(1, 9):
        rates.append(aggregate([select_best(cands[:n]) for cands in pool]).failure_rate)
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_evaluate_with_refinement_reports_time(solved):
    p, res = solved
    rec = evaluate(np.full(p.domain.n_elements, 0.4), p, res.compliance, refine_steps=3, problem_id="x")
    assert rec.wall_time > 0 and rec.problem_id == "x" and math.isfinite(rec.ce)


def test_break_even():
    assert break_even(100, 3, 1) == 50
    for c_infer in (3, 4):
        with pytest.raises(NonPositiveSavings):
            break_even(100, 3, c_infer)


def test_time_solver_modes():
    p = cantilever(16, 16)
    full = time_solver(p, "full_simp", runs=3, warmup=1)
    short = time_solver(p, "refine_10", runs=3, warmup=0)
    assert len(full.samples) == 3 and full.variance >= 0
    assert short.median < full.median
    with pytest.raises(ValueError):
        time_solver(p, "bogus", runs=1)
