"""Benchmark metrics: compliance error, volume-fraction error, failure
classification, best-of-N selection, timing and break-even analysis."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fea import Material, ProblemSpec, SolverError, analyze
from .simp import SimpConfig, optimize, refine

FAILURE_CE = 1.0


class CandidateUnsolvable(RuntimeError):
    """The candidate's stiffness system could not be solved."""


class NonPositiveSavings(ValueError):
    """Inference is not cheaper than optimization, so no break-even exists."""


@dataclass
class EvalRecord:
    ce: float
    vfe: float
    failed: bool
    wall_time: float = 0.0
    compliance: float = math.nan
    problem_id: str = ""
    chosen: int = 0


def is_failure(ce: float) -> bool:
    """Failure means CE strictly above 100%, or no finite CE at all."""
    return not math.isfinite(ce) or ce > FAILURE_CE


def candidate_compliance(candidate, problem: ProblemSpec, threshold: float | None = None,
                         material: Material = Material()) -> float:
    """Compliance of a candidate field under SIMP penalization.

    Gray values are used as-is unless ``threshold`` is given, in which case
    the field is binarized at that level first.
    """
    rho = np.asarray(candidate, dtype=float)
    if rho.shape != (problem.domain.n_elements,):
        raise ValueError(f"candidate has shape {rho.shape}, expected ({problem.domain.n_elements},)")
    if not np.all(np.isfinite(rho)):
        raise CandidateUnsolvable("candidate contains non-finite densities")
    rho = np.clip(rho, 0.0, 1.0)
    if threshold is not None:
        rho = (rho > threshold).astype(float)
    try:
        c = analyze(problem, rho, material).compliance
    except SolverError as exc:
        raise CandidateUnsolvable(str(exc)) from exc
    if not math.isfinite(c):
        raise CandidateUnsolvable("non-finite compliance")
    return c


def compliance_error(candidate, reference_compliance: float, problem: ProblemSpec,
                     threshold: float | None = None, material: Material = Material()) -> float:
    """(C(candidate) - C_ref) / C_ref; negative when the candidate is stiffer."""
    if not reference_compliance > 0:
        raise ValueError("reference compliance must be positive")
    c = candidate_compliance(candidate, problem, threshold, material)
    return (c - reference_compliance) / reference_compliance


def volume_fraction_error(candidate, target_vf: float) -> float:
    """Signed mean(rho) - target."""
    if not 0 < target_vf < 1:
        raise ValueError("target volume fraction must lie in (0, 1)")
    return float(np.mean(np.asarray(candidate, dtype=float))) - target_vf


def evaluate(candidate, problem: ProblemSpec, reference_compliance: float, refine_steps: int = 0,
             threshold: float | None = None, config: SimpConfig = SimpConfig(), problem_id: str = "") -> EvalRecord:
    """Score one candidate, optionally after a few refinement steps.

    ``wall_time`` covers the refinement only (zero without refinement).
    """
    rho = np.asarray(candidate, dtype=float)
    start = time.perf_counter()
    try:
        if refine_steps:
            rho = refine(rho, problem, refine_steps, config).densities
        wall = time.perf_counter() - start
        c = candidate_compliance(rho, problem, threshold, config.material)
    except (CandidateUnsolvable, SolverError, ArithmeticError, RuntimeError):
        return EvalRecord(math.inf, math.nan, True, time.perf_counter() - start, math.inf, problem_id)
    ce = (c - reference_compliance) / reference_compliance
    vfe = volume_fraction_error(rho, problem.volume_fraction)
    return EvalRecord(ce, vfe, is_failure(ce), wall, c, problem_id)


def best_of_n(candidates: Sequence, problem: ProblemSpec, reference_compliance: float, refine_steps: int = 0,
              threshold: float | None = None, config: SimpConfig = SimpConfig(), problem_id: str = "") -> EvalRecord:
    """Keep the lowest-compliance solvable candidate; fail only if all fail."""
    if len(candidates) < 1:
        raise ValueError("best_of_n needs at least one candidate")
    records = [evaluate(c, problem, reference_compliance, refine_steps, threshold, config, problem_id)
               for c in candidates]
    return select_best(records)


def select_best(records: Sequence[EvalRecord]) -> EvalRecord:
    """Pick the lowest-compliance solvable record; ties keep the earliest."""
    best, best_k = None, 0
    for k, r in enumerate(records):
        if math.isfinite(r.compliance) and (best is None or r.compliance < best.compliance):
            best, best_k = r, k
    total_time = math.fsum(r.wall_time for r in records)
    if best is None:
        return EvalRecord(math.inf, math.nan, True, total_time, math.inf, records[0].problem_id, 0)
    return EvalRecord(best.ce, best.vfe, best.failed, total_time, best.compliance, best.problem_id, best_k)


@dataclass
class Aggregate:
    mean_ce: float
    median_ce: float
    mean_vfe: float
    failure_rate: float
    count: int
    failures: int

    @property
    def all_failed(self) -> bool:
        return self.failures == self.count


def aggregate(records: Sequence[EvalRecord]) -> Aggregate:
    """Suite summary; CE and VFE statistics skip failed records.

    ``fsum`` keeps the means exactly rounded, hence independent of order.
    When every record failed the CE/VFE entries are NaN.
    """
    if not records:
        raise ValueError("cannot aggregate an empty suite")
    ok = [r for r in records if not r.failed]
    n_failed = len(records) - len(ok)
    rate = n_failed / len(records)
    if not ok:
        return Aggregate(math.nan, math.nan, math.nan, rate, len(records), n_failed)
    ces = [r.ce for r in ok]
    return Aggregate(
        math.fsum(ces) / len(ces),
        statistics.median(ces),
        math.fsum(r.vfe for r in ok) / len(ok),
        rate, len(records), n_failed,
    )


def break_even(c_train: float, c_simp: float, c_infer: float) -> float:
    """Uses needed before training pays off: c_train / (c_simp - c_infer)."""
    savings = c_simp - c_infer
    if not savings > 0:
        raise NonPositiveSavings(f"per-use savings {savings!r} must be positive")
    return c_train / savings


@dataclass
class Timing:
    mode: str
    samples: list[float] = field(default_factory=list)

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def variance(self) -> float:
        return statistics.variance(self.samples) if len(self.samples) > 1 else 0.0


def time_solver(problem: ProblemSpec, mode: str = "full_simp", runs: int = 10, warmup: int = 1,
                config: SimpConfig = SimpConfig()) -> Timing:
    """Median wall clock of a pipeline over ``runs`` repeats after warm-up.

    ``full_simp`` runs all ``config.max_iters`` iterations with no early
    exit; ``refine_<k>`` runs k refinement steps from the uniform field.
    """
    if mode == "full_simp":
        cfg = SimpConfig(**{**config.__dict__, "change_tol": 0.0})

        def job():
            optimize(problem, cfg)
    elif mode.startswith("refine_"):
        steps = int(mode.split("_", 1)[1])
        start = np.full(problem.domain.n_elements, problem.volume_fraction)

        def job():
            refine(start, problem, steps, config)
    else:
        raise ValueError(f"unknown timing mode {mode!r}")
    for _ in range(warmup):
        job()
    timing = Timing(mode)
    for _ in range(runs):
        t0 = time.perf_counter()
        job()
        timing.samples.append(time.perf_counter() - t0)
    return timing
