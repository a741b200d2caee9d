"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad data, unsolvable problem, failed
verification), 2 usage error. Progress goes to stderr; data goes to files or
stdout.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from typing import Iterable, Sequence

import numpy as np

from . import diffusion, metrics, plotting
from .canonical import CANONICAL
from .dataset_io import CorpusError, SampleRecord, corpus_stats, iter_corpus, write_corpus
from .fea import SolverError
from .probgen import GenConfig, GenerationStall, generate_instance
from .simp import BisectionFailure, SimpConfig, optimize, refine

log = logging.getLogger("opento")

EVAL_COLUMNS = ("problem_id", "ce", "vfe", "failed", "wall_time")
SOLVE_COLUMNS = ("seed", "index", "nx", "ny", "volume_fraction", "compliance", "iterations", "converged", "volume")


class DomainError(Exception):
    """Raised for failures that should map to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes (default 1)")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output file (default stdout where possible)")
    g.add_argument("--format", choices=("oto1", "csv"), default=argparse.SUPPRESS, help="output format")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return p


GLOBAL_DEFAULTS = {"seed": 0, "threads": 1, "out": None, "format": None, "verbose": 0}


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="opento", description="Topology-optimization benchmark toolkit.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate random benchmark problems")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--start", type=int, default=0, help="first stream index")
    p.add_argument("--solve", action="store_true", help="store the SIMP optimum with each problem")

    p = sub.add_parser("solve", parents=[common], help="run SIMP on stored or canonical problems")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--problem", help="OTO1 file of labeled records")
    src.add_argument("--canonical", choices=sorted(CANONICAL))
    p.add_argument("--index", type=int, help="record position in the file (default: all)")
    p.add_argument("--max-iters", type=int, default=150)
    p.add_argument("--figures", help="directory for density images")

    p = sub.add_parser("refine", parents=[common], help="run a few SIMP steps from candidate fields")
    p.add_argument("--problem", required=True)
    p.add_argument("--candidates", help="OTO1 file; first record with the same (seed, index) is used (default: uniform start)")
    p.add_argument("--index", type=int)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--figures")

    p = sub.add_parser("eval", parents=[common], help="score candidates against SIMP references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--refine", type=int, default=0, help="refinement steps before scoring (0 = none)")
    p.add_argument("--best-of", type=int, default=1)
    p.add_argument("--threshold", type=float, help="binarize candidates at this level first")
    p.add_argument("--figures", help="figure directory (default: next to --out)")

    p = sub.add_parser("stats", parents=[common], help="summarize an OTO1 corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--figures")

    p = sub.add_parser("sample-math", parents=[common], help="verify diffusion sampling with an oracle denoiser")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--guidance", type=float, default=2.0)
    p.add_argument("--mode", choices=("ddim", "ddpm"), default="ddim")
    p.add_argument("--oracle", action="store_true", default=True, help="use the closed-form denoiser (only option)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("bench", parents=[common], help="time full SIMP against few-step refinement")
    p.add_argument("--canonical", choices=sorted(CANONICAL), default="cantilever")
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--ny", type=int, default=64)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--refine-steps", type=int, default=10)
    p.add_argument("--train-seconds", type=float, help="with --infer-seconds, also report break-even uses")
    p.add_argument("--infer-seconds", type=float)
    p.add_argument("--figures")
    return parser


def _pool_map(fn, items: Sequence, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _writer(args):
    """Text sink for delimited output: --out file or stdout."""
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        return open(args.out, "w", newline="")
    return contextlib.nullcontext(sys.stdout)


def _figure_dir(args, explicit):
    if explicit:
        return explicit
    if args.out:
        return os.path.dirname(os.path.abspath(args.out))
    return None


def _figure_stem(args) -> str:
    return os.path.splitext(os.path.basename(args.out))[0] if args.out else "report"


# ---------------------------------------------------------------- gen / solve


def _gen_one(job):
    config, index, do_solve, max_iters = job
    res = generate_instance(config, index)
    if do_solve:
        out = optimize(res.problem, SimpConfig(max_iters=max_iters))
        return SampleRecord.from_problem(res.problem, out.densities, out.compliance, out.iterations, config.seed, index)
    return SampleRecord.from_problem(res.problem, None, math.nan, 0, config.seed, index)


def cmd_gen(args) -> int:
    if args.count < 1:
        raise DomainError("--count must be >= 1")
    fmt = args.format or ("oto1" if args.out else "csv")
    if fmt == "oto1" and not args.out:
        raise DomainError("OTO1 output needs --out")
    config = GenConfig(seed=args.seed)
    jobs = [(config, k, args.solve, 150) for k in range(args.start, args.start + args.count)]
    records = _pool_map(_gen_one, jobs, args.threads)
    log.info("generated %d problems", len(records))
    if fmt == "oto1":
        n = write_corpus(records, args.out)
        log.info("wrote %d bytes to %s", n, args.out)
    else:
        with _writer(args) as fh:
            w = csv.writer(fh)
            w.writerow(("seed", "index", "nx", "ny", "cell_size", "volume_fraction", "load_groups",
                        "constraint_groups", "compliance"))
            for r in records:
                w.writerow((r.seed, r.index, r.domain.nx, r.domain.ny, repr(r.domain.cell_size),
                            repr(r.volume_fraction), len(r.problem.loads), len(r.problem.constraints),
                            repr(r.final_compliance)))
    return 0


def _select(path, index) -> list[tuple[int, SampleRecord]]:
    chosen = []
    for k, rec in enumerate(iter_corpus(path)):
        if index is None or k == index:
            if not rec.labeled:
                raise DomainError(f"record {k} of {path} has no problem definition")
            chosen.append((k, rec))
    if index is not None and not chosen:
        raise DomainError(f"{path} has no record at position {index}")
    return chosen


def _solve_one(job):
    rec, max_iters = job
    out = optimize(rec.problem, SimpConfig(max_iters=max_iters))
    return out


def _emit_results(args, pairs, fig_dir, tag):
    """pairs: (source record, SimpResult)."""
    fmt = args.format or ("oto1" if args.out and not args.out.endswith(".csv") else "csv")
    records = [SampleRecord.from_problem(r.problem, res.densities, res.compliance, res.iterations, r.seed, r.index)
               for r, res in pairs]
    if fmt == "oto1":
        if not args.out:
            raise DomainError("OTO1 output needs --out")
        write_corpus(records, args.out)
    rows = [(r.seed, r.index, r.domain.nx, r.domain.ny, repr(r.volume_fraction), repr(res.compliance),
             res.iterations, int(res.converged), repr(float(np.mean(res.densities)))) for r, res in pairs]
    sink = _writer(args) if fmt == "csv" else contextlib.nullcontext(sys.stdout)
    with sink as fh:
        w = csv.writer(fh)
        w.writerow(SOLVE_COLUMNS)
        w.writerows(rows)
    if fig_dir:
        for r, res in pairs:
            path = os.path.join(fig_dir, f"{tag}_{r.seed}_{r.index}.png")
            plotting.density_image(res.densities, r.domain, path, f"C = {res.compliance:.5g}")
            log.info("figure %s", path)


def cmd_solve(args) -> int:
    if args.canonical:
        problem = CANONICAL[args.canonical]()
        chosen = [(0, SampleRecord.from_problem(problem, seed=args.seed))]
    else:
        chosen = _select(args.problem, args.index)
    results = _pool_map(_solve_one, [(r, args.max_iters) for _, r in chosen], args.threads)
    for (k, r), res in zip(chosen, results):
        log.info("record %d: C = %.6g after %d iterations (converged=%s)", k, res.compliance, res.iterations,
                 res.converged)
    _emit_results(args, [(r, res) for (_, r), res in zip(chosen, results)], args.figures, "solve")
    return 0


def cmd_refine(args) -> int:
    if not 1 <= args.steps <= 50:
        raise DomainError("--steps must lie in [1, 50]")
    chosen = _select(args.problem, args.index)
    cands = {}
    if args.candidates:
        for c in iter_corpus(args.candidates):
            cands.setdefault(c.key, c)
    pairs = []
    for k, rec in chosen:
        if not args.candidates:
            start = np.full(rec.domain.n_elements, rec.volume_fraction)
        elif rec.key in cands:
            start = cands[rec.key].topology.astype(float)
        else:
            raise DomainError(f"no candidate with key {rec.key} for record {k}")
        res = refine(start, rec.problem, args.steps)
        log.info("record %d: C = %.6g after %d refinement steps", k, res.compliance, args.steps)
        pairs.append((rec, res))
    _emit_results(args, pairs, args.figures, "refine")
    return 0


# ---------------------------------------------------------------- eval


def _eval_problem(job):
    ref, cands, steps, threshold = job
    pid = f"{ref.seed}:{ref.index}"
    c_ref = ref.final_compliance
    if not (math.isfinite(c_ref) and c_ref > 0):
        c_ref = optimize(ref.problem).compliance
    if not cands:
        return pid, []
    return pid, [metrics.evaluate(c.topology.astype(float), ref.problem, c_ref, steps, threshold, problem_id=pid)
                 for c in cands]


def cmd_eval(args) -> int:
    if args.best_of < 1:
        raise DomainError("--best-of must be >= 1")
    if not 0 <= args.refine <= 50:
        raise DomainError("--refine must lie in [0, 50]")
    refs = [r for r in iter_corpus(args.references)]
    if any(not r.labeled for r in refs):
        raise DomainError("reference records must carry their problem definition")
    groups = defaultdict(list)
    for c in iter_corpus(args.candidates):
        groups[c.key].append(c)
    jobs = [(r, groups.get(r.key, [])[: args.best_of], args.refine, args.threshold) for r in refs]
    per_problem = _pool_map(_eval_problem, jobs, args.threads)

    best = []
    for pid, recs in per_problem:
        if not recs:
            log.warning("problem %s has no candidates; counted as failure", pid)
            best.append(metrics.EvalRecord(math.inf, math.nan, True, 0.0, math.inf, pid))
        else:
            best.append(metrics.select_best(recs))
    with _writer(args) as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in best:
            w.writerow((r.problem_id, repr(r.ce), repr(r.vfe), int(r.failed), repr(r.wall_time)))
    agg = metrics.aggregate(best)
    summary = (f"problems={agg.count} failures={agg.failures} failure_rate={agg.failure_rate:.4f} "
               f"mean_ce={agg.mean_ce:.6g} median_ce={agg.median_ce:.6g} mean_vfe={agg.mean_vfe:.6g}")
    log.info(summary)
    if args.out:
        print(summary)

    fig_dir = _figure_dir(args, args.figures)
    if fig_dir:
        stem = _figure_stem(args)
        log.info("figure %s", plotting.ce_histogram(best, os.path.join(fig_dir, f"{stem}_ce_hist.png")))
        ns = list(range(1, args.best_of + 1))
        med, rate = [], []
        for n in ns:
            sub = [metrics.select_best(recs[:n]) if recs else metrics.EvalRecord(math.inf, math.nan, True)
                   for _, recs in per_problem]
            a = metrics.aggregate(sub)
            med.append(a.median_ce)
            rate.append(a.failure_rate)
        log.info("figure %s", plotting.best_of_n_curve(ns, med, rate, os.path.join(fig_dir, f"{stem}_best_of_n.png")))
    return 0


# ---------------------------------------------------------------- stats / sample-math / bench


def cmd_stats(args) -> int:
    stats = corpus_stats(args.input)
    if args.format == "csv":
        with _writer(args) as fh:
            w = csv.writer(fh)
            w.writerow(("quantity", "lo", "hi", "count"))
            w.writerow(("records", "", "", stats.count))
            w.writerow(("labeled", "", "", stats.labeled))
            if stats.count:
                for name, (hist, edges) in stats.histograms(args.bins).items():
                    for h, lo, hi in zip(hist, edges[:-1], edges[1:]):
                        w.writerow((name, repr(float(lo)), repr(float(hi)), int(h)))
    else:
        with _writer(args) as fh:
            fh.write(stats.render(args.bins) + "\n")
    fig_dir = _figure_dir(args, args.figures)
    if fig_dir and stats.count:
        log.info("figure %s", plotting.corpus_histograms(stats, os.path.join(fig_dir, f"{_figure_stem(args)}_corpus.png")))
    return 0


def cmd_sample_math(args) -> int:
    if args.steps < 1 or args.steps > args.T:
        raise DomainError(f"--steps must lie in [1, {args.T}]")
    errs = diffusion.oracle_reconstruction_errors(args.count, args.steps, args.guidance, args.mode, args.seed, args.T)
    s = diffusion.cosine_schedule(args.T)
    rng = np.random.default_rng(args.seed)
    z0, eps = rng.standard_normal((2, 64, 64))
    t = args.T // 2
    zt = diffusion.forward(z0, eps, t, s)
    v = diffusion.velocity_target(z0, eps, t, s)
    x0, e = diffusion.predict_x0_eps(zt, v, t, s)
    roundtrip = max(float(np.max(np.abs(x0 - z0))), float(np.max(np.abs(e - eps))))
    with _writer(args) as fh:
        w = csv.writer(fh)
        w.writerow(("check", "value"))
        w.writerow(("latents", args.count))
        w.writerow(("max_reconstruction_error", repr(float(errs.max()))))
        w.writerow(("mean_reconstruction_error", repr(float(errs.mean()))))
        w.writerow(("velocity_roundtrip_error", repr(roundtrip)))
    ok = errs.max() <= args.tolerance and roundtrip <= 1e-12
    log.info("oracle verification %s", "passed" if ok else "FAILED")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    problem = CANONICAL[args.canonical](args.nx, args.ny)
    timings = [metrics.time_solver(problem, "full_simp", args.runs, args.warmup),
               metrics.time_solver(problem, f"refine_{args.refine_steps}", args.runs, args.warmup)]
    with _writer(args) as fh:
        w = csv.writer(fh)
        w.writerow(("mode", "median_s", "variance_s2", "runs"))
        for t in timings:
            w.writerow((t.mode, repr(t.median), repr(t.variance), len(t.samples)))
        if args.train_seconds is not None and args.infer_seconds is not None:
            tau = metrics.break_even(args.train_seconds, timings[0].median, args.infer_seconds)
            w.writerow(("break_even_uses", repr(tau), "", ""))
    fig_dir = _figure_dir(args, args.figures)
    if fig_dir:
        log.info("figure %s", plotting.timing_chart(timings, os.path.join(fig_dir, f"{_figure_stem(args)}_timing.png")))
    return 0


COMMANDS = {
    "gen": cmd_gen, "solve": cmd_solve, "refine": cmd_refine, "eval": cmd_eval,
    "stats": cmd_stats, "sample-math": cmd_sample_math, "bench": cmd_bench,
}


def run(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(None if argv is None else list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    print("config " + json.dumps(vars(args), sort_keys=True, default=str), file=sys.stderr)
    try:
        if args.threads < 1:
            raise DomainError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except (DomainError, CorpusError, SolverError, GenerationStall, BisectionFailure,
            metrics.NonPositiveSavings, FileNotFoundError, ValueError) as exc:
        print(f"opento: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
