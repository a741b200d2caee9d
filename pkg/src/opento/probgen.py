"""Procedural generator of random minimum-compliance problems.

Every problem is drawn from its own counter-based stream: problem ``k`` of
seed ``s`` uses a Philox4x64-10 generator keyed with ``(s, k)``, so any
shard of the index range reproduces the same problems regardless of batch
size or worker count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .fea import (ConstraintGroup, Domain, Kind, LoadGroup, ProblemSpec,
                  SolverError, analyze, assemble, solve)

log = logging.getLogger(__name__)

KINDS = tuple(Kind)
DIRECTIONS = ((True, False), (False, True), (True, True))  # x only, y only, both


class DegenerateFeature(RuntimeError):
    """A placement produced no usable nodes."""


class GenerationStall(RuntimeError):
    """Too many consecutive candidates failed validation."""


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    ec_range: tuple[int, int] = (2**12, 2**14)
    ar_mu: float = 0.0
    ar_sigma: float = 1.0
    ar_clamp: tuple[float, float] = (0.1, 10.0)
    cell_size_range: tuple[float, float] = (1 / 1024, 1 / 64)
    p_load_geom: float = 0.3
    p_constraint_geom: float = 0.2
    kind_probs: tuple[float, ...] = (0.5, 0.1, 0.1, 0.1, 0.1, 0.1)
    dir_probs: tuple[float, float, float] = (0.3, 0.3, 0.4)
    vf_range: tuple[float, float] = (0.05, 0.95)
    max_attempts: int = 10_000
    feature_retries: int = 100
    check_method: str = "banded"

    def __post_init__(self):
        for name in ("kind_probs", "dir_probs"):
            probs = getattr(self, name)
            if not math.isclose(sum(probs), 1.0, abs_tol=1e-12) or min(probs) < 0:
                raise ValueError(f"{name} must be a probability table, got {probs}")
        if len(self.kind_probs) != len(KINDS) or len(self.dir_probs) != 3:
            raise ValueError("probability tables have the wrong length")


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Philox4x64-10 generator keyed by ``(seed, index)``."""
    key = np.array([seed & 0xFFFF_FFFF_FFFF_FFFF, index & 0xFFFF_FFFF_FFFF_FFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def sample_domain(rng: np.random.Generator, config: GenConfig = GenConfig()) -> Domain:
    lo, hi = config.ec_range
    ec = int(rng.integers(lo, hi, endpoint=True))
    ar = float(np.clip(rng.lognormal(config.ar_mu, config.ar_sigma), *config.ar_clamp))
    ny_f = math.sqrt(ec / ar)
    nx, ny = max(1, _round(ar * ny_f)), max(1, _round(ny_f))
    if not lo <= nx * ny <= hi:
        grow = nx * ny < lo
        adjust_x = bool(rng.integers(2))
        while not lo <= nx * ny <= hi:
            step = 1 if grow else -1
            if adjust_x:
                nx += step
            else:
                ny += step
    log_lo, log_hi = np.log(config.cell_size_range)
    cell = float(np.exp(rng.uniform(log_lo, log_hi)))
    return Domain(nx, ny, cell)


def sample_counts(rng: np.random.Generator, config: GenConfig = GenConfig()) -> tuple[int, int]:
    """(NL, NC) = (G1 + 1, G2 + 2) with G ~ Geom(p) on {0, 1, 2, ...}."""
    # numpy's geometric counts trials, i.e. it is supported on {1, 2, ...}
    g1 = int(rng.geometric(config.p_load_geom)) - 1
    g2 = int(rng.geometric(config.p_constraint_geom)) - 1
    return g1 + 1, g2 + 2


def _edge_nodes(domain: Domain, edge: int) -> np.ndarray:
    """Nodes of an edge in order: 0 bottom, 1 right, 2 top, 3 left."""
    nx, ny = domain.nx, domain.ny
    if edge == 0:
        return domain.node_id(np.arange(nx + 1), 0)
    if edge == 1:
        return domain.node_id(nx, np.arange(ny + 1))
    if edge == 2:
        return domain.node_id(np.arange(nx + 1), ny)
    return domain.node_id(0, np.arange(ny + 1))


def corner_nodes(domain: Domain) -> np.ndarray:
    return domain.node_id([0, domain.nx, 0, domain.nx], [0, 0, domain.ny, domain.ny])


def _ellipse_nodes(rng, domain: Domain) -> np.ndarray:
    nx, ny = domain.nx, domain.ny
    cx = rng.uniform(1, nx - 1)
    cy = rng.uniform(1, ny - 1)
    top = max(2.0, min(nx, ny) / 4)
    a, b = rng.uniform(2, top), rng.uniform(2, top)
    filled = bool(rng.integers(2))
    if filled:
        i, j = np.meshgrid(np.arange(1, nx), np.arange(1, ny), indexing="ij")
        inside = ((i - cx) / a) ** 2 + ((j - cy) / b) ** 2 <= 1.0
        i, j = i[inside], j[inside]
    else:
        t = np.linspace(0, 2 * np.pi, int(np.ceil(4 * np.pi * max(a, b))) + 1)
        i = np.floor(cx + a * np.cos(t) + 0.5).astype(np.int64)
        j = np.floor(cy + b * np.sin(t) + 0.5).astype(np.int64)
        keep = (i >= 1) & (i <= nx - 1) & (j >= 1) & (j <= ny - 1)
        i, j = i[keep], j[keep]
    return np.unique(domain.node_id(i, j))


def place_feature(rng: np.random.Generator, domain: Domain, kind: Kind) -> list[int]:
    """Node ids for one load or constraint of the given kind."""
    kind = Kind(kind)
    nx, ny = domain.nx, domain.ny
    if kind is Kind.INTERNAL_POINT:
        if nx < 2 or ny < 2:
            raise DegenerateFeature("domain has no interior nodes")
        nodes = [domain.node_id(rng.integers(1, nx), rng.integers(1, ny))]
    elif kind is Kind.EDGE_POINT:
        edge = _edge_nodes(domain, int(rng.integers(4)))
        if edge.size < 3:
            raise DegenerateFeature("edge has no non-corner node")
        nodes = [edge[rng.integers(1, edge.size - 1)]]
    elif kind is Kind.CORNER_POINT:
        nodes = [corner_nodes(domain)[rng.integers(4)]]
    elif kind is Kind.PARTIAL_EDGE:
        edge = _edge_nodes(domain, int(rng.integers(4)))
        last = edge.size - 1
        if last < 2:
            raise DegenerateFeature("edge too short for a proper sub-segment")
        while True:
            a, b = sorted(int(v) for v in rng.choice(edge.size, size=2, replace=False))
            if (a, b) != (0, last):
                break
        nodes = edge[a:b + 1]
    elif kind is Kind.FULL_EDGE:
        nodes = _edge_nodes(domain, int(rng.integers(4)))
    else:
        nodes = _ellipse_nodes(rng, domain)
    nodes = [int(n) for n in nodes]
    if not nodes:
        raise DegenerateFeature(f"{kind.name} placement is empty")
    return nodes


def assign_load_vector(rng: np.random.Generator, group_size: int) -> tuple[float, float]:
    """Unit total force in a uniform random direction, split equally over the group."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return math.cos(theta) / group_size, math.sin(theta) / group_size


def sample_kind(rng, config: GenConfig = GenConfig()) -> Kind:
    return KINDS[int(rng.choice(len(KINDS), p=config.kind_probs))]


def sample_direction(rng, config: GenConfig = GenConfig()) -> tuple[bool, bool]:
    return DIRECTIONS[int(rng.choice(3, p=config.dir_probs))]


def _place(rng, domain, kind, config):
    for _ in range(config.feature_retries):
        try:
            return place_feature(rng, domain, kind)
        except DegenerateFeature:
            continue
    raise DegenerateFeature(f"{kind.name}: {config.feature_retries} placements failed")


def sample_problem(rng: np.random.Generator, config: GenConfig = GenConfig(), trace: list | None = None) -> ProblemSpec:
    """One unvalidated candidate: domain, counts, loads, constraints, VF.

    ``trace`` (if given) receives the raw (NL, NC) draw, even when placement
    later fails.
    """
    domain = sample_domain(rng, config)
    n_loads, n_constraints = sample_counts(rng, config)
    if trace is not None:
        trace.append((n_loads, n_constraints))
    loads = []
    for _ in range(n_loads):
        kind = sample_kind(rng, config)
        nodes = _place(rng, domain, kind, config)
        loads.append(LoadGroup(nodes, assign_load_vector(rng, len(nodes)), kind))
    constraints = []
    for _ in range(n_constraints):
        kind = sample_kind(rng, config)
        nodes = _place(rng, domain, kind, config)
        fix_x, fix_y = sample_direction(rng, config)
        constraints.append(ConstraintGroup(nodes, fix_x, fix_y, kind))
    vf = float(rng.uniform(*config.vf_range))
    return ProblemSpec(domain, loads, constraints, vf)


@dataclass
class ValidityReport:
    valid: bool
    reasons: list[str] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    compliance: float | None = None
    iterations: int = 0

    def __bool__(self):
        return self.valid


def rigid_body_rank(problem: ProblemSpec) -> int:
    """Rank of the three rigid-body modes restricted to the fixed DOFs."""
    d = problem.domain
    fixed = problem.fixed_dofs()
    if fixed.size == 0:
        return 0
    i, j = d.node_coords(fixed // 2)
    is_x = fixed % 2 == 0
    scale = max(d.nx, d.ny)
    modes = np.column_stack([
        is_x.astype(float),
        (~is_x).astype(float),
        np.where(is_x, -(j - d.ny / 2), i - d.nx / 2) / scale,
    ])
    return int(np.linalg.matrix_rank(modes, tol=1e-9))


def validate(problem: ProblemSpec, numerical: bool = True, method: str = "banded") -> ValidityReport:
    """Check that a problem is fully constrained and not trivially solved.

    Cheap structural checks run first; the full-density solve only runs if
    they all pass. ``method`` selects the solver for that solve (``"cg"``
    runs Jacobi PCG to 1e-8 under the 10 * n_free iteration cap).
    """
    report = ValidityReport(True)

    def check(name, ok, reason):
        report.checks[name] = bool(ok)
        if not ok:
            report.valid = False
            report.reasons.append(reason)

    d = problem.domain
    all_nodes = [n for g in (*problem.loads, *problem.constraints) for n in g.node_ids]
    check("node_ids_in_range", all(0 <= n < d.n_nodes for n in all_nodes), "node index outside the grid")
    check("has_loads", len(problem.loads) >= 1, "no load groups")
    if not report.valid:
        return report

    fixed = problem.fixed_dofs()
    n_fx = int(np.sum(fixed % 2 == 0))
    n_fy = fixed.size - n_fx
    check("fixes_x", n_fx >= 1, "no x-direction fixture")
    check("fixes_y", n_fy >= 1, "no y-direction fixture")
    check("three_fixed_dofs", fixed.size >= 3, "fewer than three fixed DOFs")
    check("rigid_body_fixity", rigid_body_rank(problem) == 3, "a rigid-body motion is unrestrained")

    f = problem.force_vector()
    effective = f.copy()
    effective[fixed] = 0.0
    check("nonzero_effective_load", np.any(effective != 0.0), "every loaded DOF is fixed")
    fixed_set = set(fixed.tolist())
    swallowed = False
    for g in problem.loads:
        loaded = [2 * n for n in g.node_ids if g.force_per_node[0] != 0.0]
        loaded += [2 * n + 1 for n in g.node_ids if g.force_per_node[1] != 0.0]
        if loaded and all(dof in fixed_set for dof in loaded):
            swallowed = True
    check("no_fully_fixed_load", not swallowed, "a load group acts only on fixed DOFs")

    if numerical and report.valid:
        ones = np.ones(d.n_elements)
        try:
            if method == "banded":
                sol = analyze(problem, ones, method="banded")
            else:
                sol = solve(assemble(d, ones), f, fixed, method=method)
            ok = bool(np.all(np.isfinite(sol.displacements))) and sol.compliance > 0 and sol.residual <= 1e-8
            report.compliance = sol.compliance
            report.iterations = sol.iterations
        except SolverError as exc:
            log.debug("full-density solve failed: %s", exc)
            ok = False
        check("full_density_solve", ok, "full-density system does not solve")
    return report


@dataclass
class GenerationResult:
    problem: ProblemSpec
    report: ValidityReport
    attempts: int
    seed: int
    index: int
    raw_counts: list[tuple[int, int]] = field(default_factory=list)


def generate_instance(config: GenConfig = GenConfig(), index: int = 0) -> GenerationResult:
    """Draw candidates from stream (seed, index) until one validates."""
    rng = stream(config.seed, index)
    counts: list[tuple[int, int]] = []
    for attempt in range(1, config.max_attempts + 1):
        try:
            problem = sample_problem(rng, config, counts)
        except DegenerateFeature as exc:
            log.debug("candidate %d discarded: %s", attempt, exc)
            continue
        report = validate(problem, method=config.check_method)
        if report.valid:
            return GenerationResult(problem, report, attempt, config.seed, index, counts)
        log.debug("candidate %d rejected: %s", attempt, "; ".join(report.reasons))
    raise GenerationStall(f"{config.max_attempts} consecutive candidates failed validation")


def generate(config: GenConfig = GenConfig(), index: int = 0) -> ProblemSpec:
    """The ``index``-th valid problem of ``config.seed``'s stream family."""
    return generate_instance(config, index).problem


def generate_many(config: GenConfig, count: int, start: int = 0):
    for k in range(start, start + count):
        yield generate_instance(config, k)
