"""SIMP minimum-compliance optimizer: density filter, adjoint sensitivities,
optimality-criteria updates, full optimization and few-step refinement."""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fea import Domain, Material, ProblemSpec, analyze, grid_mesh

log = logging.getLogger(__name__)


class BisectionFailure(RuntimeError):
    """No Lagrange multiplier bracket exists for the volume constraint."""


@dataclass(frozen=True)
class SimpConfig:
    p: float = 3.0
    E_solid: float = 1.0
    E_min: float = 1e-9
    nu: float = 0.3
    filter_radius: float = 1.5
    move_limit: float = 0.2
    oc_damping: float = 0.5
    max_iters: int = 150
    change_tol: float = 0.01
    volume_tol: float = 1e-4
    solver: str = "banded"
    # OC updates are multiplicative, so a design value of exactly 0 can never grow back
    refine_floor: float = 1e-3

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("penalization p must be >= 1")
        if self.filter_radius < 1:
            raise ValueError("filter_radius must be >= 1 element")
        if not 0 < self.move_limit <= 1:
            raise ValueError("move_limit must lie in (0, 1]")
        if not 0 <= self.refine_floor < 1:
            raise ValueError("refine_floor must lie in [0, 1)")

    @property
    def material(self) -> Material:
        return Material(self.E_solid, self.E_min, self.p, self.nu)


@dataclass
class SimpResult:
    densities: np.ndarray  # filtered (physical) field
    design: np.ndarray
    compliance: float
    history: list[float] = field(default_factory=list)
    volumes: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


@functools.lru_cache(maxsize=16)
def filter_matrix(nx: int, ny: int, radius: float) -> sp.csr_matrix:
    """Row-normalized conic filter weights w_ei = max(0, r - dist(e, i))."""
    reach = int(np.ceil(radius)) - 1
    ex, ey = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ex, ey = ex.ravel(), ey.ravel()
    rows, cols, vals = [], [], []
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            w = radius - np.hypot(dx, dy)
            if w <= 0:
                continue
            jx, jy = ex + dx, ey + dy
            ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
            rows.append((ex * ny + ey)[ok])
            cols.append((jx * ny + jy)[ok])
            vals.append(np.full(int(ok.sum()), w))
    n = nx * ny
    H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    H.sort_indices()
    row_sums = np.asarray(H.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(1.0 / row_sums) @ H)


def density_filter(values, domain: Domain, radius: float = 1.5) -> np.ndarray:
    if radius < 1:
        raise ValueError("filter radius must be >= 1")
    return filter_matrix(domain.nx, domain.ny, float(radius)) @ np.asarray(values, dtype=float)


def compliance_sensitivity(densities, displacements, domain: Domain, config: SimpConfig = SimpConfig()) -> np.ndarray:
    """dC/drho_e = -p rho_e^(p-1) (E_solid - E_min) u_e^T K0 u_e."""
    rho = np.asarray(densities, dtype=float)
    energies = grid_mesh(domain, config.nu).element_energies(displacements)
    return -config.p * rho ** (config.p - 1) * (config.E_solid - config.E_min) * energies


def oc_update(x, sensitivities, volume_target: float, config: SimpConfig = SimpConfig(),
              volume_sensitivities=None, physical=None) -> np.ndarray:
    """One optimality-criteria step with a bisected Lagrange multiplier.

    ``physical`` maps design variables to the field whose mean must hit
    ``volume_target`` (the density filter during optimization; identity if
    omitted). When the move limit makes the target unreachable in one step
    the closest reachable field is returned.
    """
    if not 0 < volume_target <= 1:
        raise ValueError("volume_target must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    dc = np.asarray(sensitivities, dtype=float)
    dv = np.ones_like(x) if volume_sensitivities is None else np.asarray(volume_sensitivities, dtype=float)
    ratio = np.maximum(-dc, 0.0) / dv
    if not np.any(ratio > 0):
        raise BisectionFailure("all compliance sensitivities are zero")
    to_physical = (lambda v: v) if physical is None else physical
    lower = np.maximum(0.0, x - config.move_limit)
    upper = np.minimum(1.0, x + config.move_limit)

    def step(lam):
        xn = np.clip(x * (ratio / lam) ** config.oc_damping, lower, upper)
        return xn, float(np.mean(to_physical(xn)))

    lam0 = float(np.mean(ratio[ratio > 0]))
    hi = lam0
    for _ in range(100):
        xn, vol = step(hi)
        if vol <= volume_target:
            break
        hi *= 2
    else:
        log.debug("volume target %.4f not reachable from above", volume_target)
        return xn
    lo = lam0
    for _ in range(100):
        xn, vol = step(lo)
        if vol >= volume_target:
            break
        lo /= 2
    else:
        log.debug("volume target %.4f not reachable from below", volume_target)
        return xn

    xn, vol = step(hi)
    if abs(vol - volume_target) <= config.volume_tol:
        return xn
    while True:
        mid = 0.5 * (lo + hi)
        xn, vol = step(mid)
        if abs(vol - volume_target) <= 0.1 * config.volume_tol or not lo < mid < hi:
            return xn
        if vol > volume_target:
            lo = mid
        else:
            hi = mid


class _Loop:
    """Shared filter -> solve -> sensitivity -> OC iteration."""

    def __init__(self, problem: ProblemSpec, config: SimpConfig):
        self.problem = problem
        self.config = config
        d = problem.domain
        self.W = filter_matrix(d.nx, d.ny, float(config.filter_radius))
        self.WT = sp.csr_matrix(self.W.T)
        self.dv = self.WT @ np.ones(d.n_elements)

    def physical(self, x):
        return self.W @ x

    def evaluate(self, x_phys):
        sol = analyze(self.problem, x_phys, self.config.material, method=self.config.solver)
        return sol.compliance, sol.displacements

    def step(self, x, x_phys, u):
        dc = compliance_sensitivity(x_phys, u, self.problem.domain, self.config)
        return oc_update(x, self.WT @ dc, self.problem.volume_fraction, self.config,
                         volume_sensitivities=self.dv, physical=self.physical)


def optimize(problem: ProblemSpec, config: SimpConfig = SimpConfig()) -> SimpResult:
    """Minimize compliance from the uniform start rho = VF.

    Stops once the largest design change drops below ``change_tol`` or after
    ``max_iters`` updates.
    """
    loop = _Loop(problem, config)
    x = np.full(problem.domain.n_elements, float(problem.volume_fraction))
    return _run(loop, x, config.max_iters, early_exit=True)


def refine(candidate, problem: ProblemSpec, steps: int, config: SimpConfig = SimpConfig()) -> SimpResult:
    """Run exactly ``steps`` SIMP iterations starting from ``candidate``.

    The candidate is clipped to ``[config.refine_floor, 1]`` first so that
    empty elements can still be switched back on.
    """
    if not 1 <= steps <= 50:
        raise ValueError(f"refinement steps must lie in [1, 50], got {steps}")
    x = np.clip(np.asarray(candidate, dtype=float), config.refine_floor, 1.0)
    if x.shape != (problem.domain.n_elements,):
        raise ValueError(f"candidate has shape {x.shape}, expected ({problem.domain.n_elements},)")
    return _run(_Loop(problem, config), x.copy(), steps, early_exit=False)


def _run(loop: _Loop, x, n_iters, early_exit) -> SimpResult:
    config = loop.config
    x_phys = loop.physical(x)
    history, volumes = [], []
    converged = False
    it = 0
    for it in range(1, n_iters + 1):
        c, u = loop.evaluate(x_phys)
        history.append(c)
        x_new = loop.step(x, x_phys, u)
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        x_phys = loop.physical(x)
        volumes.append(float(np.mean(x_phys)))
        log.debug("it %3d  c %.6g  vol %.4f  change %.4f", it, c, volumes[-1], change)
        if early_exit and change < config.change_tol:
            converged = True
            break
    final, _ = loop.evaluate(x_phys)
    return SimpResult(x_phys, x, final, history, volumes, it, converged)
