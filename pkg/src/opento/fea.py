"""Structured-grid finite elements for 2D static linear elasticity.

Mesh conventions
----------------
Nodes sit on an ``(nx + 1) x (ny + 1)`` lattice with ``x`` to the right and
``y`` upward. Node ``(i, j)`` has index ``n = i * (ny + 1) + j`` and owns the
DOFs ``(2n, 2n + 1) = (u_x, u_y)``. Element ``(ex, ey)`` has index
``e = ex * ny + ey`` and visits its corners counter-clockwise from the
lower-left one::

    n4 ---- n3
    |        |
    n1 ---- n2
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import scipy.linalg


class SolverError(RuntimeError):
    """The reduced stiffness system could not be solved."""


class NonConvergence(SolverError):
    """Conjugate gradients hit the iteration cap."""


class SingularSystem(SolverError):
    """Cholesky factorization found the reduced system not positive definite."""


class Kind(enum.IntEnum):
    INTERNAL_POINT = 0
    EDGE_POINT = 1
    CORNER_POINT = 2
    PARTIAL_EDGE = 3
    FULL_EDGE = 4
    INTERNAL_DISTRIBUTED = 5


@dataclass(frozen=True)
class Domain:
    nx: int
    ny: int
    cell_size: float = 1.0 / 64

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"domain needs at least one element per side, got {self.nx}x{self.ny}")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def aspect_ratio(self) -> float:
        return self.nx / self.ny

    @property
    def in_generator_range(self) -> bool:
        """Element count inside the generator's [2^12, 2^14] window."""
        return 2**12 <= self.n_elements <= 2**14

    def node_id(self, i, j):
        return np.asarray(i) * (self.ny + 1) + np.asarray(j)

    def node_coords(self, node_ids) -> tuple[np.ndarray, np.ndarray]:
        node_ids = np.asarray(node_ids)
        return node_ids // (self.ny + 1), node_ids % (self.ny + 1)


@dataclass(frozen=True)
class LoadGroup:
    node_ids: tuple[int, ...]
    force_per_node: tuple[float, float]
    kind: Kind = Kind.INTERNAL_POINT

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(int(n) for n in self.node_ids))
        object.__setattr__(self, "force_per_node", tuple(float(c) for c in self.force_per_node))
        object.__setattr__(self, "kind", Kind(self.kind))


@dataclass(frozen=True)
class ConstraintGroup:
    node_ids: tuple[int, ...]
    fix_x: bool
    fix_y: bool
    kind: Kind = Kind.INTERNAL_POINT

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(int(n) for n in self.node_ids))
        object.__setattr__(self, "fix_x", bool(self.fix_x))
        object.__setattr__(self, "fix_y", bool(self.fix_y))
        object.__setattr__(self, "kind", Kind(self.kind))


@dataclass(frozen=True)
class ProblemSpec:
    domain: Domain
    loads: tuple[LoadGroup, ...]
    constraints: tuple[ConstraintGroup, ...]
    volume_fraction: float

    def __post_init__(self):
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def force_vector(self) -> np.ndarray:
        return force_vector(self.domain, self.loads)

    def fixed_dofs(self) -> np.ndarray:
        return fixed_dofs(self.domain, self.constraints)


@dataclass
class FeaSolution:
    displacements: np.ndarray
    compliance: float
    iterations: int = 0
    residual: float = 0.0
    method: str = "cg"


@dataclass(frozen=True)
class Material:
    E_solid: float = 1.0
    E_min: float = 1e-9
    p: float = 3.0
    nu: float = 0.3


def element_stiffness(nu: float = 0.3, E: float = 1.0) -> np.ndarray:
    """Plane-stress Q4 stiffness of a unit square element, unit thickness.

    Element size does not enter: for a square element the strain-displacement
    matrix scales as 1/h while the area scales as h^2.
    """
    if not 0 <= nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return E / (1 - nu**2) * k[idx]


def force_vector(domain: Domain, loads) -> np.ndarray:
    f = np.zeros(domain.n_dofs)
    for group in loads:
        nodes = np.asarray(group.node_ids, dtype=np.int64)
        np.add.at(f, 2 * nodes, group.force_per_node[0])
        np.add.at(f, 2 * nodes + 1, group.force_per_node[1])
    return f


def fixed_dofs(domain: Domain, constraints) -> np.ndarray:
    dofs = []
    for group in constraints:
        nodes = np.asarray(group.node_ids, dtype=np.int64)
        if group.fix_x:
            dofs.append(2 * nodes)
        if group.fix_y:
            dofs.append(2 * nodes + 1)
    if not dofs:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(dofs))


class GridMesh:
    """Connectivity and sparsity pattern of a structured Q4 grid.

    The CSR pattern is built once; ``assemble`` then only scatters the
    element contributions into a fixed data array, which keeps repeated
    assembly inside an optimization loop cheap and bit-reproducible.
    """

    def __init__(self, domain: Domain, nu: float = 0.3):
        self.domain = domain
        self.nu = nu
        self.ke = element_stiffness(nu, 1.0)
        nx, ny = domain.nx, domain.ny
        ex, ey = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        ex, ey = ex.ravel(), ey.ravel()
        n1 = ex * (ny + 1) + ey
        n2 = (ex + 1) * (ny + 1) + ey
        n3 = n2 + 1
        n4 = n1 + 1
        nodes = np.stack([n1, n2, n3, n4], axis=1)
        self.edof = np.empty((domain.n_elements, 8), dtype=np.int64)
        self.edof[:, 0::2] = 2 * nodes
        self.edof[:, 1::2] = 2 * nodes + 1

        self._pattern = None

    def _csr_pattern(self):
        if self._pattern is None:
            rows = np.repeat(self.edof, 8, axis=1).ravel()
            cols = np.tile(self.edof, (1, 8)).ravel()
            ndof = self.domain.n_dofs
            uniq, slot = np.unique(rows * ndof + cols, return_inverse=True)
            indices = (uniq % ndof).astype(np.int32)
            indptr = np.searchsorted(uniq // ndof, np.arange(ndof + 1)).astype(np.int32)
            self._pattern = slot, indices, indptr
        return self._pattern

    def element_moduli(self, densities, material: Material) -> np.ndarray:
        rho = np.asarray(densities, dtype=float)
        return material.E_min + rho**material.p * (material.E_solid - material.E_min)

    def assemble(self, densities, material: Material = Material()) -> sp.csr_matrix:
        rho = np.asarray(densities, dtype=float)
        if rho.shape != (self.domain.n_elements,):
            raise ValueError(f"expected {self.domain.n_elements} densities, got shape {rho.shape}")
        scale = self.element_moduli(rho, material)
        values = (scale[:, None] * self.ke.ravel()[None, :]).ravel()
        slot, indices, indptr = self._csr_pattern()
        data = np.bincount(slot, weights=values, minlength=indices.size)
        n = self.domain.n_dofs
        return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(n, n))

    def matvec(self, moduli, u: np.ndarray) -> np.ndarray:
        """K u computed element by element, without assembling K."""
        local = (u[self.edof] @ self.ke) * np.asarray(moduli, dtype=float)[:, None]
        return np.bincount(self.edof.ravel(), weights=local.ravel(), minlength=self.domain.n_dofs)

    def element_energies(self, u: np.ndarray) -> np.ndarray:
        """u_e^T K0 u_e for every element (unit modulus)."""
        ue = u[self.edof]
        return np.einsum("ei,ij,ej->e", ue, self.ke, ue)


@functools.lru_cache(maxsize=32)
def grid_mesh(domain: Domain, nu: float = 0.3) -> GridMesh:
    return GridMesh(domain, nu)


def assemble(domain: Domain, densities, material: Material = Material()) -> sp.csr_matrix:
    """Global stiffness K = sum_e [E_min + rho_e^p (E_solid - E_min)] K0."""
    return grid_mesh(domain, material.nu).assemble(densities, material)


def pcg(A, b, rtol=1e-8, maxiter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``(x, iterations, relative_residual)``; raises NonConvergence
    when ``maxiter`` (default ``10 * n``) is exhausted.
    """
    n = b.shape[0]
    if maxiter is None:
        maxiter = 10 * n
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0, 0.0
    inv_diag = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - A @ x if x0 is not None else b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > rtol:
        if it >= maxiter:
            raise NonConvergence(f"CG stalled at relative residual {res:.3e} after {it} iterations")
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = inv_diag * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
        res = np.linalg.norm(r) / bnorm
        it += 1
    return x, it, res


DENSE_LIMIT = 2000
METHODS = ("cg", "banded", "direct", "dense")


def solve(K, f, fixed, method="cg", rtol=1e-8, x0=None) -> FeaSolution:
    """Solve K u = f with homogeneous Dirichlet conditions on ``fixed``.

    ``method`` is ``"cg"`` (Jacobi PCG to ``rtol``, the default), ``"banded"``
    (banded Cholesky), ``"direct"`` (sparse LU) or ``"dense"`` (dense
    Cholesky, at most 2000 free DOFs, kept as an oracle). Constraints are
    applied by eliminating the fixed rows and columns.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[0]
    free = free_mask(n, fixed)
    n_free = int(free.sum())

    u = np.zeros(n)
    ff = f[free]
    Kff = sp.csr_matrix(K)[free][:, free]
    iterations = 0
    if method == "cg":
        guess = None if x0 is None else np.asarray(x0, dtype=float)[free]
        u[free], iterations, residual = pcg(Kff, ff, rtol=rtol, maxiter=10 * n_free, x0=guess)
    elif method == "banded":
        u[free] = _banded_cholesky_solve(_csr_to_lower_band(Kff), ff)
        residual = _relative_residual(Kff, u[free], ff)
    elif method == "direct":
        u[free] = spla.spsolve(Kff.tocsc(), ff, permc_spec="MMD_AT_PLUS_A")
        residual = _relative_residual(Kff, u[free], ff)
    elif method == "dense":
        if n_free > DENSE_LIMIT:
            raise ValueError(f"dense solve limited to {DENSE_LIMIT} free DOFs, got {n_free}")
        try:
            u[free] = scipy.linalg.solve(Kff.toarray(), ff, assume_a="pos")
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
        residual = _relative_residual(Kff, u[free], ff)
    else:
        raise ValueError(f"unknown solve method {method!r}; expected one of {METHODS}")
    return FeaSolution(u, float(f @ u), iterations, residual, method)


def free_mask(n_dofs: int, fixed) -> np.ndarray:
    free = np.ones(n_dofs, dtype=bool)
    free[np.asarray(fixed, dtype=np.int64)] = False
    n_free = int(free.sum())
    if n_free == 0:
        raise ValueError("no free degrees of freedom")
    if n_free == n_dofs:
        raise ValueError("at least one degree of freedom must be fixed")
    return free


def _relative_residual(A, x, b) -> float:
    bnorm = np.linalg.norm(b)
    return 0.0 if bnorm == 0 else float(np.linalg.norm(b - A @ x) / bnorm)


def _csr_to_lower_band(A) -> np.ndarray:
    coo = sp.tril(A).tocoo()
    offsets = coo.row - coo.col
    ab = np.zeros((int(offsets.max(initial=0)) + 1, A.shape[0]))
    np.add.at(ab, (offsets, coo.col), coo.data)
    return ab


def _banded_cholesky_solve(ab, b):
    if not np.any(b):
        return np.zeros_like(b)
    try:
        return scipy.linalg.solveh_banded(ab, b, lower=True, overwrite_ab=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


class BandedSystem:
    """Stiffness matrix of a grid stored directly in LAPACK lower-band form.

    DOFs are renumbered node-by-node along the shorter side of the grid, so
    the half-bandwidth is ``2 * (min(nx, ny) + 2) + 1``. Element contributions
    are scattered straight into the band without building a sparse matrix.
    Fixed DOFs get their rows and columns zeroed and a unit diagonal, which
    decouples them exactly (same free-DOF solution as eliminating them).
    """

    def __init__(self, domain: Domain, nu: float = 0.3):
        self.domain = domain
        self.mesh = mesh = grid_mesh(domain, nu)
        nx, ny = domain.nx, domain.ny
        node = np.arange(domain.n_nodes)
        i, j = node // (ny + 1), node % (ny + 1)
        node_rank = i * (ny + 1) + j if ny <= nx else j * (nx + 1) + i
        self.rank = np.empty(domain.n_dofs, dtype=np.int64)
        self.rank[0::2] = 2 * node_rank
        self.rank[1::2] = 2 * node_rank + 1

        # ranks are affine in (i, j), so every element shares one lower-triangle pattern
        r = self.rank[mesh.edof]
        r0 = r[0]
        a, b = np.nonzero(r0[:, None] >= r0[None, :])
        self._kvals = mesh.ke[a, b]
        offsets = r0[a] - r0[b]
        self.bandwidth = int(offsets.max())
        # column-major so the band reaches LAPACK without a Fortran-order copy
        self._flat = (r[:, b] * (self.bandwidth + 1) + offsets[None, :]).ravel()

    def band(self, moduli, fixed=()) -> np.ndarray:
        n = self.domain.n_dofs
        size = (self.bandwidth + 1) * n
        weights = (np.asarray(moduli, dtype=float)[:, None] * self._kvals[None, :]).ravel()
        ab = np.bincount(self._flat, weights=weights, minlength=size)
        ab = ab.reshape(n, self.bandwidth + 1).T
        fixed = self.rank[np.asarray(fixed, dtype=np.int64)]
        if fixed.size:
            ab[:, fixed] = 0.0
            for off in range(1, self.bandwidth + 1):
                cols = fixed[fixed >= off] - off
                ab[off, cols] = 0.0
            ab[0, fixed] = 1.0
        return ab

    def solve(self, moduli, f, fixed) -> np.ndarray:
        free = free_mask(self.domain.n_dofs, fixed)
        rhs = np.zeros(self.domain.n_dofs)
        rhs[self.rank[free]] = f[free]
        x = _banded_cholesky_solve(self.band(moduli, fixed), rhs)
        u = x[self.rank]
        u[~free] = 0.0
        return u


@functools.lru_cache(maxsize=8)
def banded_system(domain: Domain, nu: float = 0.3) -> BandedSystem:
    return BandedSystem(domain, nu)


def analyze(problem: ProblemSpec, densities, material: Material = Material(), method="banded") -> FeaSolution:
    """Assemble and solve the problem for a density field.

    The default banded Cholesky path never builds the global matrix. Any
    other ``method`` goes through ``assemble`` and ``solve``.
    """
    rho = np.asarray(densities, dtype=float)
    f = problem.force_vector()
    fixed = problem.fixed_dofs()
    if method != "banded":
        K = assemble(problem.domain, rho, material)
        return solve(K, f, fixed, method=method)
    if rho.shape != (problem.domain.n_elements,):
        raise ValueError(f"expected {problem.domain.n_elements} densities, got shape {rho.shape}")
    system = banded_system(problem.domain, material.nu)
    moduli = system.mesh.element_moduli(rho, material)
    u = system.solve(moduli, f, fixed)
    free = free_mask(problem.domain.n_dofs, fixed)
    r = (f - system.mesh.matvec(moduli, u))[free]
    fnorm = np.linalg.norm(f[free])
    residual = 0.0 if fnorm == 0 else float(np.linalg.norm(r) / fnorm)
    return FeaSolution(u, float(f @ u), 0, residual, "banded")


def compliance(problem: ProblemSpec, densities, material: Material = Material(), method="banded") -> float:
    return analyze(problem, densities, material, method).compliance
