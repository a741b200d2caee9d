"""Stand-alone SIMP reference used as a test oracle.

Written in the classic 88-line layout: nodes numbered down each column with
y pointing DOWN, element stiffness integrated by 2x2 Gauss quadrature, the
filter assembled with explicit loops and the system solved by sparse LU.
Nothing here imports from the package under test.
"""
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve


def q4_stiffness(nu):
    D = 1.0 / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
    # corners in the y-down frame: upper-left, upper-right, lower-right, lower-left
    # become lower-left, lower-right, upper-right, upper-left once y is flipped
    xs = np.array([0.0, 1.0, 1.0, 0.0])
    ys = np.array([1.0, 1.0, 0.0, 0.0])
    K = np.zeros((8, 8))
    g = 1 / np.sqrt(3)
    for xi in (-g, g):
        for eta in (-g, g):
            sx = np.array([-1, 1, 1, -1.0])
            sy = np.array([-1, -1, 1, 1.0])
            dN_dxi = sx * (1 + eta * sy) / 4
            dN_deta = sy * (1 + xi * sx) / 4
            J = np.array([[dN_dxi @ xs, dN_dxi @ ys], [dN_deta @ xs, dN_deta @ ys]])
            dN = np.linalg.solve(J, np.vstack([dN_dxi, dN_deta]))
            B = np.zeros((3, 8))
            B[0, 0::2] = dN[0]
            B[1, 1::2] = dN[1]
            B[2, 0::2] = dN[1]
            B[2, 1::2] = dN[0]
            K += B.T @ D @ B * abs(np.linalg.det(J))
    return K


def top(nelx, nely, volfrac, loads, supports, penal=3.0, rmin=1.5, maxit=150, tolx=0.01,
        Emin=1e-9, E0=1.0, nu=0.3, move=0.2):
    """loads: [(i, j_up, fx, fy_up)], supports: [(i, j_up, fix_x, fix_y)].

    Returns (xPhys as (nely, nelx) with row 0 at the top, compliance of xPhys).
    """
    KE = q4_stiffness(nu)
    nodenrs = np.arange((1 + nelx) * (1 + nely)).reshape(1 + nelx, 1 + nely)  # [col, row_down]
    edofMat = np.zeros((nelx * nely, 8), dtype=int)
    for elx in range(nelx):
        for ely in range(nely):
            el = ely + elx * nely
            n1 = nodenrs[elx, ely + 1]  # lower-left
            n2 = nodenrs[elx + 1, ely + 1]
            n3 = nodenrs[elx + 1, ely]
            n4 = nodenrs[elx, ely]
            edofMat[el] = [2 * n1, 2 * n1 + 1, 2 * n2, 2 * n2 + 1, 2 * n3, 2 * n3 + 1, 2 * n4, 2 * n4 + 1]
    iK = np.kron(edofMat, np.ones((8, 1), dtype=int)).flatten()
    jK = np.kron(edofMat, np.ones((1, 8), dtype=int)).flatten()
    ndof = 2 * (nelx + 1) * (nely + 1)

    def node(i, j_up):
        return nodenrs[i, nely - j_up]

    F = np.zeros(ndof)
    for i, j, fx, fy in loads:
        n = node(i, j)
        F[2 * n] += fx
        F[2 * n + 1] -= fy  # y points down here
    fixed = set()
    for i, j, fx_, fy_ in supports:
        n = node(i, j)
        if fx_:
            fixed.add(2 * n)
        if fy_:
            fixed.add(2 * n + 1)
    fixed = np.array(sorted(fixed))
    free = np.setdiff1d(np.arange(ndof), fixed)

    nfilter = nelx * nely * (2 * (int(np.ceil(rmin)) - 1) + 1) ** 2
    iH, jH, sH = np.zeros(nfilter, int), np.zeros(nfilter, int), np.zeros(nfilter)
    k = 0
    for i1 in range(nelx):
        for j1 in range(nely):
            e1 = i1 * nely + j1
            for i2 in range(max(i1 - (int(np.ceil(rmin)) - 1), 0), min(i1 + int(np.ceil(rmin)), nelx)):
                for j2 in range(max(j1 - (int(np.ceil(rmin)) - 1), 0), min(j1 + int(np.ceil(rmin)), nely)):
                    e2 = i2 * nely + j2
                    iH[k], jH[k] = e1, e2
                    sH[k] = max(0.0, rmin - np.sqrt((i1 - i2) ** 2 + (j1 - j2) ** 2))
                    k += 1
    H = coo_matrix((sH[:k], (iH[:k], jH[:k])), shape=(nelx * nely, nelx * nely)).tocsc()
    Hs = np.asarray(H.sum(1)).ravel()

    def fe(xp):
        sK = (KE.flatten()[None, :] * (Emin + xp[:, None] ** penal * (E0 - Emin))).flatten()
        K = coo_matrix((sK, (iK, jK)), shape=(ndof, ndof)).tocsc()
        U = np.zeros(ndof)
        U[free] = spsolve(K[free, :][:, free], F[free])
        return U

    x = volfrac * np.ones(nely * nelx)
    xPhys = x.copy()
    for _ in range(maxit):
        U = fe(xPhys)
        ce = (U[edofMat] @ KE * U[edofMat]).sum(1)
        dc = -penal * xPhys ** (penal - 1) * (E0 - Emin) * ce
        dv = np.ones(nely * nelx)
        dc = H @ (dc / Hs)
        dv = H @ (dv / Hs)
        l1, l2 = 0.0, 1e9
        while (l2 - l1) / (l1 + l2) > 1e-12:
            lmid = 0.5 * (l2 + l1)
            xnew = np.maximum(0.0, np.maximum(x - move, np.minimum(1.0, np.minimum(x + move, x * np.sqrt(-dc / dv / lmid)))))
            if (H @ xnew / Hs).sum() > volfrac * nelx * nely:
                l1 = lmid
            else:
                l2 = lmid
        change = np.abs(xnew - x).max()
        x = xnew
        xPhys = H @ x / Hs
        if change < tolx:
            break
    U = fe(xPhys)
    return xPhys.reshape(nelx, nely).T, float(F @ U)
