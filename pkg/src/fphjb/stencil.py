"""Finite-difference generator assembly and sparse linear solves.

The generator ``G`` approximates ``b . grad v + a : Hess v`` with
``a = Sigma Sigma^T / 2``. Off the boundary its rows sum to zero, so it is the
rate matrix of a Markov chain on the nodes. The Fokker-Planck operator is
``-G^T`` acting on nodal masses, which makes conservation a column-sum
identity.

Drift discretization: ``hybrid`` uses centered differences wherever the cell
Peclet number allows a monotone stencil and adds just enough artificial
diffusion elsewhere; ``upwind`` is the classical first-order upwind scheme.
Both keep off-diagonal rates nonnegative (positivity of the FP step).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import TensorMesh

SCHEMES = ("hybrid", "upwind")
CLOSURES = ("reflect", "extrapolate")

# Systems up to this size are factorized directly; larger ones use Krylov.
DIRECT_LIMIT = 30_000
KRYLOV_RTOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class _Neighbours:
    plus: tuple[np.ndarray, ...]  # flat index of +1 neighbour per axis, -1 if none
    minus: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]  # node lies on the upper face of axis j
    lower: tuple[np.ndarray, ...]
    boundary: np.ndarray  # node lies on any face


@lru_cache(maxsize=32)
def _neighbours(mesh: TensorMesh) -> _Neighbours:
    shape = mesh.shape
    flat = np.arange(mesh.size).reshape(shape)
    plus, minus, upper, lower = [], [], [], []
    for j in range(mesh.dim):
        idx = np.indices(shape)[j]
        up = idx == shape[j] - 1
        lo = idx == 0
        p = np.where(up, -1, np.roll(flat, -1, axis=j))
        m = np.where(lo, -1, np.roll(flat, 1, axis=j))
        plus.append(p.ravel())
        minus.append(m.ravel())
        upper.append(up.ravel())
        lower.append(lo.ravel())
    boundary = np.zeros(mesh.size, dtype=bool)
    for j in range(mesh.dim):
        boundary |= upper[j] | lower[j]
    return _Neighbours(tuple(plus), tuple(minus), tuple(upper), tuple(lower), boundary)


def diffusion_matrix(sigma: np.ndarray) -> np.ndarray:
    """``a = Sigma Sigma^T / 2`` for an array of tensors of shape (N, n, d)."""
    return 0.5 * np.einsum("nik,njk->nij", sigma, sigma)


def assemble_generator(
    mesh: TensorMesh,
    drift: np.ndarray,
    a: np.ndarray,
    closure: str = "reflect",
    scheme: str = "hybrid",
) -> sp.csr_matrix:
    """Sparse generator for nodal drift (N, n) and diffusion matrix a (N, n, n).

    ``reflect`` drops transitions that would leave the domain (no-flux for the
    adjoint FP operator). ``extrapolate`` closes boundary rows with a linear
    ghost value: no normal diffusion, one-sided inward difference for drift.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if closure not in CLOSURES:
        raise ValueError(f"unknown closure {closure!r}")
    nb = _neighbours(mesh)
    n_nodes = mesh.size
    rows, cols, vals = [], [], []
    diag = np.zeros(n_nodes)
    allnodes = np.arange(n_nodes)

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for j in range(mesh.dim):
        h = mesh.spacing[j]
        b = drift[:, j]
        ajj = np.maximum(a[:, j, j], 0.0)
        if scheme == "hybrid":
            d = np.maximum(ajj, 0.5 * np.abs(b) * h)
            up = d / h**2 + 0.5 * b / h
            dn = d / h**2 - 0.5 * b / h
        else:
            up = ajj / h**2 + np.maximum(b, 0.0) / h
            dn = ajj / h**2 + np.maximum(-b, 0.0) / h
        has_up = nb.plus[j] >= 0
        has_dn = nb.minus[j] >= 0
        if closure == "reflect":
            i = allnodes[has_up]
            add(i, nb.plus[j][i], up[i])
            diag[i] -= up[i]
            i = allnodes[has_dn]
            add(i, nb.minus[j][i], dn[i])
            diag[i] -= dn[i]
        else:
            interior = has_up & has_dn
            i = allnodes[interior]
            add(i, nb.plus[j][i], up[i])
            add(i, nb.minus[j][i], dn[i])
            diag[i] -= up[i] + dn[i]
            i = allnodes[~has_up]  # upper face: b (v_i - v_{i-1}) / h
            add(i, nb.minus[j][i], -b[i] / h)
            diag[i] += b[i] / h
            i = allnodes[~has_dn]  # lower face: b (v_{i+1} - v_i) / h
            add(i, nb.plus[j][i], b[i] / h)
            diag[i] -= b[i] / h

    for j in range(mesh.dim):
        for k in range(j + 1, mesh.dim):
            c = 2.0 * a[:, j, k]
            if not np.any(c != 0.0):
                continue
            hj, hk = mesh.spacing[j], mesh.spacing[k]
            ok = (c != 0.0) & (nb.plus[j] >= 0) & (nb.minus[j] >= 0)
            ok &= (nb.plus[k] >= 0) & (nb.minus[k] >= 0)
            i = allnodes[ok]
            w = np.abs(c[i]) / (2.0 * hj * hk)
            pos = c[i] > 0
            pj, mj = nb.plus[j][i], nb.minus[j][i]
            # diagonal partners: (+,+),(-,-) when c>0, (+,-),(-,+) when c<0
            pp = nb.plus[k][pj]
            mm = nb.minus[k][mj]
            pm = nb.minus[k][pj]
            mp = nb.plus[k][mj]
            add(i, np.where(pos, pp, pm), w)
            add(i, np.where(pos, mm, mp), w)
            for nbr in (pj, mj, nb.plus[k][i], nb.minus[k][i]):
                add(i, nbr, -w)
            add(i, i, 2.0 * w)  # 2w - 4w + 2w: the row still sums to zero

    add(allnodes, allnodes, diag)
    r = np.concatenate(rows)
    c_ = np.concatenate(cols)
    v = np.concatenate(vals)
    return sp.csr_matrix((v, (r, c_)), shape=(n_nodes, n_nodes))


def _tridiagonal_solve(A: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = A.diagonal(1)
    ab[1, :] = A.diagonal(0)
    ab[2, :-1] = A.diagonal(-1)
    return sla.solve_banded((1, 1), ab, rhs, check_finite=False)


def solve_linear(A: sp.spmatrix, rhs: np.ndarray, mesh: TensorMesh, where: str = "") -> np.ndarray:
    """Solve ``A x = rhs``: banded in 1-D, sparse LU in 2-D up to ``DIRECT_LIMIT``
    unknowns, preconditioned Krylov in 3-D and beyond (LU fill-in grows too fast there)."""
    try:
        if mesh.dim == 1:
            x = _tridiagonal_solve(A, rhs)
        elif mesh.dim == 2 and A.shape[0] <= DIRECT_LIMIT:
            x = spla.spsolve(A.tocsc(), rhs, permc_spec="MMD_AT_PLUS_A")
        else:
            x = _krylov(A, rhs)
    except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
        raise SolverError(f"linear solve failed {where}: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError(f"linear solve produced non-finite values {where}")
    return x


def _krylov(A: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    A = A.tocsr()
    d = A.diagonal()
    jacobi = spla.LinearOperator(A.shape, matvec=lambda x: x / d)
    x, info = spla.bicgstab(A, rhs, rtol=KRYLOV_RTOL, atol=0.0, M=jacobi, maxiter=400)
    if info == 0:
        return x
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
    prec = spla.LinearOperator(A.shape, matvec=ilu.solve)
    x, info = spla.gmres(A, rhs, x0=x, rtol=KRYLOV_RTOL, atol=0.0, M=prec, restart=50, maxiter=200)
    if info == 0:
        return x
    return spla.spsolve(A.tocsc(), rhs)
