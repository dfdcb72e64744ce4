"""Backward HJB solver with frozen-policy sweeps and constraint forcing.

Internally the value is computed in the maximization frame; minimization
problems are solved for ``-f``, ``-g`` and the returned value is flipped back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Field, TensorMesh, TimeGrid
from .model import BoxSet, ControlBounds, ControlProblem
from .stencil import assemble_generator, diffusion_matrix, solve_linear

logger = logging.getLogger(__name__)

MAX_SWEEPS = 5


def psi(z, q, bounds: ControlBounds):
    """max over u in [p_min, p_max] of u (z - q)."""
    d = np.asarray(z, dtype=float) - np.asarray(q, dtype=float)
    out = np.where(d > 0, bounds.p_max * d, np.where(d < 0, bounds.p_min * d, 0.0))
    return out if out.ndim else float(out)


def my_residual(y: np.ndarray, lam: float, box: BoxSet) -> np.ndarray:
    """Moreau-Yosida subgradient of the box indicator, ``(y - P(y)) / lam``."""
    if lam <= 0:
        raise ValueError("penalty parameter must be positive")
    y = np.asarray(y, dtype=float)
    return (y - box.project(y)) / lam


@dataclass
class ConstraintForcing:
    """Shifted expectation trajectory entering the HJB as ``-xi(s) . G(s, y)``.

    ``expectation`` and ``mu`` have shape (M+1, k).
    """

    expectation: np.ndarray
    mu: np.ndarray
    lam: float
    box: BoxSet

    def vectors(self) -> np.ndarray:
        return my_residual(self.expectation + self.lam * self.mu, self.lam, self.box)

    @property
    def active(self) -> bool:
        return bool(np.any(self.vectors() != 0.0))


def value_gradient(v_slice: np.ndarray, mesh: TensorMesh) -> np.ndarray:
    """Centered differences inside, one-sided on the boundary; shape (N, n)."""
    grid = v_slice.reshape(mesh.shape)
    if mesh.dim == 1:
        g = [np.gradient(grid, mesh.spacing[0], edge_order=1)]
    else:
        g = np.gradient(grid, *mesh.spacing, edge_order=1)
    return np.stack([gk.ravel() for gk in g], axis=1)


def hamiltonian_argmax(
    s: float, y: np.ndarray, grad: np.ndarray, problem: ControlProblem, tie_tol: float = 0.0
) -> np.ndarray:
    """Pointwise maximizer of b.p + f over the control box (maximization frame).

    Affine problems get the bang-bang selector; a switching coefficient with
    magnitude at most ``tie_tol`` counts as a tie and maps to 0.
    """
    b = problem.bounds
    if problem.maximizer is not None:
        return problem.maximizer(s, y, grad)
    if problem.affine:
        sw = problem.switching(s, y, grad)
        return np.where(sw > tie_tol, b.p_max, np.where(sw < -tie_tol, b.p_min, 0.0))
    cand = np.linspace(b.p_min, b.p_max, problem.grid_resolution)
    best = np.full(y.shape[0], -np.inf)
    arg = np.zeros(y.shape[0])
    for u in cand:
        h = problem.hamiltonian(s, y, np.full(y.shape[0], u), grad)
        better = h > best
        best = np.where(better, h, best)
        arg = np.where(better, u, arg)
    return arg


def hjb_solve(
    problem: ControlProblem,
    forcing: ConstraintForcing | None,
    mesh: TensorMesh,
    timegrid: TimeGrid,
    scheme: str = "hybrid",
    max_sweeps: int = MAX_SWEEPS,
    tie_tol: float = 0.0,
) -> tuple[Field, Field]:
    """March the value backward from ``g`` and return ``(v, u)`` fields.

    Step m solves ``(I - dt G(s_m, u)) v^m = v^{m+1} + dt (f(s_m, ., u) - xi_{m+1} . G)``
    for the frozen policy ``u``; the policy is refreshed from the new gradient
    until it stops changing or ``max_sweeps`` solves were made. The forcing is
    taken at s_{m+1}, which makes the scheme the exact discrete adjoint of the
    FP step m -> m+1. ``v.meta`` holds sweep counts and the warning counter.
    """
    y = mesh.nodes
    M = timegrid.steps
    dt = timegrid.dt
    times = timegrid.times
    v = np.empty((M + 1, mesh.size))
    u = np.empty((M + 1, mesh.size))
    v[M] = problem.terminal_reward(y)
    u[M] = hamiltonian_argmax(times[M], y, value_gradient(v[M], mesh), problem, tie_tol)
    xi = forcing.vectors() if forcing is not None else None
    sweeps = np.zeros(M, dtype=int)
    warnings = 0
    eye = sp.identity(mesh.size, format="csr")
    for m in range(M - 1, -1, -1):
        s = times[m]
        rhs_base = v[m + 1].copy()
        if xi is not None and np.any(xi[m + 1] != 0.0):
            g_map = problem.constraint_values(times[m + 1], y)
            rhs_base -= dt * (g_map @ xi[m + 1])
        a = diffusion_matrix(problem.diffusion(s, y))
        pol = hamiltonian_argmax(s, y, value_gradient(v[m + 1], mesh), problem, tie_tol)
        converged = False
        for k in range(max_sweeps):
            b = problem.drift(s, y, pol)
            G = assemble_generator(mesh, b, a, closure="extrapolate", scheme=scheme)
            rhs = rhs_base + dt * problem.reward(s, y, pol)
            vm = solve_linear(eye - dt * G, rhs, mesh, where=f"in HJB step {m} (s={s:g})")
            sweeps[m] = k + 1
            new = hamiltonian_argmax(s, y, value_gradient(vm, mesh), problem, tie_tol)
            if np.array_equal(new, pol) or (
                problem.maximizer is not None and np.max(np.abs(new - pol)) <= 1e-8 * problem.bounds.span
            ):
                converged = True
                break
            if k < max_sweeps - 1:
                pol = new
        if not converged:
            warnings += 1
        v[m] = vm
        u[m] = pol
    if warnings:
        logger.info("HJB policy sweeps hit the cap at %d of %d steps", warnings, M)
    sign = problem.reward_sign
    vf = Field(mesh, timegrid, sign * v, units="value")
    vf.meta = {"sweeps": sweeps, "warnings": warnings}
    return vf, Field(mesh, timegrid, u, units="control")
