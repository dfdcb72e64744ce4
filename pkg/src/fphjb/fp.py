"""Forward Fokker-Planck solver: implicit Euler on nodal masses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .grid import Field, TensorMesh, TimeGrid
from .model import ControlProblem, InitialDistribution
from .stencil import assemble_generator, diffusion_matrix, solve_linear

logger = logging.getLogger(__name__)

MASS_TOL = 1e-6
NEG_TOL = 1e-10


class FpError(RuntimeError):
    pass


@dataclass
class FpOperator:
    """Transport-diffusion operator ``L`` on nodal masses; ``dp/ds + L p = 0``."""

    mesh: TensorMesh
    matrix: sp.csr_matrix
    closure: str = "no-flux"

    def column_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=0)).ravel()


def _axis_hat_masses(axis: np.ndarray, mean: float, var: float) -> tuple[np.ndarray, float]:
    """Expected hat-function weights of N(mean, var) on a 1-D grid.

    Returns nodal masses (summing to the in-domain probability) and that
    probability. The masses reproduce the truncated mean exactly.
    """
    sd = np.sqrt(var)
    z = (axis - mean) / sd
    cdf = ndtr(z)
    pdf = np.exp(-0.5 * z**2) / np.sqrt(2.0 * np.pi)
    F = np.diff(cdf)  # P(x_c < X < x_{c+1})
    G = mean * F - sd * np.diff(pdf)  # E[X; x_c < X < x_{c+1}]
    h = np.diff(axis)
    left = (axis[1:] * F - G) / h  # goes to node c
    right = (G - axis[:-1] * F) / h  # goes to node c+1
    q = np.zeros(axis.size)
    q[:-1] += left
    q[1:] += right
    return np.maximum(q, 0.0), float(F.sum())


def initial_density(init: InitialDistribution, mesh: TensorMesh, method: str = "hat") -> np.ndarray:
    """Project the normal initial law onto the mesh as a nodal density.

    ``hat`` assigns each node the expected value of its piecewise-linear hat
    function (mass and first moments preserved even when the spread is below
    the mesh width). ``nodal`` samples the density at the nodes.
    """
    if init.dim != mesh.dim:
        raise FpError("initial distribution and mesh dimensions differ")
    inside = 1.0
    if method == "hat":
        mass = np.ones(1)
        for k, ax in enumerate(mesh.axes):
            q, pk = _axis_hat_masses(ax, init.mean[k], init.variance[k])
            inside *= pk
            mass = np.multiply.outer(mass, q)
        mass = mass.ravel()
        total = mass.sum()
        if total <= 0:
            raise FpError("initial law has no mass on the mesh")
        dens = mass / (total * mesh.weights)
    elif method == "nodal":
        for k, ax in enumerate(mesh.axes):
            sd = np.sqrt(init.variance[k])
            inside *= float(ndtr((ax[-1] - init.mean[k]) / sd) - ndtr((ax[0] - init.mean[k]) / sd))
        vals = init.pdf(mesh.nodes)
        total = float(mesh.weights @ vals)
        if total <= 0:
            raise FpError("initial density vanishes on every node")
        dens = vals / total
    else:
        raise ValueError(f"unknown projection {method!r}")
    if inside < 0.999:
        raise FpError(f"mesh captures only {inside:.6f} of the initial law (need >= 0.999)")
    return dens


def fp_step_operator(
    problem: ControlProblem,
    policy_slice: np.ndarray,
    s: float,
    mesh: TensorMesh,
    scheme: str = "hybrid",
) -> FpOperator:
    y = mesh.nodes
    b = problem.drift(s, y, policy_slice)
    a = diffusion_matrix(problem.diffusion(s, y))
    G = assemble_generator(mesh, b, a, closure="reflect", scheme=scheme)
    return FpOperator(mesh, (-G.T).tocsr())


def fp_solve(
    problem: ControlProblem,
    policy: Field,
    init: InitialDistribution | np.ndarray,
    mesh: TensorMesh,
    timegrid: TimeGrid,
    scheme: str = "hybrid",
    projection: str = "hat",
    mass_tol: float = MASS_TOL,
    neg_tol: float = NEG_TOL,
) -> Field:
    """Propagate the density under the feedback ``policy``.

    Step m -> m+1 uses the policy slice and coefficients at s_m, so the control
    is held over [s_m, s_{m+1}) as in an Euler-Maruyama path. ``init`` may also
    be a nodal density array. The returned field carries per-step mass errors
    and the clipped mass in ``meta``.
    """
    bounds = problem.bounds
    uvals = policy.values
    if np.any(uvals < bounds.p_min - 1e-12) or np.any(uvals > bounds.p_max + 1e-12):
        raise FpError("policy values outside [p_min, p_max]")
    w = mesh.weights
    if isinstance(init, InitialDistribution):
        dens0 = initial_density(init, mesh, projection)
    else:
        dens0 = np.asarray(init, dtype=float)
        dens0 = dens0 / float(w @ dens0)
    M = timegrid.steps
    out = np.empty((M + 1, mesh.size))
    out[0] = dens0
    p = dens0 * w
    mass_err = np.zeros(M + 1)
    mass_err[0] = abs(p.sum() - 1.0)
    clipped = 0.0
    eye = sp.identity(mesh.size, format="csr")
    for m in range(M):
        s = timegrid.times[m]
        op = fp_step_operator(problem, uvals[m], s, mesh, scheme)
        A = eye + timegrid.dt * op.matrix
        p = solve_linear(A, p, mesh, where=f"in FP step {m} (s={s:g})")
        err = abs(p.sum() - 1.0)
        if err > 10.0 * mass_tol:
            raise FpError(f"mass drift {err:.3e} at FP step {m} (s={s:g})")
        mass_err[m + 1] = err
        dens = p / w
        if dens.min() < -neg_tol:
            neg = p[p < 0].sum()
            clipped += -neg
            p = np.maximum(p, 0.0)
            p /= p.sum()
            dens = p / w
        out[m + 1] = dens
    if mass_err.max() > mass_tol:
        logger.warning("FP mass error %.3e exceeds tolerance %.1e", mass_err.max(), mass_tol)
    field = Field(mesh, timegrid, out, units="density")
    field.meta = {"mass_error": mass_err, "clipped_mass": clipped}
    return field
