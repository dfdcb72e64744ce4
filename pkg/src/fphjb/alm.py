"""Augmented Lagrangian outer loop coupling the FP and HJB solvers."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fp import fp_solve
from .grid import Field, TensorMesh, TimeGrid
from .hjb import ConstraintForcing, hjb_solve, my_residual
from .model import BoxSet, ControlProblem, InitialDistribution

logger = logging.getLogger(__name__)


def project_box(y: np.ndarray, box: BoxSet) -> np.ndarray:
    return box.project(np.asarray(y, dtype=float))


def my_subgradient(y: np.ndarray, lam: float, box: BoxSet) -> np.ndarray:
    return my_residual(y, lam, box)


def update_multiplier(
    mu_prev: np.ndarray, expectation: np.ndarray, lam: float, rho: float, box: BoxSet
) -> np.ndarray:
    """Relaxed multiplier step, applied slice by slice along the time grid."""
    return rho * my_residual(expectation + lam * mu_prev, lam, box) + (1.0 - rho) * mu_prev


def control_change_norm(ua: Field | np.ndarray, ub: Field | np.ndarray, mesh: TensorMesh, timegrid: TimeGrid, span: float) -> float:
    """Space-time L2 norm of the difference divided by span * sqrt(measure).

    Uses trapezoidal weights in space and time, so a full-swing difference
    everywhere has norm exactly 1.
    """
    a = ua.values if isinstance(ua, Field) else ua
    b = ub.values if isinstance(ub, Field) else ub
    wt = np.full(timegrid.steps + 1, timegrid.dt)
    wt[0] = wt[-1] = 0.5 * timegrid.dt
    sq = ((a - b) ** 2) @ mesh.weights
    measure = mesh.weights.sum() * wt.sum()
    return float(math.sqrt(max(wt @ sq, 0.0) / measure) / span)


@dataclass(frozen=True)
class AlmParams:
    lam0: float = 100.0
    lam_min: float = 5.0
    tau0: float = 0.1
    tau_min: float = 1e-3
    zeta: float = 1e-3
    eta: float = 0.05
    omega1: float = 0.5
    omega2: float = 0.5
    rho: float = 1.0
    penalty_hits: int = 3
    max_iter: int = 500
    tie_tol: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.lam_min <= self.lam0:
            raise ValueError("need 0 < lam_min <= lam0")
        if not 0 < self.tau_min <= self.tau0:
            raise ValueError("need 0 < tau_min <= tau0")
        if not (0 < self.omega1 < 1 and 0 < self.omega2 < 1):
            raise ValueError("omega1, omega2 must lie in (0, 1)")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.zeta <= 0 or self.eta <= 0 or self.max_iter < 1 or self.penalty_hits < 0:
            raise ValueError("tolerances and iteration limits must be positive")


@dataclass
class MultiplierState:
    mu: np.ndarray
    lam: float
    tau: float
    iteration: int = 0
    hits: int = 0
    phase: str = "penalty"


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    control_change: float
    multiplier_change: float
    violation: float
    lam: float
    tau: float
    phase: str
    hit: bool
    wall_time: float


@dataclass
class AlmResult:
    density: Field
    value: Field
    control: Field
    mu: np.ndarray
    converged: bool
    history: list[IterationRecord] = field(default_factory=list)
    expected_value: float = float("nan")
    objective: float = float("nan")
    hjb_warnings: int = 0

    @property
    def iterations(self) -> int:
        return len(self.history)


def expectation_path(problem: ControlProblem, density: Field) -> np.ndarray:
    """Trajectory of E[G(s, Y_s)] on the time grid, shape (M+1, k)."""
    mesh, tg = density.mesh, density.timegrid
    out = []
    for m, s in enumerate(tg.times):
        g = problem.constraint_values(s, mesh.nodes)
        out.append((density.values[m] * mesh.weights) @ g)
    return np.array(out)


def violation(problem: ControlProblem, expectation: np.ndarray) -> float:
    """sup over s > t of the distance of E[G] to the constraint box.

    The initial slice is excluded: it is fixed by the data, not the control.
    """
    return float(problem.constraint.distance(expectation[1:]).max())


def fp_objective(problem: ControlProblem, density: Field, control: Field) -> float:
    """Objective of the discrete dynamics in the problem's own sense.

    Running reward of step m is paired with the density at m+1, matching the
    implicit scheme, so that with zero forcing it equals E[v(t, X_t)].
    """
    mesh, tg = density.mesh, density.timegrid
    y, w = mesh.nodes, mesh.weights
    total = 0.0
    for m in range(tg.steps):
        f = problem.running_cost(tg.times[m], y, control.values[m])
        total += tg.dt * float((density.values[m + 1] * w) @ f)
    total += float((density.values[-1] * w) @ problem.terminal_cost(y))
    return total


def initial_expected_value(value: Field, density: Field) -> float:
    return float((value.values[0] * density.mesh.weights) @ density.values[0])


def run_algorithm1(
    problem: ControlProblem,
    mesh: TensorMesh,
    timegrid: TimeGrid,
    params: AlmParams,
    init: InitialDistribution | np.ndarray,
    initial_control: Field | None = None,
    scheme: str = "hybrid",
    callback=None,
) -> AlmResult:
    """Penalty-then-multiplier iteration between the FP and HJB solves.

    On exhaustion of ``max_iter`` the control with the smallest normalized
    residual max(du/tau_min, dmu/zeta, viol/eta) is returned with
    ``converged=False``; du is its distance to its own best response and viol
    is measured on its own density.
    """
    box = problem.constraint
    k_dim = box.dim
    M = timegrid.steps
    u_prev = initial_control if initial_control is not None else Field.zeros(mesh, timegrid, "control")
    state = MultiplierState(np.zeros((M + 1, k_dim)), params.lam0, params.tau0)
    history: list[IterationRecord] = []
    best = None
    best_score = math.inf
    converged = False
    warnings = 0
    t_start = time.perf_counter()
    for it in range(1, params.max_iter + 1):
        state.iteration = it
        phi = fp_solve(problem, u_prev, init, mesh, timegrid, scheme=scheme)
        expect = expectation_path(problem, phi)
        forcing = ConstraintForcing(expect, state.mu, state.lam, box)
        v, u = hjb_solve(problem, forcing, mesh, timegrid, scheme=scheme, tie_tol=params.tie_tol)
        warnings += v.meta["warnings"]
        du = control_change_norm(u, u_prev, mesh, timegrid, problem.bounds.span)
        viol = violation(problem, expect)
        candidate = update_multiplier(state.mu, expect, state.lam, params.rho, box)
        candidate[0] = 0.0
        dmu = float(np.sqrt(np.mean(np.sum((candidate - state.mu) ** 2, axis=1))))
        objective = fp_objective(problem, phi, u_prev)
        hit = du <= state.tau
        rec = IterationRecord(it, objective, du, dmu, viol, state.lam, state.tau, state.phase, hit,
                              time.perf_counter() - t_start)
        history.append(rec)
        if callback is not None:
            callback(rec)
        # score the control whose density was just measured, not its best response
        score = max(du / params.tau_min, dmu / params.zeta, viol / params.eta)
        if score < best_score:
            best_score = score
            best = (phi, v, u_prev, state.mu.copy())
        if hit:
            if du <= params.tau_min and dmu <= params.zeta and viol <= params.eta:
                converged = True
                best = (phi, v, u, state.mu.copy())
                u_prev = u
                break
            state.hits += 1
            if state.phase == "multiplier":
                state.mu = candidate
            elif state.hits >= params.penalty_hits:
                state.phase = "multiplier"
            state.tau = max(params.omega1 * state.tau, params.tau_min)
            state.lam = max(params.omega2 * state.lam, params.lam_min)
        u_prev = u
    phi, v, u, mu = best
    # density consistent with the returned feedback
    phi = fp_solve(problem, u, init, mesh, timegrid, scheme=scheme)
    result = AlmResult(phi, v, u, mu, converged, history, hjb_warnings=warnings)
    result.expected_value = initial_expected_value(v, phi)
    result.objective = fp_objective(problem, phi, u)
    if not converged:
        logger.warning("ALM loop stopped after %d iterations without convergence", len(history))
    return result
