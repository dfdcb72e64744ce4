"""PV solve modes: full 3-D, energy-only 1-D and price-energy 2-D."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alm import AlmParams, AlmResult, expectation_path, run_algorithm1
from .grid import Field, TensorMesh, TimeGrid, build_mesh, interpolate
from .model import ControlBounds, ControlProblem, PvModel, pv_problem
from .reduction import (
    Decomposition,
    MarginalBank,
    precompute_marginals,
    reduce_problem,
    validate_decomposition,
)

MODES = ("full3d", "energy1d", "price_energy2d")

# controlled dims, control-free blocks (state order Z, Pi, E)
LAYOUTS: dict[str, tuple[tuple[int, ...], tuple[tuple[int, ...], ...]]] = {
    "full3d": ((0, 1, 2), ()),
    "energy1d": ((2,), ((0,), (1,))),
    "price_energy2d": ((1, 2), ((0,),)),
}


@dataclass(frozen=True)
class Discretization:
    bounds: tuple[tuple[float, float], ...] = ((-5.0, 5.0), (-40.0, 220.0), (-30.0, 40.0))
    counts: tuple[int, int, int] = (21, 66, 71)
    coarse_counts: tuple[int, int, int] = (11, 34, 36)
    dt: float = 0.5
    scheme: str = "hybrid"

    def mesh(self, dims, coarse: bool = False, scale: float = 1.0) -> TensorMesh:
        counts = self.coarse_counts if coarse else self.counts
        m = build_mesh([self.bounds[i] for i in dims], [counts[i] for i in dims])
        return m if scale == 1.0 else m.scaled(scale)

    def timegrid(self, horizon: tuple[float, float]) -> TimeGrid:
        return TimeGrid(horizon[0], horizon[1], self.dt)


class FeedbackPolicy:
    """Lookup of a stored feedback field at full-state points.

    The slice at the last grid time not after ``s`` is used (control held over
    each step). Values are interpolated multilinearly with clamping and, for
    bang-bang fields, snapped to the nearest of {p_min, 0, p_max}.
    """

    def __init__(self, control: Field, dims, bounds: ControlBounds, snap: bool | None = None):
        self.control = control
        self.dims = list(dims)
        self.bounds = bounds
        levels = np.array([bounds.p_min, 0.0, bounds.p_max])
        if snap is None:
            snap = bool(np.all(np.isin(control.values, levels)))
        self.snap = snap
        self.levels = levels

    def __call__(self, s: float, x: np.ndarray) -> np.ndarray:
        m = self.control.timegrid.index(s)
        u = interpolate(self.control.values[m], self.control.mesh, x[:, self.dims])
        if self.snap:
            u = self.levels[np.argmin(np.abs(u[:, None] - self.levels[None, :]), axis=1)]
        return self.bounds.clip(u)


@dataclass
class ModeSolution:
    mode: str
    model: PvModel
    problem: ControlProblem  # problem actually solved (reduced or full)
    full_problem: ControlProblem
    mesh: TensorMesh
    timegrid: TimeGrid
    result: AlmResult
    decomposition: Decomposition | None = None
    bank: MarginalBank | None = None
    extras: dict = field(default_factory=dict)

    @property
    def controlled(self) -> tuple[int, ...]:
        return LAYOUTS[self.mode][0]

    def policy(self) -> FeedbackPolicy:
        return FeedbackPolicy(self.result.control, self.controlled, self.model.bounds)

    def state_means(self) -> np.ndarray:
        """E[Z_s], E[Pi_s], E[E_s] on the time grid, shape (M+1, 3)."""
        out = np.zeros((self.timegrid.steps + 1, 3))
        phi = self.result.density
        mom = (phi.values * phi.mesh.weights) @ phi.mesh.nodes
        for k, d in enumerate(self.controlled):
            out[:, d] = mom[:, k]
        if self.bank is not None:
            for m in range(self.timegrid.steps + 1):
                for d, val in self.bank.mean(m).items():
                    out[m, d] = val
        return out

    def expected_control(self) -> np.ndarray:
        phi, u = self.result.density, self.result.control
        return ((phi.values * u.values) * phi.mesh.weights).sum(axis=1)


def solve_mode(
    model: PvModel,
    mode: str,
    params: AlmParams,
    disc: Discretization = Discretization(),
    mesh_scale: float = 1.0,
    callback=None,
) -> ModeSolution:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    full = pv_problem(model)
    tg = disc.timegrid(model.horizon)
    init = model.initial
    controlled, blocks = LAYOUTS[mode]
    if mode == "full3d":
        mesh = disc.mesh(controlled, coarse=True, scale=mesh_scale)
        res = run_algorithm1(full, mesh, tg, params, init, scheme=disc.scheme, callback=callback)
        return ModeSolution(mode, model, full, full, mesh, tg, res)
    probe = [disc.bounds[i] for i in range(3)]
    decomp = validate_decomposition(full, controlled, blocks, probe_bounds=probe)
    if not decomp.valid:
        raise ValueError("; ".join(c.detail for c in decomp.failures))
    block_meshes = [disc.mesh(b, scale=mesh_scale) for b in blocks]
    bank = precompute_marginals(full, decomp, init, block_meshes, tg, scheme=disc.scheme)
    reduced = reduce_problem(full, decomp, bank, tg, init)
    mesh = disc.mesh(controlled, scale=mesh_scale)
    res = run_algorithm1(reduced, mesh, tg, params, init.marginal(controlled), scheme=disc.scheme,
                         callback=callback)
    return ModeSolution(mode, model, reduced, full, mesh, tg, res, decomp, bank)


def expected_solar(model: PvModel, timegrid: TimeGrid, mean_csi: np.ndarray) -> np.ndarray:
    """E[P_solar,s]; the PV output is linear in the clear-sky index."""
    return np.array([float(model.solar_power(s, z)) for s, z in zip(timegrid.times, mean_csi)])


def constraint_trajectory(sol: ModeSolution) -> np.ndarray:
    return expectation_path(sol.problem, sol.result.density)
