"""Euler-Maruyama paths, Monte Carlo revenue and day-ahead bids.

Every path owns a counter-based Philox stream keyed by ``(seed, path index)``,
so a bundle does not depend on chunking or on the order paths are produced.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Field, TimeGrid
from .model import ControlProblem, InitialDistribution, SolarGeometry, clear_sky_irradiance

logger = logging.getLogger(__name__)

Policy = Callable[[float, np.ndarray], np.ndarray]

# steps drawn per path stream at a time; only affects memory, not results
DRAW_CHUNK = 64


def path_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


@dataclass
class PathBundle:
    """Simulated states ``(R, M+1, n)`` and controls ``(R, M+1)``.

    ``flagged`` marks paths aborted on a non-finite state; their remaining
    entries are NaN. The control at the final time is the policy evaluated
    there and only enters the quadrature of the running reward.
    """

    timegrid: TimeGrid
    states: np.ndarray
    controls: np.ndarray
    seed: int
    flagged: np.ndarray
    labels: tuple[str, ...] = ()

    @property
    def realizations(self) -> int:
        return self.states.shape[0]

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    @property
    def stream_keys(self) -> list[tuple[int, int]]:
        return [(self.seed, i) for i in range(self.realizations)]

    def mean(self) -> np.ndarray:
        """Sample means over unflagged paths, shape (M+1, n)."""
        ok = ~self.flagged
        return np.sum(self.states[ok], axis=0) / max(int(ok.sum()), 1)

    def std_error(self) -> np.ndarray:
        ok = ~self.flagged
        r = int(ok.sum())
        if r < 2:
            return np.full(self.states.shape[1:], np.nan)
        return np.std(self.states[ok], axis=0, ddof=1) / math.sqrt(r)


def _as_initial(init, n: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(init, InitialDistribution):
        return np.asarray(init.mean, dtype=float), np.sqrt(np.asarray(init.variance, dtype=float))
    x0 = np.asarray(init, dtype=float).reshape(n)
    return x0, np.zeros(n)


def euler_maruyama(
    problem: ControlProblem,
    policy: Policy,
    init: InitialDistribution | np.ndarray,
    timegrid: TimeGrid,
    realizations: int,
    seed: int,
) -> PathBundle:
    """Simulate ``realizations`` paths of the controlled SDE.

    ``init`` is either a normal law (sampled from the first draws of each path
    stream) or a fixed initial point.
    """
    if realizations < 1:
        raise ValueError("need at least one realization")
    n = problem.dim
    R, M, dt = realizations, timegrid.steps, timegrid.dt
    mean0, sd0 = _as_initial(init, n)
    streams = [path_stream(seed, i) for i in range(R)]
    z0 = np.stack([g.standard_normal(n) for g in streams])
    x = mean0 + sd0 * z0
    states = np.empty((R, M + 1, n))
    controls = np.empty((R, M + 1))
    flagged = np.zeros(R, dtype=bool)
    states[:, 0] = x
    sqdt = math.sqrt(dt)
    b = problem.bounds
    noise = None
    for m in range(M):
        k = m % DRAW_CHUNK
        if k == 0:
            steps = min(DRAW_CHUNK, M - m)
            noise = np.stack([g.standard_normal((steps, n)) for g in streams])
        s = timegrid.times[m]
        u = b.clip(np.asarray(policy(s, x), dtype=float))
        controls[:, m] = u
        sig = problem.diffusion(s, x)
        with np.errstate(all="ignore"):
            x = x + problem.drift(s, x, u) * dt + sqdt * np.einsum("rij,rj->ri", sig, noise[:, k])
        bad = ~np.all(np.isfinite(x), axis=1) & ~flagged
        if bad.any():
            flagged |= bad
            x[flagged] = np.nan
        states[:, m + 1] = x
    live = ~flagged
    controls[:, M] = np.nan
    if live.any():
        controls[live, M] = b.clip(np.asarray(policy(timegrid.times[M], x[live]), dtype=float))
    if flagged.any():
        logger.warning("%d of %d paths aborted on non-finite states", int(flagged.sum()), R)
    return PathBundle(timegrid, states, controls, int(seed), flagged, problem.labels)


@dataclass
class RevenueEstimate:
    mean: float
    std_error: float
    per_path: np.ndarray = field(repr=False)
    flagged: int = 0

    def interval(self, z: float = 2.5758293035489004) -> tuple[float, float]:
        """Normal confidence interval; the default z gives 99%."""
        return self.mean - z * self.std_error, self.mean + z * self.std_error


def evaluate_revenue(bundle: PathBundle, problem: ControlProblem) -> RevenueEstimate:
    """Trapezoidal running reward plus terminal reward, per path, in the problem's own sense."""
    tg = bundle.timegrid
    ok = ~bundle.flagged
    X, U = bundle.states[ok], bundle.controls[ok]
    R = X.shape[0]
    if R == 0:
        return RevenueEstimate(float("nan"), float("nan"), np.empty(0), bundle.n_flagged)
    w = np.full(tg.steps + 1, tg.dt)
    w[0] = w[-1] = 0.5 * tg.dt
    vals = np.zeros(R)
    for m, s in enumerate(tg.times):
        vals += w[m] * problem.running_cost(s, X[:, m], U[:, m])
    vals += problem.terminal_cost(X[:, -1])
    mean = float(np.sum(vals) / R)
    se = float(np.std(vals, ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return RevenueEstimate(mean, se, vals, bundle.n_flagged)


def expected_control(control: Field, density: Field) -> np.ndarray:
    """u(s) = integral of the feedback against the density, one value per time."""
    if control.mesh != density.mesh or control.timegrid != density.timegrid:
        raise ValueError("control and density live on different discretizations")
    return ((control.values * density.values) * density.mesh.weights).sum(axis=1)


@dataclass(frozen=True)
class BidSchedule:
    """Hourly constant grid-power bids in MW; ``hours[h]`` is the start of hour h."""

    hours: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.hours) != len(self.values):
            raise ValueError("hours and values differ in length")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("bid values must be finite")

    def at(self, s: float) -> float:
        h = int(math.floor(s - self.hours[0] + 1e-9))
        return self.values[min(max(h, 0), len(self.values) - 1)]


def capacity_firming(u: np.ndarray, pv_expected: np.ndarray, timegrid: TimeGrid) -> BidSchedule:
    """Hourly averages of E[P_solar] + u over the grid times inside each hour."""
    span = timegrid.T - timegrid.t
    if abs(span - round(span)) > 1e-9:
        raise ValueError("the horizon must be a whole number of hours")
    u = np.asarray(u, dtype=float)
    pv = np.asarray(pv_expected, dtype=float)
    grid_power = pv + u
    times = timegrid.times[:-1]
    hours, values = [], []
    for h in range(int(round(span))):
        start = timegrid.t + h
        sel = (times >= start - 1e-9) & (times < start + 1.0 - 1e-9)
        if not sel.any():
            raise ValueError(f"no grid time inside hour {h}")
        hours.append(float(start))
        values.append(float(grid_power[:-1][sel].mean()))
    return BidSchedule(tuple(hours), tuple(values))


def expected_irradiance(mean_csi, s: float, geometry: SolarGeometry) -> float:
    """E[I_s]; the irradiance is linear in the clear-sky index."""
    return clear_sky_irradiance(s, geometry) * float(mean_csi)
