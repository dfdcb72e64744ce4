"""Comparison controllers: price-threshold rule, time-of-use rule, stochastic MPC.

The MPC stage problem is a sample-average approximation over frozen Brownian
increments. Its gradient comes from a discrete adjoint recursion per path and
it is maximized by projected gradient ascent with Armijo backtracking, inside
an augmented Lagrangian loop on the expected battery energy.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import TimeGrid
from .model import (
    ControlBounds,
    PvModel,
    clear_sky_irradiance,
    pv_power,
    pv_problem,
)
from .sim import PathBundle, RevenueEstimate, euler_maruyama, evaluate_revenue, path_stream

logger = logging.getLogger(__name__)

E_INDEX = 2  # battery energy in the (Z, Pi, E) state


# ---------------------------------------------------------------------------
# Rule-based controllers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdParams:
    pi_min: float = 65.0
    pi_max: float = 75.0

    def __post_init__(self) -> None:
        if not self.pi_min < self.pi_max:
            raise ValueError(f"need pi_min < pi_max, got {self.pi_min} >= {self.pi_max}")


def _disjoint(a: tuple[tuple[float, float], ...], b: tuple[tuple[float, float], ...]) -> bool:
    return all(hi1 <= lo2 or hi2 <= lo1 for lo1, hi1 in a for lo2, hi2 in b)


@dataclass(frozen=True)
class TouSchedule:
    """Half-open hour windows [start, end) for charging and discharging."""

    off_peak: tuple[tuple[float, float], ...] = ((0.0, 8.0),)
    peak: tuple[tuple[float, float], ...] = ((10.0, 14.0), (18.0, 22.0))

    def __post_init__(self) -> None:
        for lo, hi in self.off_peak + self.peak:
            if not lo < hi:
                raise ValueError(f"empty or inverted window ({lo}, {hi})")
        if not _disjoint(self.off_peak, self.peak):
            raise ValueError("off-peak and peak windows overlap")

    @staticmethod
    def _inside(s: float, windows) -> bool:
        h = s % 24.0
        return any(lo <= h < hi for lo, hi in windows)

    def is_off_peak(self, s: float) -> bool:
        return self._inside(s, self.off_peak)

    def is_peak(self, s: float) -> bool:
        return self._inside(s, self.peak)


def _guarded(want_charge, want_discharge, energy, bounds: ControlBounds, dt, e_min, e_max):
    energy = np.asarray(energy, dtype=float)
    charge = want_charge & (energy - dt * bounds.p_min < e_max)
    discharge = want_discharge & (energy - dt * bounds.p_max > e_min)
    return np.where(charge, bounds.p_min, np.where(discharge, bounds.p_max, 0.0))


def price_threshold_policy(s, price, energy, params: ThresholdParams, bounds: ControlBounds,
                           dt: float, e_min: float = 0.0, e_max: float = 4.0):
    """Charge below ``pi_min``, discharge above ``pi_max``, if the next energy stays in bounds."""
    price = np.asarray(price, dtype=float)
    out = _guarded(price < params.pi_min, price > params.pi_max, energy, bounds, dt, e_min, e_max)
    return out if out.ndim else float(out)


def tou_policy(s, energy, schedule: TouSchedule, bounds: ControlBounds, dt: float,
               e_min: float = 0.0, e_max: float = 4.0):
    energy = np.asarray(energy, dtype=float)
    off = np.full(energy.shape, schedule.is_off_peak(s))
    peak = np.full(energy.shape, schedule.is_peak(s))
    out = _guarded(off, peak, energy, bounds, dt, e_min, e_max)
    return out if out.ndim else float(out)


def threshold_rule(model: PvModel, params: ThresholdParams, dt: float):
    """Rule as a policy on full (Z, Pi, E) states."""
    return lambda s, x: price_threshold_policy(
        s, x[:, 1], x[:, E_INDEX], params, model.bounds, dt, model.energy_min, model.energy_max)


def tou_rule(model: PvModel, schedule: TouSchedule, dt: float):
    return lambda s, x: tou_policy(s, x[:, E_INDEX], schedule, model.bounds, dt,
                                   model.energy_min, model.energy_max)


@dataclass
class GuardAudit:
    """Pathwise check of the deterministic one-step guard.

    ``guard_violations`` counts steps where a nonzero rule action moves the
    deterministic update farther from the energy box than the step started
    (leaving it, or pushing deeper out after noise carried the path outside);
    ``max_overshoot`` is the largest distance of any simulated energy from the
    bounds, which only the noise can produce.
    """

    guard_violations: int
    max_overshoot: float
    steps_checked: int


def audit_guards(bundle: PathBundle, model: PvModel) -> GuardAudit:
    tg = bundle.timegrid
    ok = ~bundle.flagged
    e = bundle.states[ok][:, :-1, E_INDEX]
    u = bundle.controls[ok][:, :-1]
    nxt = e - tg.dt * u
    active = u != 0.0

    def dist(x):
        return np.maximum(np.maximum(model.energy_min - x, x - model.energy_max), 0.0)

    bad = active & (dist(nxt) > dist(e))
    all_e = bundle.states[ok][:, :, E_INDEX]
    over = np.maximum(model.energy_min - all_e, all_e - model.energy_max)
    return GuardAudit(int(bad.sum()), float(max(over.max(), 0.0)), int(active.sum()))


@dataclass
class RuleEvaluation:
    revenue: RevenueEstimate
    audit: GuardAudit
    bundle: PathBundle


def evaluate_rule(policy, model: PvModel, timegrid: TimeGrid, realizations: int, seed: int) -> RuleEvaluation:
    problem = pv_problem(model)
    bundle = euler_maruyama(problem, policy, model.initial, timegrid, realizations, seed)
    return RuleEvaluation(evaluate_revenue(bundle, problem), audit_guards(bundle, model), bundle)


# ---------------------------------------------------------------------------
# Sample-average stage problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaaModel:
    """Dynamics, rewards and their derivatives for the adjoint recursion.

    Shapes: states (N, n), controls (N,), Brownian draws (N, n). ``noise``
    returns Sigma(s, x) xi and ``noise_x`` its Jacobian in x, shape (N, n, n).
    """

    dim: int
    drift: Callable
    drift_x: Callable
    drift_u: Callable
    noise: Callable
    noise_x: Callable
    reward: Callable
    reward_x: Callable
    reward_u: Callable
    terminal: Callable
    terminal_x: Callable
    bounds: ControlBounds
    energy_box: tuple[float, float]
    energy_index: int = E_INDEX


def pv_saa_model(model: PvModel) -> SaaModel:
    sde, pv = model.sde, model.pv
    c_t = model.c_terminal
    kz, kp = sde.kappa_z, sde.kappa_pi

    def solar_gain(s):
        # PV output is c(s) * Z
        return float(pv_power(clear_sky_irradiance(s, pv.geometry), pv, s))

    def drift(s, x, u):
        out = np.empty_like(x)
        out[:, 0] = kz * (sde.theta_z(s) - x[:, 0])
        out[:, 1] = kp * (sde.theta_pi(s) + sde.theta_pi_rate(s) / kp - x[:, 1])
        out[:, 2] = -u
        return out

    def drift_x(s, x, u):
        out = np.zeros((x.shape[0], 3, 3))
        out[:, 0, 0] = -kz
        out[:, 1, 1] = -kp
        return out

    def drift_u(s, x, u):
        out = np.zeros_like(x)
        out[:, 2] = -1.0
        return out

    def noise(s, x, xi):
        out = np.empty_like(x)
        out[:, 0] = sde.sigma_zz * x[:, 0] * (1.0 - x[:, 0]) * xi[:, 0]
        out[:, 1] = (sde.sigma_piz * xi[:, 0] + sde.sigma_pipi * xi[:, 1]) * x[:, 1]
        out[:, 2] = sde.sigma_ee * x[:, 2] * xi[:, 2]
        return out

    def noise_x(s, x, xi):
        out = np.zeros((x.shape[0], 3, 3))
        out[:, 0, 0] = sde.sigma_zz * (1.0 - 2.0 * x[:, 0]) * xi[:, 0]
        out[:, 1, 1] = sde.sigma_piz * xi[:, 0] + sde.sigma_pipi * xi[:, 1]
        out[:, 2, 2] = sde.sigma_ee * xi[:, 2]
        return out

    def reward(s, x, u):
        return x[:, 1] * (solar_gain(s) * x[:, 0] + u)

    def reward_x(s, x, u):
        c = solar_gain(s)
        out = np.zeros_like(x)
        out[:, 0] = x[:, 1] * c
        out[:, 1] = c * x[:, 0] + u
        return out

    def reward_u(s, x, u):
        return x[:, 1].copy()

    def terminal(x):
        return c_t * x[:, 2]

    def terminal_x(x):
        out = np.zeros_like(x)
        out[:, 2] = c_t
        return out

    return SaaModel(3, drift, drift_x, drift_u, noise, noise_x, reward, reward_x, reward_u,
                    terminal, terminal_x, model.bounds, (model.energy_min, model.energy_max))


@dataclass(frozen=True)
class MpcParams:
    dt: float = 0.5
    samples: int = 1000
    max_ascent: int = 200
    step0: float = 1.0
    armijo: float = 1e-4
    grad_tol: float = 1e-6
    lam0: float = 1.0
    lam_min: float = 0.05
    omega: float = 0.5
    eta: float = 0.05
    zeta: float = 1e-3
    max_outer: int = 8

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.step0 <= 0:
            raise ValueError("step sizes must be positive")
        if self.samples < 100:
            raise ValueError("MPC needs at least 100 samples per stage")
        if not 0 < self.lam_min <= self.lam0:
            raise ValueError("need 0 < lam_min <= lam0")
        if not 0 < self.omega < 1:
            raise ValueError("omega must lie in (0, 1)")
        if self.max_ascent < 1 or self.max_outer < 1:
            raise ValueError("iteration caps must be positive")


@dataclass
class SaaStage:
    """Frozen sample problem on the times ``times[0] .. times[-1]``."""

    model: SaaModel
    times: np.ndarray
    x0: np.ndarray  # (N, n)
    xi: np.ndarray  # (N, M, n)
    mu: np.ndarray  # (M+1,) multipliers on E[E_m]
    lam: float

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def forward(self, u: np.ndarray) -> np.ndarray:
        N, n = self.x0.shape
        xs = np.empty((self.steps + 1, N, n))
        xs[0] = self.x0
        sq = math.sqrt(self.dt)
        for m in range(self.steps):
            s = self.times[m]
            um = np.full(N, u[m])
            xs[m + 1] = xs[m] + self.dt * self.model.drift(s, xs[m], um) + sq * self.model.noise(s, xs[m], self.xi[:, m])
        return xs

    def objective(self, u: np.ndarray, xs: np.ndarray | None = None) -> float:
        """Sample-mean reward minus the Moreau-Yosida penalty on E[E_m], m >= 1."""
        if xs is None:
            xs = self.forward(u)
        N = self.x0.shape[0]
        total = np.zeros(N)
        for m in range(self.steps):
            total += self.dt * self.model.reward(self.times[m], xs[m], np.full(N, u[m]))
        total += self.model.terminal(xs[-1])
        mean_e = xs[1:, :, self.model.energy_index].mean(axis=1)
        lo, hi = self.model.energy_box
        y = mean_e + self.lam * self.mu[1:]
        pen = ((y - np.clip(y, lo, hi)) ** 2 - (self.lam * self.mu[1:]) ** 2) / (2.0 * self.lam)
        return float(total.mean() - self.dt * pen.sum())

    def gradient(self, u: np.ndarray, xs: np.ndarray | None = None) -> np.ndarray:
        """Exact gradient of :meth:`objective` from the discrete adjoint."""
        if xs is None:
            xs = self.forward(u)
        N, n = self.x0.shape
        k = self.model.energy_index
        mean_e = xs[:, :, k].mean(axis=1)
        xi_pen = np.zeros(self.steps + 1)
        xi_pen[1:] = self._penalty_slope(mean_e[1:])
        M = self.steps
        p = self.model.terminal_x(xs[M])
        p[:, k] -= self.dt * xi_pen[M]
        sq = math.sqrt(self.dt)
        grad = np.empty(M)
        for m in range(M - 1, -1, -1):
            s = self.times[m]
            um = np.full(N, u[m])
            grad[m] = float(np.mean(self.dt * (self.model.reward_u(s, xs[m], um)
                                               + (self.model.drift_u(s, xs[m], um) * p).sum(axis=1))))
            if m == 0:
                break
            jac = self.dt * self.model.drift_x(s, xs[m], um) + sq * self.model.noise_x(s, xs[m], self.xi[:, m])
            p = p + np.einsum("nij,ni->nj", jac, p) + self.dt * self.model.reward_x(s, xs[m], um)
            p[:, k] -= self.dt * xi_pen[m]
        return grad

    def _penalty_slope(self, mean_e: np.ndarray) -> np.ndarray:
        lo, hi = self.model.energy_box
        y = mean_e + self.lam * self.mu[1:]
        return (y - np.clip(y, lo, hi)) / self.lam

    def expected_energy(self, u: np.ndarray) -> np.ndarray:
        return self.forward(u)[:, :, self.model.energy_index].mean(axis=1)


@dataclass
class StageResult:
    controls: np.ndarray
    objective: float
    expected_energy: np.ndarray
    violation: float
    converged: bool
    ascent_steps: int
    outer: int


def projected_ascent(stage: SaaStage, u0: np.ndarray, params: MpcParams) -> tuple[np.ndarray, float, int]:
    """Projected gradient ascent with Armijo backtracking on the projection arc.

    Trial steps use the Barzilai-Borwein ratio of the last move, which keeps
    the iteration count low when the penalty makes the problem stiff.
    """
    b = stage.model.bounds
    u = b.clip(np.asarray(u0, dtype=float))
    xs = stage.forward(u)
    f = stage.objective(u, xs)
    g = stage.gradient(u, xs)
    alpha = None
    steps = 0
    for steps in range(1, params.max_ascent + 1):
        gmax = float(np.abs(g).max())
        if gmax == 0.0:
            break
        if alpha is None:
            alpha = params.step0 * b.span / gmax
        if np.max(np.abs(b.clip(u + g / gmax * 1e-3 * b.span) - u)) <= params.grad_tol:
            break  # stationary: projected direction vanishes
        accepted = False
        for _ in range(40):
            cand = b.clip(u + alpha * g)
            xc = stage.forward(cand)
            fc = stage.objective(cand, xc)
            if fc >= f + params.armijo * float(g @ (cand - u)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        gc = stage.gradient(cand, xc)
        du, dg = cand - u, gc - g
        moved = float(np.max(np.abs(du)))
        u, xs, f, g = cand, xc, fc, gc
        if moved <= params.grad_tol:
            break
        curv = -float(du @ dg)
        alpha = float(du @ du) / curv if curv > 0.0 else 2.0 * alpha
    return u, f, steps


def mpc_stage_solve(
    s_k: float,
    x_k: np.ndarray,
    model: SaaModel,
    horizon_end: float,
    params: MpcParams,
    seed: int,
    u_init: np.ndarray | None = None,
) -> StageResult:
    """Open-loop control sequence on [s_k, T] from the expected state ``x_k``."""
    x_k = np.asarray(x_k, dtype=float)
    if not np.all(np.isfinite(x_k)):
        raise ValueError("stage initial state must be finite")
    tg = TimeGrid(s_k, horizon_end, params.dt)
    M = tg.steps
    rng = path_stream(seed, 0)
    xi = rng.standard_normal((params.samples, M, model.dim))
    x0 = np.broadcast_to(x_k, (params.samples, model.dim)).copy()
    stage = SaaStage(model, tg.times, x0, xi, np.zeros(M + 1), params.lam0)
    u = np.zeros(M) if u_init is None else np.asarray(u_init, dtype=float)[:M]
    lo, hi = model.energy_box
    steps = 0
    converged = False
    outer = 0
    for outer in range(1, params.max_outer + 1):
        u, _, k = projected_ascent(stage, u, params)
        steps += k
        e = stage.expected_energy(u)
        viol = float(np.max(np.maximum(lo - e[1:], e[1:] - hi).clip(min=0.0)))
        new_mu = stage.mu.copy()
        new_mu[1:] = stage._penalty_slope(e[1:])
        dmu = float(np.max(np.abs(new_mu - stage.mu)))
        stage.mu = new_mu
        if viol <= params.eta and dmu <= params.zeta:
            converged = True
            break
        stage.lam = max(params.omega * stage.lam, params.lam_min)
    e = stage.expected_energy(u)
    viol = float(np.max(np.maximum(lo - e[1:], e[1:] - hi).clip(min=0.0)))
    stage_obj = stage.objective(u)
    if not converged:
        logger.info("MPC stage at s=%g stopped without meeting tolerances (violation %.3g)", s_k, viol)
    return StageResult(u, stage_obj, e, viol, converged, steps, outer)


@dataclass
class MpcRun:
    times: np.ndarray
    states: np.ndarray  # expected states at stage starts, (M+1, n)
    controls: np.ndarray  # applied actions, (M,)
    revenue: RevenueEstimate | None
    stages: list[StageResult] = field(default_factory=list)

    @property
    def stage_count(self) -> int:
        return self.controls.size


def mpc_run(model: PvModel, params: MpcParams, seed: int, realizations: int = 10_000,
            evaluate: bool = True) -> MpcRun:
    """Receding horizon: solve, apply the first action, move to the expected next state."""
    saa = pv_saa_model(model)
    t, T = model.horizon
    tg = TimeGrid(t, T, params.dt)
    x = np.asarray(model.initial.mean, dtype=float)
    states = [x.copy()]
    applied = []
    stages = []
    warm = None
    for k in range(tg.steps):
        s = tg.times[k]
        res = mpc_stage_solve(s, x, saa, T, params, seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]),
                              u_init=warm)
        stages.append(res)
        u0 = float(res.controls[0])
        applied.append(u0)
        # noise has mean zero and the drift is affine in x, so this is E[X_{k+1}]
        x = x + params.dt * saa.drift(s, x[None, :], np.array([u0]))[0]
        states.append(x.copy())
        warm = res.controls[1:]
    controls = np.array(applied)
    revenue = None
    if evaluate:
        revenue = evaluate_open_loop(model, tg, controls, realizations, seed)
    return MpcRun(tg.times, np.array(states), controls, revenue, stages)


def evaluate_open_loop(model: PvModel, timegrid: TimeGrid, controls: np.ndarray, realizations: int,
                       seed: int) -> RevenueEstimate:
    """Monte Carlo revenue of a time-only control sequence held over each step."""
    seq = np.append(np.asarray(controls, dtype=float), 0.0)

    def policy(s, x):
        return np.full(x.shape[0], seq[timegrid.index(s)])

    bundle = euler_maruyama(pv_problem(model), policy, model.initial, timegrid, realizations, seed)
    return evaluate_revenue(bundle, pv_problem(model))


def brute_force_sequences(stage: SaaStage, levels=None) -> tuple[np.ndarray, float]:
    """Best feasible piecewise-constant sequence over ``levels`` per step.

    Feasibility is judged on the sample-mean energy, without penalty.
    """
    b = stage.model.bounds
    if levels is None:
        levels = (b.p_min, 0.0, b.p_max)
    lo, hi = stage.model.energy_box
    saved_lam, saved_mu = stage.lam, stage.mu
    stage.lam, stage.mu = 1.0, np.zeros_like(saved_mu)
    best, best_val = None, -math.inf
    try:
        for combo in itertools.product(levels, repeat=stage.steps):
            u = np.array(combo, dtype=float)
            xs = stage.forward(u)
            e = xs[1:, :, stage.model.energy_index].mean(axis=1)
            if np.any(e < lo - 1e-12) or np.any(e > hi + 1e-12):
                continue
            val = stage.objective(u, xs)
            if val > best_val + 1e-12:
                best, best_val = u, val
    finally:
        stage.lam, stage.mu = saved_lam, saved_mu
    if best is None:
        raise ValueError("no feasible sequence on the enumeration grid")
    return best, best_val


def finite_difference_gradient(stage: SaaStage, u: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty(u.size)
    for m in range(u.size):
        up, dn = u.copy(), u.copy()
        up[m] += h
        dn[m] -= h
        g[m] = (stage.objective(up) - stage.objective(dn)) / (2.0 * h)
    return g


def make_stage(model: PvModel, times: np.ndarray, x0: np.ndarray, samples: int, seed: int,
               lam: float = 1.0, mu: np.ndarray | None = None) -> SaaStage:
    saa = pv_saa_model(model)
    rng = path_stream(seed, 0)
    M = times.size - 1
    xi = rng.standard_normal((samples, M, saa.dim))
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (samples, saa.dim)).copy()
    return SaaStage(saa, np.asarray(times, dtype=float), x0, xi,
                    np.zeros(M + 1) if mu is None else np.asarray(mu, dtype=float), lam)

