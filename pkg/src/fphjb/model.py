"""Control-problem interface and the PV plant / battery instantiation.

Every callback in :class:`ControlProblem` is vectorized over nodes: states are
arrays of shape ``(N, n)`` and controls arrays of shape ``(N,)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

TimeFunction = Callable[[float], float]

# Seasonal constants of the clear-sky irradiance fit (W/m^2 and days).
_CS_AMPLITUDE = 83.69
_CS_OFFSET = 1130.44
_CS_PHASE = 82.07
_YEAR_DAYS = 365.24


class ModelError(ValueError):
    """Raised when model parameters violate their invariants."""


# ---------------------------------------------------------------------------
# Synthetic daily curves
# ---------------------------------------------------------------------------


def synthetic_csi_mean(s: float) -> float:
    """Daylight bell for the mean clear-sky index, zero outside 06:00-18:00."""
    x = math.sin(math.pi * (s - 6.0) / 12.0)
    return 0.7 * max(0.0, x) ** 2


def synthetic_price_mean(s: float) -> float:
    """Double-peaked day-ahead price level in EUR/MWh."""
    return (
        70.0
        + 15.0 * math.sin(2.0 * math.pi * (s - 9.0) / 24.0)
        + 8.0 * math.sin(4.0 * math.pi * s / 24.0)
    )


def synthetic_price_rate(s: float) -> float:
    """Time derivative of :func:`synthetic_price_mean` (EUR/MWh/h)."""
    return 15.0 * (2.0 * math.pi / 24.0) * math.cos(
        2.0 * math.pi * (s - 9.0) / 24.0
    ) + 8.0 * (4.0 * math.pi / 24.0) * math.cos(4.0 * math.pi * s / 24.0)


def synthetic_zenith(s: float, noon_zenith: float = 1.1) -> float:
    """Zenith angle that rises from the horizon at 06:00 to ``noon_zenith`` at noon.

    Outside daylight the angle exceeds pi/2, so the clear-sky term clamps to 0.
    """
    x = math.sin(math.pi * (s - 6.0) / 12.0)
    return 0.5 * math.pi - (0.5 * math.pi - noon_zenith) * x


def constant_curve(value: float) -> TimeFunction:
    return lambda s: float(value)


def centered_rate(fn: TimeFunction, step: float = 1e-3) -> TimeFunction:
    """Centered finite-difference derivative of a time curve."""
    return lambda s: (fn(s + step) - fn(s - step)) / (2.0 * step)


@dataclass(frozen=True)
class CsvCurve:
    """Cubic-spline interpolant of a two-column ``hour,value`` CSV file."""

    path: str
    hours: tuple[float, ...]
    values: tuple[float, ...]

    @classmethod
    def load(cls, path: str | Path) -> "CsvCurve":
        hours: list[float] = []
        values: list[float] = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if row[0].lstrip().startswith("#"):
                    continue
                if len(row) != 2:
                    raise ModelError(
                        f"{path}:{lineno}: expected 2 fields (hour,value), got {len(row)}"
                    )
                try:
                    h, v = float(row[0]), float(row[1])
                except ValueError:
                    if lineno == 1 and not hours:
                        continue  # header row
                    raise ModelError(f"{path}:{lineno}: non-numeric field in {row!r}")
                if not (math.isfinite(h) and math.isfinite(v)):
                    raise ModelError(f"{path}:{lineno}: non-finite value")
                if hours and h <= hours[-1]:
                    raise ModelError(f"{path}:{lineno}: hours must be strictly increasing")
                hours.append(h)
                values.append(v)
        if len(hours) < 4:
            raise ModelError(f"{path}: need at least 4 rows for a cubic spline, got {len(hours)}")
        return cls(str(path), tuple(hours), tuple(values))

    def __post_init__(self) -> None:
        object.__setattr__(self, "_spline", CubicSpline(self.hours, self.values))

    def __call__(self, s: float) -> float:
        s = min(max(s, self.hours[0]), self.hours[-1])
        return float(self._spline(s))  # type: ignore[attr-defined]


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolarGeometry:
    day_of_year: int = 15
    zenith_angle: TimeFunction = synthetic_zenith
    inclination: TimeFunction | None = None  # defaults to pi/2 - zenith
    tilt: float = 0.2382 * math.pi

    def __post_init__(self) -> None:
        if not 1 <= self.day_of_year <= 366:
            raise ModelError(f"day_of_year must lie in [1, 366], got {self.day_of_year}")
        if not 0.0 <= self.tilt <= 0.5 * math.pi:
            raise ModelError(f"tilt must lie in [0, pi/2], got {self.tilt}")

    def sun_inclination(self, s: float) -> float:
        if self.inclination is not None:
            return self.inclination(s)
        return 0.5 * math.pi - self.zenith_angle(s)

    def check_horizon(self, t: float, T: float, samples: int = 97) -> None:
        for s in np.linspace(t, T, samples):
            a = self.zenith_angle(float(s))
            if not 0.0 <= a <= math.pi:
                raise ModelError(f"zenith angle {a:.4f} outside [0, pi] at s={s:.3f}")


@dataclass(frozen=True)
class PvParams:
    area: float = 7500.0
    efficiency: float = 0.8
    geometry: SolarGeometry = field(default_factory=SolarGeometry)

    def __post_init__(self) -> None:
        if self.area <= 0:
            raise ModelError("PV area must be positive")
        if not 0.0 < self.efficiency <= 1.0:
            raise ModelError("PV efficiency must lie in (0, 1]")


@dataclass(frozen=True)
class SdeParams:
    kappa_z: float = 0.75
    kappa_pi: float = 0.04
    sigma_zz: float = 0.2
    sigma_piz: float = 0.0
    sigma_pipi: float = 0.075
    sigma_ee: float = 0.1
    theta_z: TimeFunction = synthetic_csi_mean
    theta_pi: TimeFunction = synthetic_price_mean
    theta_pi_rate: TimeFunction = synthetic_price_rate

    def __post_init__(self) -> None:
        if self.kappa_z <= 0 or self.kappa_pi <= 0:
            raise ModelError("mean-reversion speeds must be positive")
        for name in ("sigma_zz", "sigma_piz", "sigma_pipi", "sigma_ee"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be nonnegative")

    def check_horizon(self, t: float, T: float, samples: int = 97) -> None:
        for s in np.linspace(t, T, samples):
            z = self.theta_z(float(s))
            if not 0.0 <= z <= 1.0:
                raise ModelError(f"theta_z={z:.4f} outside [0, 1] at s={s:.3f}")


@dataclass(frozen=True)
class ControlBounds:
    p_min: float = -1.0
    p_max: float = 1.0

    def __post_init__(self) -> None:
        if not self.p_min < 0.0 < self.p_max:
            raise ModelError(f"need p_min < 0 < p_max, got ({self.p_min}, {self.p_max})")

    @property
    def span(self) -> float:
        return self.p_max - self.p_min

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.p_min, self.p_max)


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box; infinite bounds mean the component is unconstrained."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    units: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper):
            raise ModelError("lower and upper bounds differ in length")
        for lo, hi in zip(self.lower, self.upper):
            if lo > hi:
                raise ModelError(f"inverted bounds ({lo}, {hi})")

    @classmethod
    def unbounded(cls, dim: int) -> "BoxSet":
        return cls((-math.inf,) * dim, (math.inf,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def is_unbounded(self) -> bool:
        return all(math.isinf(v) for v in self.lower + self.upper)

    def project(self, y: np.ndarray) -> np.ndarray:
        return np.clip(y, np.asarray(self.lower), np.asarray(self.upper))

    def distance(self, y: np.ndarray) -> np.ndarray:
        """Euclidean distance to the box along the last axis."""
        y = np.asarray(y, dtype=float)
        return np.linalg.norm(y - self.project(y), axis=-1)


@dataclass(frozen=True)
class InitialDistribution:
    """Normal initial law with diagonal covariance."""

    mean: tuple[float, ...]
    variance: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.mean) != len(self.variance):
            raise ModelError("mean and variance differ in length")
        if any(v <= 0 for v in self.variance):
            raise ModelError("initial variances must be positive")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def pdf(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        m = np.asarray(self.mean)
        v = np.asarray(self.variance)
        z = ((y - m) ** 2 / v).sum(axis=1)
        return np.exp(-0.5 * z) / np.sqrt(np.prod(2.0 * np.pi * v))

    def marginal(self, dims: Sequence[int]) -> "InitialDistribution":
        return InitialDistribution(
            tuple(self.mean[i] for i in dims), tuple(self.variance[i] for i in dims)
        )

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.dim))
        return np.asarray(self.mean) + z * np.sqrt(np.asarray(self.variance))


# ---------------------------------------------------------------------------
# Abstract problem
# ---------------------------------------------------------------------------

Drift = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
Diffusion = Callable[[float, np.ndarray], np.ndarray]
RunningCost = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
TerminalCost = Callable[[np.ndarray], np.ndarray]
ConstraintMap = Callable[[float, np.ndarray], np.ndarray]
Maximizer = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ControlProblem:
    """Continuous-time stochastic control problem with a scalar control.

    ``maximizer`` is an optional closed-form argmax of the Hamiltonian in the
    maximization frame, ``(s, Y, grad) -> u``. Problems that are not affine in
    the control and provide no maximizer fall back to a grid search.
    """

    dim: int
    drift: Drift
    diffusion: Diffusion
    running_cost: RunningCost
    terminal_cost: TerminalCost
    bounds: ControlBounds
    constraint: BoxSet
    horizon: tuple[float, float]
    sense: str = "maximize"
    constraint_map: ConstraintMap | None = None
    maximizer: Maximizer | None = None
    labels: tuple[str, ...] = ()
    grid_resolution: int = 201
    affine: bool = field(init=False)

    def __post_init__(self) -> None:
        if self.sense not in ("maximize", "minimize"):
            raise ModelError(f"sense must be 'maximize' or 'minimize', got {self.sense!r}")
        t, T = self.horizon
        if not T > t:
            raise ModelError("horizon must satisfy T > t")
        if not self.labels:
            self.labels = tuple(f"y{i + 1}" for i in range(self.dim))
        self.affine = self._probe_affine()

    @property
    def reward_sign(self) -> float:
        return 1.0 if self.sense == "maximize" else -1.0

    def reward(self, s: float, y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Running cost in the maximization frame."""
        return self.reward_sign * self.running_cost(s, y, u)

    def terminal_reward(self, y: np.ndarray) -> np.ndarray:
        return self.reward_sign * self.terminal_cost(y)

    def constraint_values(self, s: float, y: np.ndarray) -> np.ndarray:
        if self.constraint_map is None:
            return y
        return self.constraint_map(s, y)

    def hamiltonian(self, s: float, y: np.ndarray, u: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return (self.drift(s, y, u) * grad).sum(axis=1) + self.reward(s, y, u)

    def switching(self, s: float, y: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Slope of the Hamiltonian in u (only meaningful when affine)."""
        n = y.shape[0]
        hi = self.hamiltonian(s, y, np.full(n, self.bounds.p_max), grad)
        lo = self.hamiltonian(s, y, np.full(n, self.bounds.p_min), grad)
        return (hi - lo) / self.bounds.span

    def _probe_affine(self) -> bool:
        rng = np.random.default_rng(12345)
        y = rng.normal(0.0, 1.0, size=(16, self.dim)) + 0.5
        p = rng.normal(0.0, 1.0, size=(16, self.dim))
        t, T = self.horizon
        s = 0.5 * (t + T)
        b = self.bounds
        u1 = np.full(16, b.p_min)
        u2 = np.full(16, b.p_max)
        with np.errstate(all="ignore"):
            h1 = self.hamiltonian(s, y, u1, p)
            h2 = self.hamiltonian(s, y, u2, p)
            hm = self.hamiltonian(s, y, 0.5 * (u1 + u2), p)
        if not np.all(np.isfinite([h1, h2, hm])):
            return False
        scale = 1.0 + np.abs(h1) + np.abs(h2)
        return bool(np.all(np.abs(hm - 0.5 * (h1 + h2)) <= 1e-9 * scale))


# ---------------------------------------------------------------------------
# PV plant with battery
# ---------------------------------------------------------------------------


def clear_sky_irradiance(s: float, geom: SolarGeometry) -> float:
    """Clear-sky irradiance in W/m^2; zero when the sun is below the horizon."""
    c = math.cos(geom.zenith_angle(s))
    if c <= 0.0:
        return 0.0
    seasonal = _CS_AMPLITUDE * math.sin(
        2.0 * math.pi * (geom.day_of_year + _CS_PHASE) / _YEAR_DAYS
    )
    return c**1.2 * (seasonal + _CS_OFFSET)


def pv_power(irradiance, params: PvParams, s: float):
    """PV output in MW for horizontal irradiance ``irradiance`` (scalar or array)."""
    gamma = params.geometry.sun_inclination(s)
    sg = math.sin(gamma)
    if sg <= 0.0:
        return np.zeros_like(irradiance, dtype=float) if np.ndim(irradiance) else 0.0
    ratio = math.sin(gamma + params.geometry.tilt) / sg
    return 1e-6 * params.area * params.efficiency * ratio * irradiance


def pv_drift(s: float, y: np.ndarray, u: np.ndarray, p: SdeParams) -> np.ndarray:
    y = np.atleast_2d(y)
    out = np.empty_like(y, dtype=float)
    out[:, 0] = p.kappa_z * (p.theta_z(s) - y[:, 0])
    out[:, 1] = p.kappa_pi * (p.theta_pi(s) + p.theta_pi_rate(s) / p.kappa_pi - y[:, 1])
    out[:, 2] = -np.asarray(u, dtype=float)
    return out


def pv_diffusion(s: float, y: np.ndarray, p: SdeParams) -> np.ndarray:
    y = np.atleast_2d(y)
    out = np.zeros((y.shape[0], 3, 3))
    out[:, 0, 0] = p.sigma_zz * y[:, 0] * (1.0 - y[:, 0])
    out[:, 1, 0] = p.sigma_piz * y[:, 1]
    out[:, 1, 1] = p.sigma_pipi * y[:, 1]
    out[:, 2, 2] = p.sigma_ee * y[:, 2]
    return out


def pv_running_cost(s: float, y: np.ndarray, u: np.ndarray, pv: PvParams) -> np.ndarray:
    y = np.atleast_2d(y)
    solar = pv_power(clear_sky_irradiance(s, pv.geometry) * y[:, 0], pv, s)
    return y[:, 1] * (solar + u)


def pv_terminal_cost(y: np.ndarray, c_terminal: float) -> np.ndarray:
    return c_terminal * np.atleast_2d(y)[:, 2]


@dataclass(frozen=True)
class PvModel:
    """Everything that defines the PV/battery scenario."""

    sde: SdeParams = field(default_factory=SdeParams)
    pv: PvParams = field(default_factory=PvParams)
    bounds: ControlBounds = field(default_factory=ControlBounds)
    energy_min: float = 0.0
    energy_max: float = 4.0
    initial_energy: float = 2.0
    initial_variance: tuple[float, float, float] = (0.1, 8.560, 0.01)
    terminal_price: float | None = None  # None -> theta_pi(T)
    horizon: tuple[float, float] = (0.0, 24.0)

    def __post_init__(self) -> None:
        if not self.energy_min < self.energy_max:
            raise ModelError("energy_min must be below energy_max")
        t, T = self.horizon
        self.sde.check_horizon(t, T)
        self.pv.geometry.check_horizon(t, T)

    @property
    def c_terminal(self) -> float:
        if self.terminal_price is not None:
            return self.terminal_price
        return self.sde.theta_pi(self.horizon[1])

    @property
    def initial(self) -> InitialDistribution:
        t = self.horizon[0]
        mean = (self.sde.theta_z(t), self.sde.theta_pi(t), self.initial_energy)
        return InitialDistribution(mean, tuple(self.initial_variance))

    @property
    def constraint(self) -> BoxSet:
        return BoxSet(
            (-math.inf, -math.inf, self.energy_min),
            (math.inf, math.inf, self.energy_max),
            ("-", "EUR/MWh", "MWh"),
        )

    def solar_power(self, s: float, z: np.ndarray) -> np.ndarray:
        return pv_power(clear_sky_irradiance(s, self.pv.geometry) * np.asarray(z), self.pv, s)


def pv_problem(model: PvModel) -> ControlProblem:
    sde, pv, c_t = model.sde, model.pv, model.c_terminal
    return ControlProblem(
        dim=3,
        drift=lambda s, y, u: pv_drift(s, y, u, sde),
        diffusion=lambda s, y: pv_diffusion(s, y, sde),
        running_cost=lambda s, y, u: pv_running_cost(s, y, u, pv),
        terminal_cost=lambda y: pv_terminal_cost(y, c_t),
        bounds=model.bounds,
        constraint=model.constraint,
        horizon=model.horizon,
        sense="maximize",
        labels=("Z", "Pi", "E"),
    )


def lq_problem(
    sigma: float,
    horizon: tuple[float, float] = (0.0, 4.0),
    control_box: tuple[float, float] = (-100.0, 100.0),
    constraint: BoxSet | None = None,
) -> ControlProblem:
    """dX = u ds + sigma dB, minimize E[int (u^2 + X^2) ds + X_T^2].

    Closed form without state constraint: v(s, y) = y^2 + sigma^2 (T - s), u* = -y.
    """
    if sigma <= 0:
        raise ModelError("sigma must be positive")
    bounds = ControlBounds(*control_box)

    def maximizer(s: float, y: np.ndarray, grad: np.ndarray) -> np.ndarray:
        # max_u {u p - u^2} in the negated frame -> u = p / 2
        return bounds.clip(0.5 * grad[:, 0])

    return ControlProblem(
        dim=1,
        drift=lambda s, y, u: np.asarray(u, dtype=float).reshape(-1, 1) + 0.0 * y,
        diffusion=lambda s, y: np.full((y.shape[0], 1, 1), sigma),
        running_cost=lambda s, y, u: np.asarray(u) ** 2 + y[:, 0] ** 2,
        terminal_cost=lambda y: y[:, 0] ** 2,
        bounds=bounds,
        constraint=constraint if constraint is not None else BoxSet.unbounded(1),
        horizon=horizon,
        sense="minimize",
        maximizer=maximizer,
        labels=("X",),
    )


def lq_value(s: float, y: np.ndarray, sigma: float, T: float) -> np.ndarray:
    """Closed-form value of the unconstrained LQ fixture."""
    return np.asarray(y) ** 2 + sigma**2 * (T - s)
