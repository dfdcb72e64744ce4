"""YAML scenario configuration: defaults, validation and builders.

Omitted fields take the reference-scenario values. Numeric fields may carry a
unit annotation (``"4 MWh"``); the unit must match the field's expected unit.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .alm import AlmParams
from .benchmarks import MpcParams, ThresholdParams, TouSchedule
from .grid import GridError, TimeGrid, build_mesh
from .model import (
    ControlBounds,
    CsvCurve,
    ModelError,
    PvModel,
    PvParams,
    SdeParams,
    SolarGeometry,
    centered_rate,
    constant_curve,
    synthetic_csi_mean,
    synthetic_price_mean,
    synthetic_price_rate,
    synthetic_zenith,
)
from .scenario import MODES, Discretization


class ConfigError(ValueError):
    """Validation failure; ``field`` is the dotted key path, ``line`` the YAML line if known."""

    def __init__(self, message: str, field: str = "", line: int | None = None):
        where = field
        if line is not None:
            where = f"{field} (line {line})" if field else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.field = field
        self.line = line


DEFAULTS: dict[str, Any] = {
    "sde": {
        "kappa_z": 0.75,
        "kappa_pi": 0.04,
        "sigma_zz": 0.2,
        "sigma_piz": 0.0,
        "sigma_pipi": 0.075,
        "sigma_ee": 0.1,
        "theta_z": {"kind": "synthetic", "value": None, "path": None},
        "theta_pi": {"kind": "synthetic", "value": None, "path": None},
    },
    "pv": {
        "area": 7500.0,
        "efficiency": 0.8,
        "day_of_year": 15,
        "tilt": 0.2382 * math.pi,
        "noon_zenith": 1.1,
    },
    "bounds": {"p_min": -1.0, "p_max": 1.0},
    "constraints": {"energy_min": 0.0, "energy_max": 4.0},
    "initial": {"energy": 2.0, "variance": [0.1, 8.56, 0.01]},
    "horizon": {"t": 0.0, "T": 24.0, "dt": 0.5, "terminal_price": None},
    "mesh": {
        "bounds": [[-5.0, 5.0], [-40.0, 220.0], [-30.0, 40.0]],
        "counts": [21, 66, 71],
        "coarse_counts": [11, 34, 36],
        "scheme": "hybrid",
    },
    "alm": {
        "lam0": 100.0,
        "lam_min": 5.0,
        "tau0": 0.1,
        "tau_min": 1e-3,
        "zeta": 1e-3,
        "eta": 0.05,
        "omega1": 0.5,
        "omega2": 0.5,
        "rho": 1.0,
        "penalty_hits": 3,
        "max_iter": 500,
        "tie_tol": 0.0,
        "sweep": [1000.0, 100.0, 50.0, 20.0, 8.0, 6.0],
    },
    "reduction": {"mode": "energy1d", "allow_full3d": False},
    "benchmark": {
        "pi_min": 65.0,
        "pi_max": 75.0,
        "off_peak": [[0.0, 8.0]],
        "peak": [[10.0, 14.0], [18.0, 22.0]],
        "realizations": 10000,
        "seed": 0,
        "mpc": {
            "dt": 0.5,
            "samples": 1000,
            "max_ascent": 200,
            "step0": 1.0,
            "lam0": 1.0,
            "lam_min": 0.05,
            "eta": 0.05,
            "max_outer": 8,
        },
    },
    "output": {"dir": "runs/default"},
}

# expected units of annotated fields (dotted path -> unit)
UNITS = {
    "bounds.p_min": "MW",
    "bounds.p_max": "MW",
    "constraints.energy_min": "MWh",
    "constraints.energy_max": "MWh",
    "initial.energy": "MWh",
    "horizon.t": "h",
    "horizon.T": "h",
    "horizon.dt": "h",
    "horizon.terminal_price": "EUR/MWh",
    "benchmark.pi_min": "EUR/MWh",
    "benchmark.pi_max": "EUR/MWh",
    "pv.area": "m2",
    "pv.tilt": "rad",
    "benchmark.mpc.dt": "h",
}

# keys whose value is an open mapping checked separately
_THETA_KEYS = {"kind", "value", "path"}


def _line_index(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line of the key in the YAML source."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, "")
    return out


def _parse_unit(value, path: str, lines: dict[str, int]):
    if not isinstance(value, str):
        return value
    parts = value.split()
    expected = UNITS.get(path)
    if len(parts) == 2 and expected is not None:
        try:
            num = float(parts[0])
        except ValueError:
            raise ConfigError(f"cannot parse {value!r} as '<number> {expected}'", path, lines.get(path))
        if parts[1] != expected:
            raise ConfigError(f"unit {parts[1]!r} does not match expected {expected!r}", path, lines.get(path))
        return num
    return value


def _merge(defaults: dict, given: dict, prefix: str, lines: dict[str, int]) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in defaults:
            raise ConfigError("unknown key", path, lines.get(path))
        if isinstance(defaults[key], dict):
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError("expected a mapping", path, lines.get(path))
            out[key] = _merge(defaults[key], val, path, lines)
        else:
            out[key] = _parse_unit(val, path, lines)
    return out


def _number(data: dict, path: str, lines: dict[str, int], kind=float):
    node = data
    for part in path.split("."):
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"expected a number, got {node!r}", path, lines.get(path))
    if kind is int and int(node) != node:
        raise ConfigError(f"expected an integer, got {node!r}", path, lines.get(path))
    if not math.isfinite(node):
        raise ConfigError("value must be finite", path, lines.get(path))
    return kind(node)


@dataclass
class ScenarioConfig:
    """Merged configuration tree plus builders for the runtime objects."""

    data: dict
    source: str | None = None
    base_dir: Path | None = None

    # -- serialization ---------------------------------------------------

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=None)

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def model_hash(self) -> str:
        """Hash of everything that defines the scenario, but not the solver or output settings."""
        keys = ("sde", "pv", "bounds", "constraints", "initial", "horizon")
        sub = {k: self.data[k] for k in keys}
        return hashlib.sha256(json.dumps(sub, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    # -- builders ----------------------------------------------------------

    def _curve(self, spec: dict, path: str, synthetic, synthetic_rate=None):
        kind = spec.get("kind")
        if kind == "synthetic":
            return synthetic, synthetic_rate
        if kind == "constant":
            if spec.get("value") is None:
                raise ConfigError("constant curve needs 'value'", path)
            return constant_curve(float(spec["value"])), constant_curve(0.0)
        if kind == "csv":
            if not spec.get("path"):
                raise ConfigError("csv curve needs 'path'", path)
            p = Path(spec["path"])
            if not p.is_absolute() and self.base_dir is not None:
                p = self.base_dir / p
            try:
                curve = CsvCurve.load(p)
            except OSError as exc:
                raise ConfigError(f"cannot read {p}: {exc}", path)
            except ModelError as exc:
                raise ConfigError(str(exc), path)
            return curve, centered_rate(curve)
        raise ConfigError(f"unknown curve kind {kind!r} (synthetic, constant, csv)", path)

    def model(self) -> PvModel:
        d = self.data
        sde = d["sde"]
        theta_z, _ = self._curve(sde["theta_z"], "sde.theta_z", synthetic_csi_mean)
        theta_pi, rate = self._curve(sde["theta_pi"], "sde.theta_pi", synthetic_price_mean, synthetic_price_rate)
        pv = d["pv"]
        noon = float(pv["noon_zenith"])
        geom = SolarGeometry(int(pv["day_of_year"]), lambda s: synthetic_zenith(s, noon), None, float(pv["tilt"]))
        h = d["horizon"]
        return PvModel(
            sde=SdeParams(sde["kappa_z"], sde["kappa_pi"], sde["sigma_zz"], sde["sigma_piz"],
                          sde["sigma_pipi"], sde["sigma_ee"], theta_z, theta_pi, rate),
            pv=PvParams(float(pv["area"]), float(pv["efficiency"]), geom),
            bounds=ControlBounds(float(d["bounds"]["p_min"]), float(d["bounds"]["p_max"])),
            energy_min=float(d["constraints"]["energy_min"]),
            energy_max=float(d["constraints"]["energy_max"]),
            initial_energy=float(d["initial"]["energy"]),
            initial_variance=tuple(float(v) for v in d["initial"]["variance"]),
            terminal_price=None if h["terminal_price"] is None else float(h["terminal_price"]),
            horizon=(float(h["t"]), float(h["T"])),
        )

    def discretization(self) -> Discretization:
        m = self.data["mesh"]
        return Discretization(
            bounds=tuple(tuple(float(x) for x in b) for b in m["bounds"]),
            counts=tuple(int(n) for n in m["counts"]),
            coarse_counts=tuple(int(n) for n in m["coarse_counts"]),
            dt=float(self.data["horizon"]["dt"]),
            scheme=m["scheme"],
        )

    def alm_params(self, lam0: float | None = None) -> AlmParams:
        a = dict(self.data["alm"])
        a.pop("sweep")
        if lam0 is not None:
            a["lam0"] = lam0
        a["lam_min"] = min(a["lam_min"], a["lam0"])
        return AlmParams(**{k: (int(v) if k in ("penalty_hits", "max_iter") else float(v)) for k, v in a.items()})

    def sweep_values(self) -> list[float]:
        return [float(x) for x in self.data["alm"]["sweep"]]

    def threshold(self) -> ThresholdParams:
        b = self.data["benchmark"]
        return ThresholdParams(float(b["pi_min"]), float(b["pi_max"]))

    def tou(self) -> TouSchedule:
        b = self.data["benchmark"]
        return TouSchedule(tuple(tuple(float(x) for x in w) for w in b["off_peak"]),
                           tuple(tuple(float(x) for x in w) for w in b["peak"]))

    def mpc(self) -> MpcParams:
        m = self.data["benchmark"]["mpc"]
        return MpcParams(dt=float(m["dt"]), samples=int(m["samples"]), max_ascent=int(m["max_ascent"]),
                         step0=float(m["step0"]), lam0=float(m["lam0"]), lam_min=float(m["lam_min"]),
                         eta=float(m["eta"]), max_outer=int(m["max_outer"]))

    @property
    def mode(self) -> str:
        return self.data["reduction"]["mode"]

    @property
    def seed(self) -> int:
        return int(self.data["benchmark"]["seed"])

    @property
    def realizations(self) -> int:
        return int(self.data["benchmark"]["realizations"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output"]["dir"])

    def with_overrides(self, **paths) -> "ScenarioConfig":
        """Copy with dotted-path overrides, e.g. ``{"benchmark.seed": 3}``; revalidated."""
        data = copy.deepcopy(self.data)
        for path, val in paths.items():
            node = data
            parts = path.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError("unknown key", path)
            node[parts[-1]] = val
        cfg = ScenarioConfig(data, self.source, self.base_dir)
        validate(cfg)
        return cfg


def validate(cfg: ScenarioConfig, lines: dict[str, int] | None = None) -> None:
    lines = lines or {}
    d = cfg.data

    def err(msg, path):
        raise ConfigError(msg, path, lines.get(path))

    for path in ("sde.kappa_z", "sde.kappa_pi", "sde.sigma_zz", "sde.sigma_piz", "sde.sigma_pipi", "sde.sigma_ee",
                 "pv.area", "pv.efficiency", "pv.tilt", "pv.noon_zenith", "bounds.p_min", "bounds.p_max",
                 "constraints.energy_min", "constraints.energy_max", "initial.energy", "horizon.t", "horizon.T",
                 "horizon.dt", "benchmark.pi_min", "benchmark.pi_max"):
        _number(d, path, lines)
    for path in ("pv.day_of_year", "benchmark.realizations", "benchmark.seed", "alm.penalty_hits", "alm.max_iter",
                 "benchmark.mpc.samples", "benchmark.mpc.max_ascent", "benchmark.mpc.max_outer"):
        _number(d, path, lines, int)
    for key in d["alm"]:
        if key != "sweep":
            _number(d, f"alm.{key}", lines)
    for key in d["benchmark"]["mpc"]:
        _number(d, f"benchmark.mpc.{key}", lines)
    for name in ("theta_z", "theta_pi"):
        spec = d["sde"][name]
        extra = set(spec) - _THETA_KEYS
        if extra:
            err(f"unknown key(s) {sorted(extra)}", f"sde.{name}")
    var = d["initial"]["variance"]
    if not (isinstance(var, list) and len(var) == 3):
        err("expected three variances (Z, Pi, E)", "initial.variance")
    if d["reduction"]["mode"] not in MODES:
        err(f"unknown mode {d['reduction']['mode']!r}; expected one of {MODES}", "reduction.mode")
    if d["horizon"]["terminal_price"] is not None:
        _number(d, "horizon.terminal_price", lines)
    m = d["mesh"]
    for key in ("bounds", "counts", "coarse_counts"):
        if not (isinstance(m[key], list) and len(m[key]) == 3):
            err("expected three entries (Z, Pi, E)", f"mesh.{key}")
    if m["scheme"] not in ("hybrid", "upwind"):
        err(f"unknown scheme {m['scheme']!r}", "mesh.scheme")
    if d["benchmark"]["realizations"] < 2:
        err("need at least 2 realizations", "benchmark.realizations")
    sweep = d["alm"]["sweep"]
    if not (isinstance(sweep, list) and sweep and all(isinstance(x, (int, float)) and x > 0 for x in sweep)):
        err("expected a non-empty list of positive penalties", "alm.sweep")
    checks = [
        ("mesh.counts", lambda: build_mesh(m["bounds"], m["counts"])),
        ("mesh.coarse_counts", lambda: build_mesh(m["bounds"], m["coarse_counts"])),
        ("horizon.dt", lambda: TimeGrid(d["horizon"]["t"], d["horizon"]["T"], d["horizon"]["dt"])),
        ("benchmark.mpc.dt", lambda: TimeGrid(d["horizon"]["t"], d["horizon"]["T"], d["benchmark"]["mpc"]["dt"])),
        ("alm", cfg.alm_params),
        ("benchmark.pi_min", cfg.threshold),
        ("benchmark.peak", cfg.tou),
        ("benchmark.mpc", cfg.mpc),
        ("model", cfg.model),
    ]
    for path, build in checks:
        try:
            build()
        except ConfigError:
            raise
        except (GridError, ModelError, ValueError, TypeError) as exc:
            err(str(exc), path)


def parse_config(text: str, source: str | None = None, base_dir: Path | None = None) -> ScenarioConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", line=None if mark is None else mark.line + 1)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    lines = _line_index(text)
    cfg = ScenarioConfig(_merge(DEFAULTS, raw, "", lines), source, base_dir)
    validate(cfg, lines)
    return cfg


def load_config(path: str | Path | None = None) -> ScenarioConfig:
    """Read and validate a scenario file; ``None`` gives the reference scenario."""
    if path is None:
        return parse_config("", None)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(p))
    return parse_config(text, str(p), p.parent)


def default_config() -> ScenarioConfig:
    return parse_config("")
