"""Run orchestration: solve, simulate, bid, benchmark and sweep stages with CSV/JSON output.

CSV files carry only deterministic content. Wall times and other
run-dependent facts go into ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .alm import control_change_norm
from .benchmarks import (
    evaluate_rule,
    mpc_run,
    threshold_rule,
    tou_rule,
)
from .config import ScenarioConfig
from .grid import TimeGrid
from .model import clear_sky_irradiance, pv_problem
from .scenario import ModeSolution, expected_solar, solve_mode
from .sim import capacity_firming, euler_maruyama, evaluate_revenue, expected_control

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".12g")


def csv_bytes(header: list[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue().encode()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class NonConvergence(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    mode: str | None
    seed: int
    config_hash: str
    model_hash: str
    code_version: str = __version__
    wall_times: dict[str, float] = field(default_factory=dict)
    convergence: dict[str, bool] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST
        return cls(**json.loads(p.read_text()))

    @property
    def converged(self) -> bool:
        return all(self.convergence.values())


class Run:
    """Output directory plus the manifest being assembled."""

    def __init__(self, cfg: ScenarioConfig, out: Path, command: str, mode: str | None, seed: int):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, mode, seed, cfg.config_hash(), cfg.model_hash())

    def write(self, name: str, data: bytes) -> Path:
        p = self.out / name
        p.write_bytes(data)
        self.manifest.files[name] = hashlib.sha256(data).hexdigest()
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        return self.write(name, csv_bytes(list(header), rows))

    def stage(self, name: str):
        return _Stage(self, name)

    def finish(self) -> RunManifest:
        # anything left over from an earlier run in the same directory is not ours
        for p in sorted(self.out.iterdir()):
            if p.is_file() and p.name != MANIFEST and p.name not in self.manifest.files:
                p.unlink()
        (self.out / MANIFEST).write_text(self.manifest.to_json())
        return self.manifest


class _Stage:
    def __init__(self, run: Run, name: str):
        self.run, self.name = run, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.run.manifest.wall_times[self.name] = round(time.perf_counter() - self.t0, 3)
        if exc is not None and not isinstance(exc, (KeyboardInterrupt, SystemExit)):
            self.run.manifest.failures[self.name] = f"{exc_type.__name__}: {exc}"
            logger.error("stage %s failed: %s", self.name, exc)
            return True  # keep partial outputs, carry on with later stages
        return False


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def do_solve(run: Run, mode: str, mesh_scale: float = 1.0, lam0: float | None = None,
             prefix: str | None = None) -> ModeSolution:
    cfg = run.cfg
    model = cfg.model()
    params = cfg.alm_params(lam0)
    sol = solve_mode(model, mode, params, cfg.discretization(), mesh_scale=mesh_scale)
    res = sol.result
    tag = prefix or mode
    run.manifest.convergence[f"solve:{tag}"] = bool(res.converged)
    run.write_csv(
        f"{tag}_alm.csv",
        ["iteration", "J", "control_change", "multiplier_change", "violation", "lam", "tau", "phase", "hit"],
        [(r.iteration, r.objective, r.control_change, r.multiplier_change, r.violation, r.lam, r.tau, r.phase,
          r.hit) for r in res.history],
    )
    tg = sol.timegrid
    means = sol.state_means()
    geom = model.pv.geometry
    ics = np.array([clear_sky_irradiance(s, geom) for s in tg.times])
    run.write_csv(
        f"{tag}_irradiance.csv", ["s", "E_I", "I_CS"],
        [(s, ics[m] * means[m, 0], ics[m]) for m, s in enumerate(tg.times)],
    )
    run.write_csv(
        f"{tag}_states.csv", ["s", "E_Z", "E_Pi", "E_E"],
        [(s, *means[m]) for m, s in enumerate(tg.times)],
    )
    run.manifest.summary[tag] = {
        "J_fp": res.objective,
        "E_v0": res.expected_value,
        "iterations": res.iterations,
        "converged": bool(res.converged),
        "final_violation": res.history[-1].violation if res.history else None,
        "bang_bang_fraction": float(np.isin(res.control.values, [model.bounds.p_min, model.bounds.p_max]).mean()),
    }
    return sol


def do_bid(run: Run, sol: ModeSolution, prefix: str | None = None):
    """Expected power flows and the hourly capacity-firmed bid schedule."""
    tg = sol.timegrid
    tag = prefix or sol.mode
    u = expected_control(sol.result.control, sol.result.density)
    solar = expected_solar(sol.model, tg, sol.state_means()[:, 0])
    bids = capacity_firming(u, solar, tg)
    run.write_csv(
        f"{tag}_power.csv", ["s", "E_P_bat", "E_P_solar", "E_P_grid", "bid"],
        [(s, u[m], solar[m], solar[m] + u[m], bids.at(s)) for m, s in enumerate(tg.times)],
    )
    run.write_csv(f"{tag}_bids.csv", ["hour", "bid_MW"], zip(bids.hours, bids.values))
    return bids


def do_simulate(run: Run, sol: ModeSolution, realizations: int, seed: int, prefix: str | None = None):
    cfg = run.cfg
    model = sol.model
    tg = TimeGrid(*model.horizon, cfg.discretization().dt)
    problem = pv_problem(model)
    bundle = euler_maruyama(problem, sol.policy(), model.initial, tg, realizations, seed)
    rev = evaluate_revenue(bundle, problem)
    tag = prefix or sol.mode
    mean, se = bundle.mean(), bundle.std_error()
    geom = model.pv.geometry
    rows = []
    for m, s in enumerate(tg.times):
        ics = clear_sky_irradiance(s, geom)
        rows.append((s, ics * mean[m, 0], ics, ics * bundle.states[0, m, 0], mean[m, 1], mean[m, 2], se[m, 2]))
    run.write_csv(f"{tag}_mc.csv", ["s", "E_I", "I_CS", "I_path0", "E_Pi", "E_E", "se_E"], rows)
    lo, hi = rev.interval()
    run.manifest.summary.setdefault(tag, {}).update(
        {"J_mc": rev.mean, "J_mc_se": rev.std_error, "J_mc_ci99": [lo, hi], "mc_flagged": rev.flagged,
         "realizations": realizations, "seed": seed})
    return rev


def do_benchmark(run: Run, realizations: int, seed: int, with_mpc: bool = True):
    cfg = run.cfg
    model = cfg.model()
    dt = cfg.discretization().dt
    tg = TimeGrid(*model.horizon, dt)
    rows = []
    controllers = [("price_threshold", threshold_rule(model, cfg.threshold(), dt)),
                   ("tou", tou_rule(model, cfg.tou(), dt))]
    for name, pol in controllers:
        with run.stage(f"benchmark:{name}"):
            ev = evaluate_rule(pol, model, tg, realizations, seed)
            lo, hi = ev.revenue.interval()
            rows.append((name, ev.revenue.mean, ev.revenue.std_error, lo, hi, ev.audit.guard_violations,
                         ev.audit.max_overshoot))
            mean = ev.bundle.mean()
            pbat = np.nanmean(ev.bundle.controls, axis=0)
            run.write_csv(f"benchmark_{name}_trajectory.csv", ["s", "E_E", "E_Pi", "E_P_bat"],
                          [(s, mean[m, 2], mean[m, 1], pbat[m]) for m, s in enumerate(tg.times)])
    if with_mpc:
        with run.stage("benchmark:mpc"):
            res = mpc_run(model, cfg.mpc(), seed, realizations)
            lo, hi = res.revenue.interval()
            rows.append(("mpc", res.revenue.mean, res.revenue.std_error, lo, hi, 0, float("nan")))
            run.manifest.convergence["benchmark:mpc"] = all(st.converged for st in res.stages)
            run.write_csv("benchmark_mpc_trajectory.csv", ["s", "E_E", "E_Pi", "E_P_bat"],
                          [(s, res.states[m, 2], res.states[m, 1], res.controls[m] if m < res.stage_count else 0.0)
                           for m, s in enumerate(res.times)])
    run.write_csv("benchmark_summary.csv",
                  ["controller", "J", "se", "ci99_low", "ci99_high", "guard_violations", "max_overshoot"], rows)
    run.manifest.summary["benchmark"] = {r[0]: {"J": r[1], "se": r[2]} for r in rows}
    return rows


def do_sweep(run: Run, lam_values, mesh_scale: float = 1.0, mode: str = "energy1d"):
    rows = []
    prev = None
    for lam0 in lam_values:
        tag = f"sweep_lam{fmt(lam0)}"
        with run.stage(f"solve:{tag}"):
            sol = do_solve(run, mode, mesh_scale, lam0=lam0, prefix=tag)
            res = sol.result
            diff = float("nan")
            if prev is not None:
                diff = relative_l2(res.control, prev, sol)
            rows.append((lam0, res.iterations, res.converged, diff))
            prev = res.control
    run.write_csv("sweep.csv", ["lam0", "iterations", "converged", "relative_l2_control_difference"], rows)
    run.manifest.summary["sweep"] = [{"lam0": r[0], "iterations": r[1], "converged": bool(r[2]),
                                      "rel_l2": r[3]} for r in rows]
    return rows


def relative_l2(ua, ub, sol: ModeSolution) -> float:
    """||ua - ub|| / ||ub|| in the space-time L2 norm of the mode's mesh."""
    span = sol.model.bounds.span
    num = control_change_norm(ua, ub, sol.mesh, sol.timegrid, span)
    den = control_change_norm(ub, np.zeros_like(ub.values), sol.mesh, sol.timegrid, span)
    return num / den if den > 0 else float("nan")


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


class IncompatibleRuns(ValueError):
    pass


def compare(manifests: list[RunManifest]) -> tuple[list[tuple], list[tuple]]:
    """Rows (label, J_fp, J_mc, E_v0, iterations, wall_time) and λ⁰-sweep rows."""
    if len(manifests) < 2:
        raise ValueError("need at least two manifests to compare")
    hashes = {m.model_hash for m in manifests}
    if len(hashes) != 1:
        raise IncompatibleRuns(f"runs use different scenarios (model hashes {sorted(h[:12] for h in hashes)})")
    rows, sweep = [], []
    for m in manifests:
        for label, s in sorted(m.summary.items()):
            if label == "benchmark":
                for ctrl, v in sorted(s.items()):
                    rows.append((ctrl, float("nan"), v["J"], float("nan"), 0,
                                 m.wall_times.get(f"benchmark:{ctrl}", float("nan"))))
            elif label == "sweep":
                for r in s:
                    sweep.append((r["lam0"], r["iterations"], r["rel_l2"]))
            elif isinstance(s, dict) and "J_fp" in s:
                wt = m.wall_times.get(f"solve:{label}", m.wall_times.get("solve", float("nan")))
                rows.append((label, s["J_fp"], s.get("J_mc", float("nan")), s["E_v0"], s["iterations"], wt))
    return rows, sweep


def format_table(rows: list[tuple], sweep: list[tuple]) -> str:
    lines = [f"{'run':<22}{'J (FP)':>12}{'J (MC)':>12}{'E[v0]':>12}{'iters':>8}{'wall s':>10}"]
    for label, jfp, jmc, ev0, it, wt in rows:
        lines.append(f"{label:<22}{jfp:>12.2f}{jmc:>12.2f}{ev0:>12.2f}{it:>8d}{wt:>10.1f}")
    js = {r[0]: (r[2] if not math.isnan(r[2]) else r[1]) for r in rows}
    if "energy1d" in js and "price_energy2d" in js:
        lines.append(f"J(price_energy2d) - J(energy1d) = {js['price_energy2d'] - js['energy1d']:.2f}")
    if sweep:
        lines.append("")
        lines.append(f"{'lam0':>10}{'iters':>8}{'rel L2 diff':>14}")
        for lam0, it, d in sweep:
            lines.append(f"{lam0:>10g}{it:>8d}{d:>14.4f}")
    return "\n".join(lines)
