"""State decomposition into a controlled block and control-free blocks.

Control-free blocks are propagated once by the FP solver; the controlled
block then sees costs and constraint maps averaged against their marginals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alm import AlmParams, AlmResult, run_algorithm1
from .fp import fp_solve
from .grid import Field, TensorMesh, TimeGrid
from .model import BoxSet, ControlProblem, InitialDistribution

PROBE_SAMPLES = 32
PROBE_TOL = 1e-12


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Decomposition:
    controlled: tuple[int, ...]
    blocks: tuple[tuple[int, ...], ...]
    checks: list[Check] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    @property
    def uncontrolled(self) -> tuple[int, ...]:
        return tuple(i for b in self.blocks for i in b)


def _close(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(np.all(np.abs(a - b) <= PROBE_TOL * (1.0 + np.abs(b))))


def validate_decomposition(
    problem: ControlProblem,
    controlled: Sequence[int],
    blocks: Sequence[Sequence[int]],
    probe_bounds: Sequence[tuple[float, float]] | None = None,
    seed: int = 0,
) -> Decomposition:
    """Probe drift and diffusion for cross-block dependence.

    For every ordered pair (output coordinate i, foreign coordinate j) the
    foreign coordinate is redrawn at ``PROBE_SAMPLES`` random points and the
    block's drift/diffusion rows must not move. Brownian channels are
    identified with state coordinates.
    """
    n = problem.dim
    controlled = tuple(controlled)
    blocks = tuple(tuple(b) for b in blocks)
    allidx = list(controlled) + [i for b in blocks for i in b]
    if sorted(allidx) != list(range(n)):
        raise DecompositionError(
            f"partition {controlled} | {blocks} must cover dims 0..{n - 1} exactly once"
        )
    if not controlled:
        raise DecompositionError("the controlled block is empty")
    rng = np.random.default_rng(seed)
    if probe_bounds is None:
        probe_bounds = [(-3.0, 3.0)] * n
    lo = np.array([a for a, _ in probe_bounds])
    hi = np.array([b for _, b in probe_bounds])
    t, T = problem.horizon
    groups = [controlled] + list(blocks)
    owner = {i: g for g in groups for i in g}
    checks: list[Check] = []
    labels = problem.labels
    bnd = problem.bounds

    y = lo + (hi - lo) * rng.random((PROBE_SAMPLES, n))
    s_vals = t + (T - t) * rng.random(PROBE_SAMPLES)
    u = bnd.p_min + bnd.span * rng.random(PROBE_SAMPLES)

    def eval_rows(yy, uu, rows):
        b = np.array([problem.drift(s, yy[k : k + 1], uu[k : k + 1])[0] for k, s in enumerate(s_vals)])
        sig = np.array([problem.diffusion(s, yy[k : k + 1])[0] for k, s in enumerate(s_vals)])
        return b[:, rows], sig[:, rows, :]

    for g in groups:
        rows = list(g)
        base_b, base_s = eval_rows(y, u, rows)
        for j in range(n):
            if j in g:
                continue
            y2 = y.copy()
            y2[:, j] = lo[j] + (hi[j] - lo[j]) * rng.random(PROBE_SAMPLES)
            b2, s2 = eval_rows(y2, u, rows)
            for i_pos, i in enumerate(rows):
                ok = _close(b2[:, i_pos], base_b[:, i_pos]) and _close(s2[:, i_pos], base_s[:, i_pos])
                if not ok:
                    checks.append(Check(f"coefficients of {labels[i]} independent of {labels[j]}", False,
                                        f"drift/diffusion row {labels[i]} changes with {labels[j]}"))
        # Brownian channels of other blocks must not enter this block
        foreign = [c for c in range(n) if owner[c] is not g]
        if foreign:
            leak = np.abs(base_s[:, :, foreign]).max(axis=0)
            for i_pos, i in enumerate(rows):
                for c_pos, c in enumerate(foreign):
                    if leak[i_pos, c_pos] > 0:
                        checks.append(Check(f"diffusion of {labels[i]} block-diagonal", False,
                                            f"{labels[i]} row loads the Brownian channel of {labels[c]}"))
    for g in blocks:
        rows = list(g)
        base_b, _ = eval_rows(y, u, rows)
        u2 = bnd.p_min + bnd.span * rng.random(PROBE_SAMPLES)
        b2, _ = eval_rows(y, u2, rows)
        for i_pos, i in enumerate(rows):
            if not _close(b2[:, i_pos], base_b[:, i_pos]):
                checks.append(Check(f"{labels[i]} control-free", False, f"drift of {labels[i]} depends on u"))
    if not checks:
        checks.append(Check("separability", True, f"{PROBE_SAMPLES} probes per coordinate pair"))
    return Decomposition(controlled, blocks, checks)


def _embed(y_part: np.ndarray, dims: Sequence[int], fill: np.ndarray) -> np.ndarray:
    full = np.tile(fill, (y_part.shape[0], 1))
    full[:, list(dims)] = y_part
    return full


def restrict(problem: ControlProblem, dims: Sequence[int], fill: np.ndarray) -> ControlProblem:
    """Control-free dynamics of ``dims`` (foreign coordinates pinned to ``fill``)."""
    dims = list(dims)
    zero = lambda s, y, u=None: np.zeros(y.shape[0])  # noqa: E731
    return ControlProblem(
        dim=len(dims),
        drift=lambda s, y, u: problem.drift(s, _embed(y, dims, fill), u)[:, dims],
        diffusion=lambda s, y: problem.diffusion(s, _embed(y, dims, fill))[:, dims][:, :, dims],
        running_cost=zero,
        terminal_cost=lambda y: np.zeros(y.shape[0]),
        bounds=problem.bounds,
        constraint=BoxSet.unbounded(len(dims)),
        horizon=problem.horizon,
        labels=tuple(problem.labels[i] for i in dims),
    )


@dataclass
class MarginalBank:
    blocks: tuple[tuple[int, ...], ...]
    fields: list[Field]

    def joint(self, m: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """Product quadrature of the control-free blocks at time slice m.

        Returns (points (N2, n2), probability weights (N2,), dims order).
        """
        pts, wts, dims = None, None, []
        for blk, f in zip(self.blocks, self.fields):
            p = f.mesh.nodes
            w = f.values[m] * f.mesh.weights
            if pts is None:
                pts, wts = p, w
            else:
                pts = np.hstack([np.repeat(pts, p.shape[0], axis=0), np.tile(p, (pts.shape[0], 1))])
                wts = np.outer(wts, w).ravel()
            dims.extend(blk)
        return pts, wts, dims

    def mean(self, m: int) -> dict[int, float]:
        out = {}
        for blk, f in zip(self.blocks, self.fields):
            mom = (f.values[m] * f.mesh.weights) @ f.mesh.nodes
            for k, d in enumerate(blk):
                out[d] = float(mom[k])
        return out


def precompute_marginals(
    problem: ControlProblem,
    decomp: Decomposition,
    init: InitialDistribution,
    meshes: Sequence[TensorMesh],
    timegrid: TimeGrid,
    scheme: str = "hybrid",
) -> MarginalBank:
    fill = np.asarray(init.mean, dtype=float)
    fields = []
    for blk, mesh in zip(decomp.blocks, meshes):
        sub = restrict(problem, blk, fill)
        zero = Field.zeros(mesh, timegrid, "control")
        fields.append(fp_solve(sub, zero, init.marginal(blk), mesh, timegrid, scheme=scheme))
    return MarginalBank(decomp.blocks, fields)


class _Averager:
    """Averages a full-state function against the marginal bank at grid times."""

    def __init__(self, problem: ControlProblem, decomp: Decomposition, bank: MarginalBank, timegrid: TimeGrid):
        self.problem = problem
        self.ctrl = list(decomp.controlled)
        self.bank = bank
        self.tg = timegrid
        self._joint: dict[int, tuple] = {}
        self._cache: dict[tuple, tuple] = {}

    def joint(self, m: int):
        if m not in self._joint:
            self._joint[m] = self.bank.joint(m)
        return self._joint[m]

    def _slices(self, s: float) -> list[tuple[int, float]]:
        tg = self.tg
        x = (s - tg.t) / tg.dt
        k = int(np.floor(x + 1e-9))
        if k >= tg.steps:
            return [(tg.steps, 1.0)]
        if k < 0:
            return [(0, 1.0)]
        w = x - k
        if w <= 1e-9:
            return [(k, 1.0)]
        return [(k, 1.0 - w), (k + 1, w)]

    def average(self, fn, s: float, y1: np.ndarray) -> np.ndarray:
        """Quadrature of fn(full_points) (-> (P,) or (P, k)) over the marginals."""
        total = None
        for m, wt in self._slices(s):
            pts, w2, dims2 = self.joint(m)
            n1, n2 = y1.shape[0], pts.shape[0]
            acc = None
            chunk = max(1, 200_000 // max(n2, 1))
            parts = []
            for lo in range(0, n1, chunk):
                y1c = y1[lo : lo + chunk]
                full = np.empty((y1c.shape[0] * n2, self.problem.dim))
                full[:, self.ctrl] = np.repeat(y1c, n2, axis=0)
                full[:, dims2] = np.tile(pts, (y1c.shape[0], 1))
                vals = fn(full, np.repeat(np.arange(lo, lo + y1c.shape[0]), n2))
                vals = vals.reshape(y1c.shape[0], n2, -1)
                parts.append(np.einsum("ajk,j->ak", vals, w2))
            acc = np.concatenate(parts, axis=0)
            total = wt * acc if total is None else total + wt * acc
        return total

    def cached(self, key: tuple, compute):
        if key not in self._cache:
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = compute()
        return self._cache[key]


def reduce_problem(
    problem: ControlProblem,
    decomp: Decomposition,
    bank: MarginalBank,
    timegrid: TimeGrid,
    init: InitialDistribution | None = None,
) -> ControlProblem:
    """Reduced problem on the controlled coordinates.

    Running and terminal costs and the constraint map are replaced by their
    averages over the product of the control-free marginals. The constraint
    map keeps the full-state dimension, so the original box applies unchanged.
    """
    ctrl = list(decomp.controlled)
    fill = np.asarray(init.mean if init is not None else np.zeros(problem.dim), dtype=float)
    avg = _Averager(problem, decomp, bank, timegrid)
    T = problem.horizon[1]
    affine = problem.affine
    bnd = problem.bounds

    def _cost_pair(s: float, y1: np.ndarray):
        def fn(full, rows):
            lo = problem.running_cost(s, full, np.full(full.shape[0], bnd.p_min))
            hi = problem.running_cost(s, full, np.full(full.shape[0], bnd.p_max))
            return np.stack([lo, hi], axis=1)

        pair = avg.average(fn, s, y1)
        slope = (pair[:, 1] - pair[:, 0]) / bnd.span
        return pair[:, 0] - bnd.p_min * slope, slope

    def running_cost(s, y1, u):
        u = np.broadcast_to(np.asarray(u, dtype=float), (y1.shape[0],))
        if affine:
            key = ("f", float(s), id(y1), y1.shape)
            base, slope = avg.cached(key, lambda: (y1, _cost_pair(s, y1)))[1]
            return base + u * slope

        def fn(full, rows):
            return problem.running_cost(s, full, u[rows])

        return avg.average(fn, s, y1)[:, 0]

    def terminal_cost(y1):
        key = ("g", id(y1), y1.shape)
        return avg.cached(key, lambda: (y1, avg.average(lambda full, rows: problem.terminal_cost(full), T, y1)[:, 0]))[1]

    def constraint_map(s, y1):
        key = ("G", float(s), id(y1), y1.shape)
        return avg.cached(key, lambda: (y1, avg.average(lambda full, rows: problem.constraint_values(s, full), s, y1)))[1]

    reduced = ControlProblem(
        dim=len(ctrl),
        drift=lambda s, y, u: problem.drift(s, _embed(y, ctrl, fill), u)[:, ctrl],
        diffusion=lambda s, y: problem.diffusion(s, _embed(y, ctrl, fill))[:, ctrl][:, :, ctrl],
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        bounds=problem.bounds,
        constraint=problem.constraint,
        horizon=problem.horizon,
        sense=problem.sense,
        constraint_map=constraint_map,
        labels=tuple(problem.labels[i] for i in ctrl),
    )
    reduced.parent = problem  # type: ignore[attr-defined]
    reduced.decomposition = decomp  # type: ignore[attr-defined]
    return reduced


@dataclass
class ReducedSolution:
    decomposition: Decomposition
    bank: MarginalBank
    problem: ControlProblem
    result: AlmResult
    mesh: TensorMesh

    @property
    def controlled(self) -> tuple[int, ...]:
        return self.decomposition.controlled


def solve_reduced(
    problem: ControlProblem,
    decomp: Decomposition,
    params: AlmParams,
    mesh: TensorMesh,
    block_meshes: Sequence[TensorMesh],
    timegrid: TimeGrid,
    init: InitialDistribution,
    scheme: str = "hybrid",
    callback=None,
) -> ReducedSolution:
    if not decomp.valid:
        raise DecompositionError("; ".join(c.detail for c in decomp.failures))
    bank = precompute_marginals(problem, decomp, init, block_meshes, timegrid, scheme=scheme)
    reduced = reduce_problem(problem, decomp, bank, timegrid, init)
    res = run_algorithm1(reduced, mesh, timegrid, params, init.marginal(decomp.controlled),
                         scheme=scheme, callback=callback)
    return ReducedSolution(decomp, bank, reduced, res, mesh)


def factorization_audit(
    problem: ControlProblem,
    decomp: Decomposition,
    policy,
    init: InitialDistribution,
    full_mesh: TensorMesh,
    timegrid: TimeGrid,
    scheme: str = "hybrid",
) -> np.ndarray:
    """L1 distance, per time slice, between the joint FP density and the product
    of the reduced-pipeline densities under one fixed feedback.

    ``policy(s, y1)`` acts on the controlled coordinates only. ``full_mesh`` must
    be the tensor product of the per-dimension meshes in coordinate order, and
    every block must be one-dimensional (the audit is meant for small toys).
    """
    ctrl = list(decomp.controlled)
    if any(len(b) != 1 for b in decomp.blocks) or len(ctrl) != 1:
        raise DecompositionError("the audit handles one controlled and one-dimensional blocks only")
    sub = {d: full_mesh.sub([d]) for d in range(problem.dim)}
    bank = precompute_marginals(problem, decomp, init, [sub[b[0]] for b in decomp.blocks], timegrid, scheme)
    reduced = reduce_problem(problem, decomp, bank, timegrid, init)
    m1 = sub[ctrl[0]]
    times = timegrid.times
    u1 = np.array([policy(s, m1.nodes) for s in times])
    phi1 = fp_solve(reduced, Field(m1, timegrid, u1, units="control"), init.marginal(ctrl), m1, timegrid, scheme=scheme)
    uf = np.array([policy(s, full_mesh.nodes[:, ctrl]) for s in times])
    joint = fp_solve(problem, Field(full_mesh, timegrid, uf, units="control"), init, full_mesh, timegrid, scheme=scheme)
    dist = np.empty(times.size)
    for m in range(times.size):
        parts = {ctrl[0]: phi1.values[m]}
        for b, f in zip(decomp.blocks, bank.fields):
            parts[b[0]] = f.values[m]
        prod = parts[0]
        for d in range(1, problem.dim):
            prod = np.multiply.outer(prod, parts[d])
        dist[m] = float(np.abs(prod.ravel() - joint.values[m]) @ full_mesh.weights)
    return dist
