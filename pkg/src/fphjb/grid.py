"""Tensor meshes, time grids, nodal fields, quadrature and interpolation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class TensorMesh:
    """Uniform tensor-product mesh. Nodes are stored in C (row-major) order."""

    bounds: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bounds) != len(self.counts):
            raise GridError("bounds and counts differ in length")
        if not 1 <= len(self.counts) <= 3:
            raise GridError("mesh dimension must be 1, 2 or 3")
        for (a, b), n in zip(self.bounds, self.counts):
            if not a < b:
                raise GridError(f"inverted or empty bounds ({a}, {b})")
            if n < 3:
                raise GridError(f"need at least 3 nodes per axis, got {n}")

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @cached_property
    def spacing(self) -> np.ndarray:
        return np.array([(b - a) / (n - 1) for (a, b), n in zip(self.bounds, self.counts)])

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(a, b, n) for (a, b), n in zip(self.bounds, self.counts))

    @cached_property
    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @cached_property
    def axis_weights(self) -> tuple[np.ndarray, ...]:
        out = []
        for ax, h in zip(self.axes, self.spacing):
            w = np.full(ax.size, h)
            w[0] = w[-1] = 0.5 * h
            out.append(w)
        return tuple(out)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights (cell volumes of the dual mesh)."""
        w = self.axis_weights[0]
        for wk in self.axis_weights[1:]:
            w = np.multiply.outer(w, wk)
        return np.asarray(w).ravel()

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.bounds]))

    def scaled(self, factor: float) -> "TensorMesh":
        """Same bounds, node counts scaled by ``factor`` (at least 3 per axis)."""
        counts = tuple(max(3, int(round((n - 1) * factor)) + 1) for n in self.counts)
        return TensorMesh(self.bounds, counts)

    def sub(self, dims: Sequence[int]) -> "TensorMesh":
        return TensorMesh(tuple(self.bounds[i] for i in dims), tuple(self.counts[i] for i in dims))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        lo = np.array([a for a, _ in self.bounds])
        hi = np.array([b for _, b in self.bounds])
        return np.all((points >= lo) & (points <= hi), axis=1)


def build_mesh(bounds: Sequence[Sequence[float]], counts: Sequence[int]) -> TensorMesh:
    return TensorMesh(tuple((float(a), float(b)) for a, b in bounds), tuple(int(n) for n in counts))


@dataclass(frozen=True)
class TimeGrid:
    t: float
    T: float
    dt: float

    def __post_init__(self) -> None:
        if not self.T > self.t or self.dt <= 0:
            raise GridError("need T > t and dt > 0")
        m = (self.T - self.t) / self.dt
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise GridError(f"dt={self.dt} does not divide the horizon [{self.t}, {self.T}]")

    @property
    def steps(self) -> int:
        return int(round((self.T - self.t) / self.dt))

    @cached_property
    def times(self) -> np.ndarray:
        return self.t + self.dt * np.arange(self.steps + 1)

    def index(self, s: float) -> int:
        """Index of the last grid time not after ``s`` (clamped)."""
        k = int(math.floor((s - self.t) / self.dt + 1e-9))
        return min(max(k, 0), self.steps)


@dataclass
class Field:
    """Nodal values on ``mesh`` at every time of ``timegrid``: shape (M+1, nodes)."""

    mesh: TensorMesh
    timegrid: TimeGrid
    values: np.ndarray
    units: str = ""
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        expected = (self.timegrid.steps + 1, self.mesh.size)
        if self.values.shape != expected:
            raise GridError(f"field shape {self.values.shape} != {expected}")

    @classmethod
    def zeros(cls, mesh: TensorMesh, timegrid: TimeGrid, units: str = "") -> "Field":
        return cls(mesh, timegrid, np.zeros((timegrid.steps + 1, mesh.size)), units)

    def at(self, s: float) -> np.ndarray:
        """Slice at time ``s``, linear in time between grid points."""
        tg = self.timegrid
        x = (s - tg.t) / tg.dt
        k = int(math.floor(x))
        if k < 0:
            return self.values[0]
        if k >= tg.steps:
            return self.values[-1]
        w = x - k
        if w < 1e-12:
            return self.values[k]
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def dump(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.bin`` (little-endian float64, row-major) and ``<path>.json``."""
        path = Path(path)
        binary = path.with_suffix(".bin")
        meta = path.with_suffix(".json")
        self.values.astype("<f8").tofile(binary)
        sidecar = {
            "bounds": [list(b) for b in self.mesh.bounds],
            "counts": list(self.mesh.counts),
            "t": self.timegrid.t,
            "T": self.timegrid.T,
            "dt": self.timegrid.dt,
            "units": self.units,
            "layout": "row-major (time, node), little-endian float64",
        }
        meta.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return binary, meta

    @classmethod
    def load(cls, path: str | Path) -> "Field":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        mesh = build_mesh(meta["bounds"], meta["counts"])
        tg = TimeGrid(meta["t"], meta["T"], meta["dt"])
        vals = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        return cls(mesh, tg, vals.reshape(tg.steps + 1, mesh.size), meta.get("units", ""))


def integrate(values: np.ndarray, mesh: TensorMesh) -> float:
    return float(np.dot(mesh.weights, values))


def moment(density: np.ndarray, mesh: TensorMesh, k: int) -> float:
    return float(np.dot(mesh.weights * mesh.nodes[:, k], density))


def moments(density: np.ndarray, mesh: TensorMesh) -> np.ndarray:
    """All first moments at once; ``density`` may be (nodes,) or (times, nodes)."""
    return (np.atleast_2d(density) * mesh.weights) @ mesh.nodes


def _cell_weights(mesh: TensorMesh, points: np.ndarray):
    idx, frac = [], []
    for k, (ax, h) in enumerate(zip(mesh.axes, mesh.spacing)):
        x = np.clip(points[:, k], ax[0], ax[-1])
        i = np.clip(np.floor((x - ax[0]) / h).astype(np.int64), 0, ax.size - 2)
        idx.append(i)
        frac.append(np.clip((x - ax[i]) / h, 0.0, 1.0))
    return idx, frac


def interpolate(values: np.ndarray, mesh: TensorMesh, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation; points outside the domain are clamped to it."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    idx, frac = _cell_weights(mesh, pts)
    grid = values.reshape(mesh.shape)
    out = np.zeros(pts.shape[0])
    for corner in product((0, 1), repeat=mesh.dim):
        w = np.ones(pts.shape[0])
        sel = []
        for k, c in enumerate(corner):
            w = w * (frac[k] if c else 1.0 - frac[k])
            sel.append(idx[k] + c)
        out += w * grid[tuple(sel)]
    return out
