"""Grids, measures, distances and mean-field couplings on the unit circle.

Everything here is immutable: arrays held by the dataclasses are copied and
marked read-only on construction, so instances can be shared freely between
joblib workers.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)
diagnostics_logger = logging.getLogger("backend.diagnostics")

A_MAX = 8.0
MASS_TOL = 1e-12
MIN_CELLS = 8


class LabError(RuntimeError):
    """Base class for every failure raised by the laboratory."""


class GridMismatchError(LabError, ValueError):
    pass


class ConfigurationError(LabError, ValueError):
    pass


class SolverError(LabError):
    """A numerical method did not converge."""

    def __init__(self, message: str, solver: str = "", history: Optional[List[float]] = None,
                 diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.solver = solver
        self.history = list(history or [])
        self.diagnostics = dict(diagnostics or {})


class InvariantViolation(LabError):
    """A post-hoc check on a computed object failed."""

    def __init__(self, name: str, value: float, tolerance: float, detail: str = ""):
        super().__init__(f"invariant '{name}' violated: {value:.3e} > {tolerance:.1e} {detail}".strip())
        self.name = name
        self.value = value
        self.tolerance = tolerance


class EmptyPayoffBand(LabError):
    pass


class BracketError(LabError):
    pass


def log_diagnostics(solver: str, iteration: int, residual: float, lam: Optional[float] = None) -> None:
    """Emit one JSON line on the diagnostics logger."""
    if diagnostics_logger.isEnabledFor(logging.DEBUG):
        record = {"solver": solver, "iteration": int(iteration), "residual": float(residual)}
        if lam is not None:
            record["lambda"] = float(lam)
        diagnostics_logger.debug(json.dumps(record))


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def project_to_torus(x):
    """Natural projection of the real line onto [0, 1)."""
    r = np.mod(x, 1.0)
    # np.mod(-1e-20, 1.0) rounds to 1.0
    r = np.where(r >= 1.0, 0.0, r)
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class TorusGrid:
    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < MIN_CELLS:
            raise ValueError(f"n_cells must be an integer >= {MIN_CELLS}, got {self.n_cells}")
        object.__setattr__(self, "n_cells", int(self.n_cells))

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def faces(self) -> np.ndarray:
        """Right faces x_{i+1/2} of each cell."""
        return (np.arange(self.n_cells) + 1.0) * self.h

    @property
    def lags(self) -> np.ndarray:
        return np.arange(self.n_cells) * self.h

    def require_same(self, other: "TorusGrid") -> None:
        if self.n_cells != other.n_cells:
            raise GridMismatchError(f"grid mismatch: {self.n_cells} vs {other.n_cells} cells")

    def field(self, fn: Callable[[np.ndarray], np.ndarray]) -> "GridField":
        return GridField(self, np.broadcast_to(fn(self.nodes), (self.n_cells,)))

    def constant(self, value: float = 0.0) -> "GridField":
        return GridField(self, np.full(self.n_cells, float(value)))

    def cell_index(self, points) -> np.ndarray:
        """Nearest cell center; exact midpoints go to the lower index."""
        t = np.asarray(project_to_torus(np.asarray(points, dtype=float)), dtype=float) * self.n_cells
        idx = np.ceil(t).astype(np.int64) - 1
        return np.mod(idx, self.n_cells)


@dataclass(frozen=True, eq=False)
class GridField:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values)
        if values.shape != (self.grid.n_cells,):
            raise ValueError(f"values must have shape ({self.grid.n_cells},), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("GridField values must be finite")
        object.__setattr__(self, "values", values)

    def mean(self) -> float:
        return float(np.sum(self.values) * self.grid.h)

    def normalized(self) -> "GridField":
        return GridField(self.grid, self.values - self.mean())

    def shifted(self, c: float) -> "GridField":
        return GridField(self.grid, self.values + c)

    def face_gradient(self) -> np.ndarray:
        """(v_{i+1} - v_i)/h at face i+1/2."""
        return (np.roll(self.values, -1) - self.values) / self.grid.h

    def gradient(self) -> np.ndarray:
        v = self.values
        return (np.roll(v, -1) - np.roll(v, 1)) / (2.0 * self.grid.h)

    def laplacian(self) -> np.ndarray:
        v = self.values
        return (np.roll(v, -1) - 2.0 * v + np.roll(v, 1)) / self.grid.h ** 2

    def interpolate(self, x) -> np.ndarray:
        return periodic_interpolate(self.values, x)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"node": self.grid.nodes, "value": self.values})

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "GridField":
        return cls(TorusGrid(len(df)), df["value"].to_numpy(dtype=float))

    def to_json_dict(self) -> Dict:
        return {"n_cells": self.grid.n_cells, "values": [float(v) for v in self.values]}

    @classmethod
    def from_json_dict(cls, payload: Dict) -> "GridField":
        grid = TorusGrid(int(payload["n_cells"]))
        return cls(grid, np.asarray(payload["values"], dtype=float))


def periodic_interpolate(node_values: np.ndarray, x) -> np.ndarray:
    """Linear interpolation between cell centers with periodic wrap."""
    n = node_values.shape[-1]
    t = np.asarray(x, dtype=float) * n - 0.5
    base = np.floor(t)
    w = t - base
    i0 = np.mod(base.astype(np.int64), n)
    i1 = np.mod(i0 + 1, n)
    return (1.0 - w) * node_values[i0] + w * node_values[i1]


@dataclass(frozen=True, eq=False)
class GridDrift:
    """Velocity field with values at cell centers and at the right faces."""

    grid: TorusGrid
    values: np.ndarray
    faces: np.ndarray
    cap: float = A_MAX

    def __post_init__(self):
        n = self.grid.n_cells
        values, faces = _readonly(self.values), _readonly(self.faces)
        if values.shape != (n,) or faces.shape != (n,):
            raise ValueError(f"drift arrays must have shape ({n},)")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(faces))):
            raise ValueError("GridDrift values must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "faces", faces)
        if self.exceeds_cap:
            logger.warning(f"drift sup-norm {self.sup_norm:.3f} exceeds cap {self.cap}")

    @property
    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(self.values)), np.max(np.abs(self.faces))))

    @property
    def exceeds_cap(self) -> bool:
        return self.sup_norm > self.cap

    @classmethod
    def zero(cls, grid: TorusGrid) -> "GridDrift":
        return cls(grid, np.zeros(grid.n_cells), np.zeros(grid.n_cells))

    @classmethod
    def from_potential(cls, u: GridField) -> "GridDrift":
        """The drift -Du, exact on faces."""
        return cls.from_faces(u.grid, -u.face_gradient())

    @classmethod
    def from_faces(cls, grid: TorusGrid, faces) -> "GridDrift":
        faces = np.asarray(faces, dtype=float)
        return cls(grid, 0.5 * (faces + np.roll(faces, 1)), faces)

    @classmethod
    def from_nodes(cls, grid: TorusGrid, values) -> "GridDrift":
        values = np.asarray(values, dtype=float)
        return cls(grid, values, 0.5 * (values + np.roll(values, -1)))

    def interpolate(self, x) -> np.ndarray:
        return periodic_interpolate(self.values, x)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"node": self.grid.nodes, "value": self.values,
                             "face": self.grid.faces, "face_value": self.faces})


@dataclass(frozen=True, eq=False)
class ProbabilityGrid:
    grid: TorusGrid
    density: np.ndarray

    def __post_init__(self):
        density = _readonly(self.density)
        if density.shape != (self.grid.n_cells,):
            raise ValueError(f"density must have shape ({self.grid.n_cells},)")
        if not np.all(np.isfinite(density)) or np.any(density < 0.0):
            raise ValueError("density must be finite and nonnegative")
        mass = float(np.sum(density) * self.grid.h)
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"density must integrate to 1, got {mass!r}")
        object.__setattr__(self, "density", density)

    @classmethod
    def from_weights(cls, grid: TorusGrid, weights) -> "ProbabilityGrid":
        """Normalize nonnegative cell weights to a probability density."""
        weights = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        total = float(np.sum(weights))
        if not np.isfinite(total) or total <= 0.0:
            raise ValueError("weights must have positive finite total")
        return cls(grid, weights / (total * grid.h))

    @classmethod
    def uniform(cls, grid: TorusGrid) -> "ProbabilityGrid":
        return cls(grid, np.ones(grid.n_cells))

    @classmethod
    def point_mass(cls, grid: TorusGrid, index: int) -> "ProbabilityGrid":
        weights = np.zeros(grid.n_cells)
        weights[int(index) % grid.n_cells] = 1.0
        return cls.from_weights(grid, weights)

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.grid.h

    def mix(self, other: "ProbabilityGrid", s: float) -> "ProbabilityGrid":
        self.grid.require_same(other.grid)
        return ProbabilityGrid.from_weights(self.grid, (1.0 - s) * self.masses + s * other.masses)

    def expectation(self, values) -> float:
        return float(np.sum(np.asarray(values, dtype=float) * self.masses))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"node": self.grid.nodes, "value": self.density})

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "ProbabilityGrid":
        return cls(TorusGrid(len(df)), df["value"].to_numpy(dtype=float))

    def to_json_dict(self) -> Dict:
        return {"n_cells": self.grid.n_cells, "values": [float(v) for v in self.density]}

    @classmethod
    def from_json_dict(cls, payload: Dict) -> "ProbabilityGrid":
        return cls(TorusGrid(int(payload["n_cells"])), np.asarray(payload["values"], dtype=float))


def wasserstein1_masses(p: np.ndarray, q: np.ndarray, h: float) -> np.ndarray:
    """Circle W1 between mass vectors along the last axis."""
    g = np.cumsum(np.asarray(p) - np.asarray(q), axis=-1)
    shift = np.median(g, axis=-1, keepdims=True)
    return np.sum(np.abs(g - shift), axis=-1) * h


def wasserstein1_circle(mu: ProbabilityGrid, nu: ProbabilityGrid) -> float:
    mu.grid.require_same(nu.grid)
    return float(wasserstein1_masses(mu.masses, nu.masses, mu.grid.h))


def empirical_measure(points: Sequence[float], grid: TorusGrid) -> ProbabilityGrid:
    points = np.asarray(points, dtype=float).ravel()
    if points.size == 0:
        raise ValueError("empirical measure of an empty point list")
    counts = np.bincount(grid.cell_index(points), minlength=grid.n_cells)
    return ProbabilityGrid(grid, counts / (points.size * grid.h))


@dataclass(frozen=True, eq=False)
class LagrangianSpec:
    """L(a, x) = a^2/2 + l(x) + c0, H(p, x) = p^2/2 - l(x) - c0."""

    potential: GridField
    offset: float = 0.0

    def __post_init__(self):
        if self.offset < 0.0:
            raise ValueError(f"offset must be >= 0, got {self.offset}")
        if np.min(self.potential.values) + self.offset < -MASS_TOL:
            raise ValueError("potential + offset must be nonnegative")

    @classmethod
    def normalized(cls, potential: GridField) -> "LagrangianSpec":
        return cls(potential, max(0.0, -float(np.min(potential.values))))

    @property
    def grid(self) -> TorusGrid:
        return self.potential.grid

    @property
    def V(self) -> np.ndarray:
        return self.potential.values + self.offset

    def lagrangian(self, a, x) -> np.ndarray:
        return 0.5 * np.asarray(a) ** 2 + periodic_interpolate(self.V, x)

    def hamiltonian(self, p, x) -> np.ndarray:
        return 0.5 * np.asarray(p) ** 2 - periodic_interpolate(self.V, x)

    @staticmethod
    def hamiltonian_p(p) -> np.ndarray:
        return np.asarray(p, dtype=float)

    def shifted(self, c: float) -> "LagrangianSpec":
        return LagrangianSpec(self.potential.shifted(c), self.offset)


@dataclass(frozen=True)
class FunctionalMaximum:
    value: float
    maximizer: ProbabilityGrid
    certified: bool
    method: str


class LinearTerm:
    """F(m) = sum g m h."""

    kind = "linear"

    def __init__(self, g: GridField):
        self.g = g
        self.grid = g.grid

    def values(self, masses: np.ndarray) -> np.ndarray:
        return masses @ self.g.values

    def derivative(self, masses: np.ndarray) -> np.ndarray:
        return np.array(self.g.values)

    def lower_bound(self) -> float:
        return float(np.min(self.g.values))

    def shape(self) -> str:
        return "constant" if np.ptp(self.g.values) < 1e-14 else "point"

    def is_convex(self) -> bool:
        return True

    def expected_empirical(self, masses: np.ndarray, M: int) -> float:
        return float(self.values(masses))

    def leave_one_out(self, cells: np.ndarray) -> np.ndarray:
        g = self.g.values[cells]
        M = cells.shape[-1] - 1
        return (np.sum(g, axis=-1, keepdims=True) - g) / M

    def describe(self) -> Dict:
        return {"kind": self.kind, "g": [float(v) for v in self.g.values]}


class ConvolutionTerm:
    """F(m) = weight * sum_ij K(x_i - x_j) m_i m_j h^2 for an even kernel sampled at lags k h."""

    kind = "convolution"

    def __init__(self, grid: TorusGrid, kernel_lags, weight: float):
        kernel = np.asarray(kernel_lags, dtype=float)
        if kernel.shape != (grid.n_cells,):
            raise ValueError(f"kernel must have {grid.n_cells} lag samples")
        if np.max(np.abs(kernel - np.roll(kernel[::-1], 1))) > 1e-12:
            raise ValueError("convolution kernel must be even")
        self.grid = grid
        self.kernel = _readonly(kernel)
        self.weight = float(weight)
        # F = weight * sum_k coeffs_k |fft(masses)_k|^2
        self.coeffs = _readonly(np.real(np.fft.fft(kernel)) / grid.n_cells)

    @classmethod
    def from_function(cls, grid: TorusGrid, fn: Callable[[np.ndarray], np.ndarray],
                      weight: float) -> "ConvolutionTerm":
        lags = grid.lags
        sym = 0.5 * (fn(lags) + fn(np.mod(-lags, 1.0)))
        return cls(grid, sym, weight)

    def convolve(self, masses: np.ndarray) -> np.ndarray:
        """(K * m)_i = sum_j K(x_i - x_j) m_j h."""
        return np.real(np.fft.ifft(np.fft.fft(masses, axis=-1) * np.fft.fft(self.kernel), axis=-1))

    def values(self, masses: np.ndarray) -> np.ndarray:
        spectrum = np.abs(np.fft.fft(masses, axis=-1)) ** 2
        return self.weight * spectrum @ self.coeffs

    def derivative(self, masses: np.ndarray) -> np.ndarray:
        return 2.0 * self.weight * self.convolve(masses)

    def lower_bound(self) -> float:
        wc = self.weight * self.coeffs
        return float(wc[0] + np.sum(np.minimum(0.0, wc[1:])))

    def shape(self) -> str:
        wc = self.weight * self.coeffs[1:]
        scale = max(1.0, float(np.max(np.abs(self.weight * self.coeffs))))
        tol = 1e-12 * scale
        if np.all(np.abs(wc) <= tol):
            return "constant"
        if np.all(wc >= -tol):
            return "point"
        if np.all(wc <= tol):
            return "uniform"
        return "mixed"

    def is_convex(self) -> bool:
        return self.shape() in ("constant", "point")

    def expected_empirical(self, masses: np.ndarray, M: int) -> float:
        return float(self.weight * self.kernel[0] / M + (1.0 - 1.0 / M) * self.values(masses))

    def leave_one_out(self, cells: np.ndarray) -> np.ndarray:
        n = self.grid.n_cells
        pair = self.kernel[np.mod(cells[..., :, None] - cells[..., None, :], n)]
        rows = np.sum(pair, axis=-1)
        total = np.sum(rows, axis=-1, keepdims=True)
        M = cells.shape[-1] - 1
        return self.weight * (total - 2.0 * rows + self.kernel[0]) / M ** 2

    def describe(self) -> Dict:
        return {"kind": self.kind, "weight": self.weight, "kernel": [float(v) for v in self.kernel]}


CouplingTerm = Union[LinearTerm, ConvolutionTerm]


@dataclass(frozen=True, eq=False)
class CouplingFunctional:
    """Sum of coupling terms plus an offset keeping F >= 0."""

    grid: TorusGrid
    terms: Tuple[CouplingTerm, ...]
    offset: float = 0.0
    heuristic_starts: int = field(default=8, repr=False)

    def __post_init__(self):
        for term in self.terms:
            self.grid.require_same(term.grid)
        floor = self.lower_bound()
        if floor + self.offset < -1e-12:
            raise ValueError(f"offset {self.offset} leaves F below zero (lower bound {floor})")

    @classmethod
    def build(cls, grid: TorusGrid, terms: Sequence[CouplingTerm],
              offset: Optional[float] = None) -> "CouplingFunctional":
        """Use the smallest offset making F >= 0 when offset is None."""
        terms = tuple(terms)
        if offset is None:
            offset = max(0.0, -sum(t.lower_bound() for t in terms))
        return cls(grid, terms, float(offset))

    @classmethod
    def linear(cls, g: GridField, offset: Optional[float] = None) -> "CouplingFunctional":
        return cls.build(g.grid, [LinearTerm(g)], offset)

    @classmethod
    def convolution(cls, grid: TorusGrid, kernel: Callable[[np.ndarray], np.ndarray], weight: float,
                    offset: Optional[float] = None) -> "CouplingFunctional":
        return cls.build(grid, [ConvolutionTerm.from_function(grid, kernel, weight)], offset)

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> "CouplingFunctional":
        return cls(grid, (), float(value))

    def __add__(self, other: "CouplingFunctional") -> "CouplingFunctional":
        self.grid.require_same(other.grid)
        return CouplingFunctional(self.grid, self.terms + other.terms, self.offset + other.offset)

    def lower_bound(self) -> float:
        return float(sum(t.lower_bound() for t in self.terms))

    def value_batch(self, masses: np.ndarray) -> np.ndarray:
        """F for each row of a (..., n_cells) array of cell masses."""
        out = np.full(np.shape(masses)[:-1], self.offset, dtype=float)
        for term in self.terms:
            out = out + term.values(masses)
        return out

    def value(self, m: ProbabilityGrid) -> float:
        self.grid.require_same(m.grid)
        return float(self.value_batch(m.masses))

    def derivative(self, m: ProbabilityGrid) -> np.ndarray:
        """Flat derivative dF/dm(m, x_i) for every node."""
        self.grid.require_same(m.grid)
        out = np.zeros(self.grid.n_cells)
        for term in self.terms:
            out += term.derivative(m.masses)
        return out

    def flat_derivative(self, m: ProbabilityGrid, y: int) -> float:
        return float(self.derivative(m)[int(y) % self.grid.n_cells])

    def is_constant(self) -> bool:
        return all(t.shape() == "constant" for t in self.terms)

    def is_convex(self) -> bool:
        return all(t.is_convex() for t in self.terms)

    def expected_empirical(self, m: ProbabilityGrid, M: int) -> float:
        """E F(empirical measure of M iid draws from m), exact per term."""
        if M < 1:
            raise ValueError("need at least one sample")
        return self.offset + sum(t.expected_empirical(m.masses, M) for t in self.terms)

    def leave_one_out(self, cells: np.ndarray) -> np.ndarray:
        """F of the empirical measure of all other players, for every player.

        ``cells`` has shape (..., N) with binned cell indices.
        """
        out = np.full(np.shape(cells), self.offset, dtype=float)
        for term in self.terms:
            out = out + term.leave_one_out(cells)
        return out

    def maximum(self, n_jobs: int = 1, seed: int = 0) -> FunctionalMaximum:
        shapes = {t.shape() for t in self.terms} - {"constant"}
        uniform = ProbabilityGrid.uniform(self.grid)
        if not shapes or shapes == {"uniform"}:
            return FunctionalMaximum(self.value(uniform), uniform, True, "uniform")
        if shapes == {"point"}:
            g = sum((t.g.values for t in self.terms if isinstance(t, LinearTerm)), np.zeros(self.grid.n_cells))
            peak = ProbabilityGrid.point_mass(self.grid, int(np.argmax(g)))
            return FunctionalMaximum(self.value(peak), peak, True, "point-mass")
        best = self._ascent_multistart(n_jobs, seed)
        logger.warning(f"max F is heuristic for mixed-sign coupling: {best.value:.6g}")
        return best

    def _ascent_multistart(self, n_jobs: int, seed: int) -> FunctionalMaximum:
        n = self.grid.n_cells
        rng = np.random.default_rng(seed)
        starts = [np.full(n, 1.0 / n)]
        for idx in np.linspace(0, n - 1, max(1, self.heuristic_starts // 2)).astype(int):
            start = np.full(n, 0.5 / n)
            start[idx] += 0.5
            starts.append(start)
        while len(starts) < self.heuristic_starts + 1:
            starts.append(rng.dirichlet(np.ones(n)))
        results = Parallel(n_jobs=n_jobs)(delayed(self._ascend)(s) for s in starts)
        value, masses = max(results, key=lambda r: r[0])
        return FunctionalMaximum(value, ProbabilityGrid.from_weights(self.grid, masses), False, "heuristic")

    def _ascend(self, masses: np.ndarray, steps: int = 2000) -> Tuple[float, np.ndarray]:
        scale = sum(2.0 * abs(t.weight) * np.max(np.abs(t.kernel)) for t in self.terms
                    if isinstance(t, ConvolutionTerm)) + 1.0
        eta = 0.5 / scale
        for _ in range(steps):
            grad = np.zeros_like(masses)
            for term in self.terms:
                grad += term.derivative(masses)
            updated = project_to_simplex(masses + eta * grad)
            if np.max(np.abs(updated - masses)) < 1e-14:
                masses = updated
                break
            masses = updated
        return float(self.value_batch(masses)), masses

    def describe(self) -> Dict:
        return {"offset": self.offset, "terms": [t.describe() for t in self.terms]}


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {p >= 0, sum p = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = ind[u - css / ind > 0][-1]
    return np.maximum(v - css[rho - 1] / rho, 0.0)


def eval_F(F: CouplingFunctional, m: ProbabilityGrid) -> float:
    return F.value(m)


def eval_flat_derivative(F: CouplingFunctional, m: ProbabilityGrid, y: int) -> float:
    return F.flat_derivative(m, y)


def max_F(F: CouplingFunctional, n_jobs: int = 1) -> FunctionalMaximum:
    return F.maximum(n_jobs=n_jobs)
