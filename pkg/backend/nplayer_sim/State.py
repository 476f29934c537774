import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from backend.torus_core import A_MAX, GridDrift, ProbabilityGrid, TorusGrid, wasserstein1_masses

logger = logging.getLogger(__name__)

CONFORM = "conform"
SELFISH = "selfish"
LAZY = "lazy"
PLANNER = "planner"
CUSTOM = "custom"


@dataclass(frozen=True)
class TriggerParams:
    """Trigger strategy data: follow ``conform`` until theta, then ``punish`` forever."""

    T: float
    delta: float
    conform: GridDrift
    punish: GridDrift
    reference: ProbabilityGrid
    check_interval: float = 1.0

    def __post_init__(self):
        for name in ("T", "delta", "check_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        self.conform.grid.require_same(self.punish.grid)
        self.conform.grid.require_same(self.reference.grid)

    @property
    def grid(self) -> TorusGrid:
        return self.conform.grid


@dataclass(frozen=True)
class DeviationPolicy:
    kind: str
    drift: Optional[GridDrift] = None

    def __post_init__(self):
        if self.kind != CONFORM and self.drift is None:
            raise ValueError(f"deviation '{self.kind}' needs a drift")
        if self.drift is not None and self.drift.sup_norm > A_MAX:
            logger.warning(f"deviation '{self.kind}' drift exceeds the cap {A_MAX}")

    @property
    def is_conform(self) -> bool:
        return self.kind == CONFORM

    @classmethod
    def conform(cls) -> "DeviationPolicy":
        return cls(CONFORM)

    @classmethod
    def selfish(cls, alpha0: GridDrift) -> "DeviationPolicy":
        return cls(SELFISH, alpha0)

    @classmethod
    def lazy(cls, grid: TorusGrid) -> "DeviationPolicy":
        return cls(LAZY, GridDrift.zero(grid))

    @classmethod
    def planner(cls, alpha_tilde: GridDrift) -> "DeviationPolicy":
        return cls(PLANNER, alpha_tilde)

    @classmethod
    def custom(cls, drift: GridDrift) -> "DeviationPolicy":
        return cls(CUSTOM, drift)


@dataclass(frozen=True)
class PayoffEstimate:
    mean: float
    stderr: float
    n_runs: int
    horizon: float
    burn_in: float
    p_trigger: float

    @classmethod
    def from_samples(cls, samples: np.ndarray, horizon: float, burn_in: float, p_trigger: float) -> "PayoffEstimate":
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
        return cls(float(np.mean(samples)), stderr, int(n), float(horizon), float(burn_in), float(p_trigger))


@dataclass(frozen=True)
class SimulationSettings:
    N: int
    dt: float = 1e-3
    horizon: float = 2000.0
    burn_in: float = 200.0
    n_runs: int = 64
    seed: int = 0
    cost_stride: int = 10
    n_jobs: int = 1
    record_stride: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two players")
        if not 0.0 < self.dt <= 1e-2:
            raise ValueError(f"dt must lie in (0, 1e-2], got {self.dt}")
        if not 0.0 <= self.burn_in < self.horizon:
            raise ValueError("burn_in must lie in [0, horizon)")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


class NoiseStreams:
    """Independent standard normal streams, one per (run, player), drawn in blocks."""

    def __init__(self, seeds: List[np.random.SeedSequence], n_players: int, block: int = 1024):
        self.generators = [[np.random.default_rng(s) for s in run.spawn(n_players)] for run in seeds]
        self.block = block
        self._buffer = None
        self._cursor = block

    def next(self) -> np.ndarray:
        if self._cursor >= self.block:
            self._buffer = np.array([[g.standard_normal(self.block) for g in row] for row in self.generators])
            self._cursor = 0
        out = self._buffer[:, :, self._cursor]
        self._cursor += 1
        return out


@dataclass
class PathState:
    """Batch of runs; positions (R, N), integer occupation counts (R, N, n_cells), theta (R,)."""

    grid: TorusGrid
    positions: np.ndarray
    counts: np.ndarray
    theta: np.ndarray
    noise: NoiseStreams
    run_ids: np.ndarray
    steps: int = 0
    dt: float = 1e-3
    drift: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def t(self) -> float:
        return self.steps * self.dt

    @classmethod
    def start(cls, grid: TorusGrid, positions: np.ndarray, run_ids: np.ndarray, noise: NoiseStreams,
              dt: float) -> "PathState":
        R, N = positions.shape
        return cls(grid, positions, np.zeros((R, N, grid.n_cells), dtype=np.int64), np.full(R, np.inf),
                   noise, run_ids, 0, dt)

    def occupation_masses(self) -> np.ndarray:
        if self.steps == 0:
            raise ValueError("occupation is undefined before the first step")
        return self.counts / self.steps

    def occupation(self, run: int, player: int) -> ProbabilityGrid:
        return ProbabilityGrid.from_weights(self.grid, self.counts[run, player])

    def occupation_distance(self, reference: ProbabilityGrid) -> np.ndarray:
        """W1 between each player's occupation measure and ``reference``, shape (R, N)."""
        return wasserstein1_masses(self.occupation_masses(), reference.masses, self.grid.h)
