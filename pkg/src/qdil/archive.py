"""Measure-space grid archive with a soft acceptance threshold per cell.

Two layers share one grid: the optimization layer keeps only per-cell
acceptance thresholds (raised as an exponential moving average of accepted
fitness), while the result layer stores the best-ever elite per cell and is
the source of coverage, QD-score, restarts, and exports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ArchiveConfig:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    cells_per_dim: tuple[int, ...]
    alpha: float = 0.1
    threshold_floor: float = 0.0    # initial per-cell threshold
    qd_floor: float = 0.0           # offset subtracted from fitness in the QD-score

    def __post_init__(self) -> None:
        k = len(self.cells_per_dim)
        if not (len(self.lo) == len(self.hi) == k and k >= 1):
            raise ValueError("lo, hi, cells_per_dim must have equal nonzero length")
        if any(c < 1 for c in self.cells_per_dim):
            raise ValueError("cells_per_dim entries must be >= 1")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("each hi must exceed its lo")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")

    @property
    def k(self) -> int:
        return len(self.cells_per_dim)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_dim))


@dataclass(frozen=True)
class InsertOutcome:
    accepted: bool
    improvement: float
    cell: int
    newly_occupied: bool


@dataclass(frozen=True)
class ArchiveMetrics:
    qd_score: float
    coverage: float
    best: float        # NaN while the archive is empty
    average: float     # NaN while the archive is empty
    occupied: int


def _grid_geometry(cfg: ArchiveConfig):
    lo = np.asarray(cfg.lo, dtype=np.float64)
    hi = np.asarray(cfg.hi, dtype=np.float64)
    cells = np.asarray(cfg.cells_per_dim, dtype=np.int64)
    strides = np.ones(cfg.k, dtype=np.int64)
    strides[:-1] = np.cumprod(cells[::-1])[::-1][1:]   # row-major in declared dim order
    return lo, hi, cells, strides


def _cells_of(measures: np.ndarray, lo, hi, cells, strides) -> np.ndarray:
    m = np.atleast_2d(np.asarray(measures, dtype=np.float64))
    if m.shape[1] != lo.size:
        raise ValueError(f"measure has {m.shape[1]} dims, grid has {lo.size}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite measure")
    idx = np.floor((m - lo) / (hi - lo) * cells).astype(np.int64)
    np.clip(idx, 0, cells - 1, out=idx)                # boundary clamp
    return idx @ strides


@dataclass(frozen=True)
class ArchiveSnapshot:
    """Frozen occupancy of the result layer, taken at iteration start."""

    lo: np.ndarray
    hi: np.ndarray
    cells: np.ndarray
    strides: np.ndarray
    occupied: np.ndarray

    def cell_index(self, measures: np.ndarray) -> np.ndarray:
        return _cells_of(measures, self.lo, self.hi, self.cells, self.strides)

    def unoccupied(self, measures: np.ndarray) -> np.ndarray:
        """Boolean per row: does the measure land in a cell that was empty?"""
        return ~self.occupied[self.cell_index(measures)]


class GridArchive:
    """Soft-threshold grid archive over a box-bounded measure space."""

    def __init__(self, cfg: ArchiveConfig):
        self.cfg = cfg
        self._lo, self._hi, self._cells, self._strides = _grid_geometry(cfg)
        n = cfg.n_cells
        self.thresholds = np.full(n, cfg.threshold_floor, dtype=np.float64)
        self.opt_occupied = np.zeros(n, dtype=bool)
        self.result_occupied = np.zeros(n, dtype=bool)
        self.result_fitness = np.full(n, np.nan)
        self.result_measures = np.zeros((n, cfg.k))
        self._solutions: np.ndarray | None = None      # (n_cells, sol_dim), allocated lazily
        self.attempts = 0

    # -- geometry ---------------------------------------------------------

    def cell_multi_index(self, measure) -> tuple[int, ...]:
        m = np.asarray(measure, dtype=np.float64)
        idx = np.floor((m - self._lo) / (self._hi - self._lo) * self._cells).astype(np.int64)
        np.clip(idx, 0, self._cells - 1, out=idx)
        return tuple(int(i) for i in idx)

    def cell_index(self, measure) -> int:
        return int(_cells_of(measure, self._lo, self._hi, self._cells, self._strides)[0])

    def is_unoccupied(self, measure) -> bool:
        return not bool(self.result_occupied[self.cell_index(measure)])

    def snapshot(self) -> ArchiveSnapshot:
        return ArchiveSnapshot(self._lo, self._hi, self._cells, self._strides,
                               self.result_occupied.copy())

    # -- updates ----------------------------------------------------------

    def insert(self, solution, fitness: float, measure) -> InsertOutcome:
        fitness = float(fitness)
        if not np.isfinite(fitness):
            raise ValueError(f"non-finite fitness {fitness}")
        cell = self.cell_index(measure)
        self.attempts += 1

        accepted = fitness > self.thresholds[cell]
        improvement = fitness - self.thresholds[cell] if accepted else 0.0
        if accepted:
            a = self.cfg.alpha
            self.thresholds[cell] = (1.0 - a) * self.thresholds[cell] + a * fitness
            self.opt_occupied[cell] = True

        newly = not bool(self.result_occupied[cell])
        if newly or fitness > self.result_fitness[cell]:
            sol = np.asarray(solution, dtype=np.float64).ravel()
            if self._solutions is None:
                self._solutions = np.zeros((self.cfg.n_cells, sol.size))
            elif sol.size != self._solutions.shape[1]:
                raise ValueError(f"solution width {sol.size} != {self._solutions.shape[1]}")
            self._solutions[cell] = sol
            self.result_fitness[cell] = fitness
            self.result_measures[cell] = np.asarray(measure, dtype=np.float64)
            self.result_occupied[cell] = True
        else:
            newly = False
        return InsertOutcome(accepted=accepted, improvement=improvement, cell=cell,
                             newly_occupied=newly)

    # -- queries ----------------------------------------------------------

    def metrics(self) -> ArchiveMetrics:
        occ = self.result_occupied
        n_occ = int(occ.sum())
        if n_occ == 0:
            return ArchiveMetrics(0.0, 0.0, float("nan"), float("nan"), 0)
        f = self.result_fitness[occ]
        qd = float(np.maximum(f - self.cfg.qd_floor, 0.0).sum())
        return ArchiveMetrics(qd, n_occ / self.cfg.n_cells, float(f.max()), float(f.mean()), n_occ)

    def random_elite(self, rng: np.random.Generator) -> tuple[np.ndarray, float, np.ndarray]:
        cells = np.flatnonzero(self.result_occupied)
        if cells.size == 0:
            raise ValueError("archive is empty")
        c = int(cells[rng.integers(cells.size)])
        return self._solutions[c].copy(), float(self.result_fitness[c]), self.result_measures[c].copy()

    def elites(self):
        """Yield (cell, solution, fitness, measure) over the result layer."""
        for c in np.flatnonzero(self.result_occupied):
            yield int(c), self._solutions[c].copy(), float(self.result_fitness[c]), self.result_measures[c].copy()

    def heatmap_csv(self, fitness: np.ndarray | None = None) -> str:
        """2-D grids only: rows follow dim 0, columns dim 1, empty cells print NaN."""
        if self.cfg.k != 2:
            raise ValueError("heatmap export requires a 2-D measure space")
        values = self.result_fitness if fitness is None else fitness
        r, c = self.cfg.cells_per_dim
        lines = []
        for i in range(r):
            row = []
            for j in range(c):
                cell = i * c + j
                row.append(repr(float(values[cell])) if self.result_occupied[cell] else "NaN")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    # -- persistence ------------------------------------------------------

    def save(self, path: str) -> None:
        sols = self._solutions if self._solutions is not None else np.zeros((self.cfg.n_cells, 0))
        cfg_json = json.dumps({"lo": list(self.cfg.lo), "hi": list(self.cfg.hi),
                               "cells_per_dim": list(self.cfg.cells_per_dim),
                               "alpha": self.cfg.alpha,
                               "threshold_floor": self.cfg.threshold_floor,
                               "qd_floor": self.cfg.qd_floor})
        np.savez(path, cfg=np.frombuffer(cfg_json.encode(), dtype=np.uint8),
                 thresholds=self.thresholds, opt_occupied=self.opt_occupied,
                 result_occupied=self.result_occupied, result_fitness=self.result_fitness,
                 result_measures=self.result_measures, solutions=sols,
                 attempts=np.int64(self.attempts))

    @classmethod
    def load(cls, path: str) -> "GridArchive":
        with np.load(path) as z:
            raw = json.loads(bytes(z["cfg"]).decode())
            cfg = ArchiveConfig(lo=tuple(raw["lo"]), hi=tuple(raw["hi"]),
                                cells_per_dim=tuple(raw["cells_per_dim"]), alpha=raw["alpha"],
                                threshold_floor=raw["threshold_floor"], qd_floor=raw["qd_floor"])
            arch = cls(cfg)
            arch.thresholds = z["thresholds"].copy()
            arch.opt_occupied = z["opt_occupied"].copy()
            arch.result_occupied = z["result_occupied"].copy()
            arch.result_fitness = z["result_fitness"].copy()
            arch.result_measures = z["result_measures"].copy()
            sols = z["solutions"]
            arch._solutions = sols.copy() if sols.shape[1] > 0 else None
            arch.attempts = int(z["attempts"])
        return arch
