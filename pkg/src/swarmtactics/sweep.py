"""Minimum-defender sweep.

Optimizes every (defender count, motion family) cell against one fixed
engagement seed and reduces the grid to a per-count contour: the best
optimized STP any family start reached with that many defenders. The
smallest count whose contour clears a threshold is the minimum team size
for that threshold; no such count is a valid answer, not an error.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cnn import CnnModel
from .datasets import ScalerStats
from .engagement import EngagementConfig, MotionType, engagement_motion_plan
from .optimize import (
    InfeasibleGuessError,
    OperationalArea,
    OptimizationProblem,
    SolverSettings,
    evaluate_initial_trajectories,
    optimize,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepSpec:
    """Grid description plus the shared optimization knobs.

    One engagement seed drives every cell, so columns differ only in team
    size and rows only in the family of the starting trajectory.
    """

    defender_counts: tuple[int, ...]
    engagement_seed: int
    area: OperationalArea
    motions: tuple[MotionType, ...] = tuple(MotionType)
    d_min: float = 0.0
    n_rows: int | None = None
    include_ramp: bool = True
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self) -> None:
        if not self.defender_counts:
            raise ValueError("defender_counts must not be empty")
        if any(n < 1 for n in self.defender_counts):
            raise ValueError("defender counts must be >= 1")
        if len(set(self.defender_counts)) != len(self.defender_counts):
            raise ValueError("defender counts must be unique")
        if not self.motions:
            raise ValueError("motions must not be empty")

    @property
    def n_cells(self) -> int:
        return len(self.defender_counts) * len(self.motions)


@dataclass
class CellResult:
    n_defenders: int
    motion: MotionType
    ramp_start: bool | None      # start variant that was optimized
    stp_initial: float           # NaN when no start could be evaluated
    stp_optimized: float         # NaN on failure
    max_violation: float
    n_iterations: int
    n_stack_evaluations: int
    wall_time_s: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    engagement_seed: int
    defender_counts: tuple[int, ...]
    motions: tuple[MotionType, ...]
    cells: list[CellResult]      # count-major, motion-minor
    wall_time_s: float

    def cell(self, n_defenders: int, motion: MotionType) -> CellResult:
        i = self.defender_counts.index(n_defenders)
        j = self.motions.index(motion)
        return self.cells[i * len(self.motions) + j]

    def stp_grid(self) -> np.ndarray:
        """Optimized STP as [counts, motions]; failed cells are NaN."""
        grid = np.array([c.stp_optimized for c in self.cells])
        return grid.reshape(len(self.defender_counts), len(self.motions))

    def contour(self) -> np.ndarray:
        """Best optimized STP per defender count (max over motion starts).

        A count whose every cell failed maps to NaN: it contributes no
        evidence either way.
        """
        grid = self.stp_grid()
        valid = ~np.isnan(grid)
        out = np.full(grid.shape[0], np.nan)
        for i in range(grid.shape[0]):
            if valid[i].any():
                out[i] = grid[i, valid[i]].max()
        return out

    def min_defenders(self, threshold: float) -> int | None:
        """Smallest defender count whose contour reaches ``threshold``.

        Counts are scanned in ascending numeric order regardless of grid
        order. None means no swept count reached the threshold.
        """
        contour = self.contour()
        best: int | None = None
        for count, value in zip(self.defender_counts, contour):
            if not math.isnan(value) and value >= threshold:
                if best is None or count < best:
                    best = count
        return best


def run_sweep(model: CnnModel, scaler: ScalerStats,
              base_config: EngagementConfig, spec: SweepSpec) -> SweepResult:
    """Optimize every grid cell; failures are recorded, never raised.

    Each cell scores the cruise and (optionally) ramp start of its motion
    family, optimizes from the best feasible one (best by STP when neither
    is feasible, letting the optimizer report the infeasibility), and keeps
    whatever the best feasible iterate achieved.
    """
    t_start = time.perf_counter()
    cells: list[CellResult] = []
    for count in spec.defender_counts:
        cfg = replace(base_config, n_defenders=count,
                      seed=spec.engagement_seed)
        problem = OptimizationProblem(
            model=model, scaler=scaler, config=cfg, area=spec.area,
            n_rows=spec.n_rows, d_min=spec.d_min, settings=spec.settings)
        for motion in spec.motions:
            cells.append(_run_cell(problem, cfg, motion, spec))
            c = cells[-1]
            logger.info("cell nd=%d motion=%s: %s", count, motion.name,
                        f"{c.stp_initial:.1f} -> {c.stp_optimized:.1f}"
                        if c.ok else f"failed ({c.error})")
    return SweepResult(spec.engagement_seed, spec.defender_counts,
                       spec.motions, cells,
                       time.perf_counter() - t_start)


def _run_cell(problem: OptimizationProblem, cfg: EngagementConfig,
              motion: MotionType, spec: SweepSpec) -> CellResult:
    t0 = time.perf_counter()
    ramp: bool | None = None
    stp_initial = math.nan
    evals = 0
    try:
        scores = evaluate_initial_trajectories(
            problem, motions=[motion], include_ramp=spec.include_ramp)
        evals = len(scores)
        # feasible starts first, then higher STP
        scores.sort(key=lambda s: (not s.feasible, -s.stp))
        ramp = scores[0].ramp_to_max
        stp_initial = scores[0].stp
        plan = engagement_motion_plan(cfg, motion, ramp_to_max=ramp)
        result = optimize(problem, plan)
    except (InfeasibleGuessError, RuntimeError) as exc:
        return CellResult(cfg.n_defenders, motion, ramp, stp_initial,
                          math.nan, math.nan, 0, evals,
                          time.perf_counter() - t0, error=str(exc))
    return CellResult(cfg.n_defenders, motion, ramp, result.stp_initial,
                      result.stp_optimized,
                      result.constraints.max_violation,
                      len(result.iterations),
                      evals + result.n_stack_evaluations,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Emitters
# ---------------------------------------------------------------------------


def thresholds_table(result: SweepResult,
                     thresholds: Sequence[float]) -> list[tuple[float, int | None]]:
    """(threshold, minimum defender count) pairs, one per input threshold."""
    return [(float(t), result.min_defenders(t)) for t in thresholds]


def sweep_to_dict(result: SweepResult,
                  thresholds: Sequence[float] = ()) -> dict:
    contour = result.contour()
    out = {
        "engagement_seed": result.engagement_seed,
        "defender_counts": list(result.defender_counts),
        "motions": [m.name.lower() for m in result.motions],
        "wall_time_s": result.wall_time_s,
        "cells": [
            {
                "n_defenders": c.n_defenders,
                "motion": c.motion.name.lower(),
                "ramp_start": c.ramp_start,
                "stp_initial": _json_float(c.stp_initial),
                "stp_optimized": _json_float(c.stp_optimized),
                "max_violation": _json_float(c.max_violation),
                "n_iterations": c.n_iterations,
                "n_stack_evaluations": c.n_stack_evaluations,
                "wall_time_s": c.wall_time_s,
                "error": c.error,
            }
            for c in result.cells
        ],
        "contour": [_json_float(v) for v in contour],
    }
    if thresholds:
        out["min_defenders"] = [
            {"threshold": t, "n_defenders": n}
            for t, n in thresholds_table(result, thresholds)
        ]
    return out


def _json_float(v: float) -> float | None:
    return None if math.isnan(v) else float(v)


def write_sweep_json(result: SweepResult, path: str,
                     thresholds: Sequence[float] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sweep_to_dict(result, thresholds), fh, indent=2)
        fh.write("\n")


def write_sweep_csv(result: SweepResult, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_defenders", "motion", "ramp_start",
                         "stp_initial", "stp_optimized", "max_violation",
                         "n_iterations", "n_stack_evaluations",
                         "wall_time_s", "error"])
        for c in result.cells:
            writer.writerow([
                c.n_defenders, c.motion.name.lower(),
                "" if c.ramp_start is None else int(c.ramp_start),
                _csv_float(c.stp_initial), _csv_float(c.stp_optimized),
                _csv_float(c.max_violation), c.n_iterations,
                c.n_stack_evaluations, f"{c.wall_time_s:.6f}",
                c.error or "",
            ])


def _csv_float(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.6f}"
