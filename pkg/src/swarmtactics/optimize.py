"""Constrained defender-trajectory optimization against the tactic classifier.

The objective is the sum of true predictions: simulate the adversary response
to a candidate defender trajectory under each of the four tactics, classify
each response, and sum the probability mass the classifier puts on the tactic
that actually generated it (scaled to percent, so the ceiling is 400). The
optimizer maximizes that sum subject to an operational area, speed and
acceleration caps, and pairwise separation.

Method: augmented Lagrangian outer loop (Rockafellar's smooth inequality
form) around a steepest-descent inner loop whose merit gradient comes from
central finite differences; every probe and line-search candidate is pushed
through the batch simulator and classifier in one vectorized pass. The best
feasible iterate ever seen is returned, so the reported objective never falls
below a feasible starting point's.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cnn import CnnModel, predict_proba
from .datasets import ScalerStats, features_from_positions
from .engagement import (
    EngagementConfig,
    MotionPlan,
    MotionType,
    Tactic,
    engagement_motion_plan,
    init_engagement,
    simulate_explicit_batch,
)

logger = logging.getLogger(__name__)

__all__ = [
    "OperationalArea",
    "SolverSettings",
    "OptimizationProblem",
    "ConstraintReport",
    "OptimizationResult",
    "InfeasibleGuessError",
    "InitialTrajectoryScore",
    "prediction_stack",
    "sum_true_predictions",
    "initial_guess",
    "constraint_eval",
    "optimize",
    "evaluate_initial_trajectories",
]

_FAMILIES = ("area", "v_min", "v_max", "a_max", "separation")


class InfeasibleGuessError(ValueError):
    """Initial trajectory violates constraints beyond tolerance."""

    def __init__(self, family_violations: dict[str, float], tol: float):
        self.family_violations = family_violations
        bad = {k: v for k, v in family_violations.items() if v > tol}
        detail = ", ".join(f"{k}: {v:.4g}" for k, v in sorted(bad.items()))
        super().__init__(
            f"initial trajectory is infeasible (tolerance {tol:g}); "
            f"violated constraints: {detail}. Shrink the plan speeds, enlarge "
            f"the operational area, or lower the separation floor.")


@dataclass(frozen=True)
class OperationalArea:
    """Convex polygon, counterclockwise vertices. Inside is feasible."""

    vertices: np.ndarray  # [V, 2]

    def __post_init__(self) -> None:
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("need at least three (x, y) vertices")
        nxt = np.roll(v, -1, axis=0)
        nxt2 = np.roll(v, -2, axis=0)
        cross = ((nxt[:, 0] - v[:, 0]) * (nxt2[:, 1] - nxt[:, 1])
                 - (nxt[:, 1] - v[:, 1]) * (nxt2[:, 0] - nxt[:, 0]))
        if np.any(cross <= 0.0):
            raise ValueError("vertices must be strictly convex in "
                             "counterclockwise order")
        object.__setattr__(self, "vertices", v)
        edges = nxt - v
        lengths = np.linalg.norm(edges, axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError("degenerate polygon edge")
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / lengths[:, None]
        object.__setattr__(self, "_normals", normals)
        object.__setattr__(self, "_offsets", np.sum(normals * v, axis=1))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """max over edge half-planes; <= 0 inside, > 0 outside ([..., 2] in)."""
        points = np.asarray(points, dtype=np.float64)
        margins = points @ self._normals.T - self._offsets
        return margins.max(axis=-1)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.signed_distance(points) <= tol


@dataclass(frozen=True)
class SolverSettings:
    """Augmented-Lagrangian and line-search knobs."""

    max_iterations: int = 60         # accepted descent steps, total
    inner_steps: int = 6             # descent steps per multiplier update
    constraint_tolerance: float = 1e-3
    fd_step: float = 0.25            # central-difference probe size
    initial_step: float = 2.0        # first line-search step, position units
    backtracks: int = 10             # candidate step lengths per search
    armijo_c: float = 1e-4
    initial_penalty: float = 10.0
    penalty_growth: float = 5.0
    violation_decrease: float = 0.25  # required per outer round before growing
    gradient_floor: float = 1e-10
    merit_floor: float = 1e-9        # minimum merit decrease to keep going

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.inner_steps < 1 or self.backtracks < 1:
            raise ValueError("inner_steps and backtracks must be >= 1")
        if self.fd_step <= 0 or self.initial_step <= 0:
            raise ValueError("fd_step and initial_step must be positive")
        if self.constraint_tolerance < 0:
            raise ValueError("constraint_tolerance must be >= 0")
        if self.initial_penalty <= 0 or self.penalty_growth <= 1:
            raise ValueError("penalty settings out of range")


@dataclass
class OptimizationProblem:
    """Everything a trajectory optimization needs.

    The engagement seed inside ``config`` fixes the adversary placement; the
    defender trajectory is the decision variable (row 0 stays fixed). Speed,
    acceleration, and separation limits default from the config's defender
    group when left None.
    """

    model: CnnModel
    scaler: ScalerStats
    config: EngagementConfig
    area: OperationalArea
    n_rows: int | None = None       # defaults to model window + 1
    v_min: float | None = None
    v_max: float | None = None
    a_max: float | None = None
    d_min: float = 0.0
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self) -> None:
        if self.n_rows is None:
            self.n_rows = self.model.spec.window + 1
        if self.v_min is None:
            self.v_min = self.config.defender_v_min
        if self.v_max is None:
            self.v_max = self.config.defender_v_max
        if self.a_max is None:
            self.a_max = self.config.defender_a_max
        if self.n_rows < 3:
            raise ValueError("need at least 3 trajectory rows")
        if self.n_rows - 1 < self.model.spec.window:
            raise ValueError(
                f"{self.n_rows} rows yield {self.n_rows - 1} feature steps but "
                f"the model window is {self.model.spec.window}")
        if self.d_min < 0:
            raise ValueError("d_min must be >= 0")
        if self.model.spec.features != 4 * self.config.n_adversaries:
            raise ValueError(
                f"model expects {self.model.spec.features} features but the "
                f"scenario produces {4 * self.config.n_adversaries}")


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def _stacks_for_batch(model: CnnModel, scaler: ScalerStats,
                      trajectories: np.ndarray,
                      config: EngagementConfig) -> np.ndarray:
    """Prediction stacks [B, 4, 4] for a batch of defender trajectories.

    Row k of a stack is the classifier output on the simulated response of
    tactic k. All batch elements replay the same engagement seed.
    """
    b, n_rows, _ = trajectories.shape
    window = model.spec.window
    if n_rows - 1 < window:
        raise ValueError(f"trajectory has {n_rows - 1} feature steps; model "
                         f"window is {window}")
    out = np.empty((b, len(Tactic), model.spec.classes))
    for tactic in Tactic:
        responses = simulate_explicit_batch(config, trajectories, tactic)
        feats = features_from_positions(responses, config.dt)[:, :window, :]
        out[:, int(tactic), :] = predict_proba(model, scaler.transform(feats))
    return out


def prediction_stack(model: CnnModel, scaler: ScalerStats,
                     trajectory: np.ndarray,
                     config: EngagementConfig) -> np.ndarray:
    """[4, 4] matrix: row k = class probabilities under tactic k's response."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 2:
        raise ValueError("trajectory must be [N_t, 2*N_D]")
    return _stacks_for_batch(model, scaler, trajectory[None], config)[0]


def sum_true_predictions(stack: np.ndarray) -> float:
    """100 * trace: percent of probability mass on the generating tactics."""
    stack = np.asarray(stack)
    if stack.shape[0] != stack.shape[1]:
        raise ValueError("prediction stack must be square")
    return float(100.0 * np.trace(stack))


# ---------------------------------------------------------------------------
# Initial guesses
# ---------------------------------------------------------------------------


def initial_guess(config: EngagementConfig, plan: MotionPlan,
                  n_rows: int) -> np.ndarray:
    """Open-loop defender trajectory [n_rows, 2*N_D] for a motion plan.

    Row 0 is the engagement's defender placement. Cruise plans move at
    constant per-defender speed; ramp plans accelerate from rest at the
    config's accel cap until the speed cap binds, mirroring the simulator's
    integration (position advances with the pre-update velocity).
    """
    if plan.n_defenders != config.n_defenders:
        raise ValueError("plan sized for a different defender count")
    state = init_engagement(config, plan)
    dirs = np.stack([np.cos(plan.headings), np.sin(plan.headings)], axis=1)
    out = np.empty((n_rows, 2 * config.n_defenders))
    pos = state.defender_pos.copy()
    out[0] = pos.reshape(-1)
    for t in range(n_rows - 1):
        if plan.ramp_to_max:
            speed = min(config.defender_v_max,
                        t * config.dt * config.defender_a_max)
            vel = speed * dirs
        else:
            vel = plan.speeds[:, None] * dirs
        pos = pos + config.dt * vel
        out[t + 1] = pos.reshape(-1)
    return out


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


@dataclass
class ConstraintReport:
    """Signed constraint values g (feasible iff g <= 0), grouped by family."""

    values: np.ndarray                  # [C]
    families: dict[str, slice]

    @property
    def max_violation(self) -> float:
        return float(np.maximum(self.values, 0.0).max()) if self.values.size else 0.0

    def family_max(self) -> dict[str, float]:
        return {name: float(np.maximum(self.values[sl], 0.0).max())
                if self.values[sl].size else 0.0
                for name, sl in self.families.items()}

    def feasible(self, tol: float) -> bool:
        return self.max_violation <= tol


def _constraints_batch(trajs: np.ndarray, problem: OptimizationProblem):
    """Constraint values [B, C] plus the family slices.

    Families: area membership on rows 0..N_t-2, speed floor/cap on derived
    velocities, accel cap on derived accelerations, pairwise separation on
    every row.
    """
    cfg = problem.config
    b, n_rows, _ = trajs.shape
    n_d = cfg.n_defenders
    pts = trajs.reshape(b, n_rows, n_d, 2)
    vel = np.diff(pts, axis=1) / cfg.dt              # [B, N_t-1, N_D, 2]
    acc = np.diff(vel, axis=1) / cfg.dt              # [B, N_t-2, N_D, 2]
    speed = np.linalg.norm(vel, axis=-1)
    accel = np.linalg.norm(acc, axis=-1)

    blocks: list[np.ndarray] = []
    families: dict[str, slice] = {}
    at = 0

    def push(name: str, block: np.ndarray) -> None:
        nonlocal at
        flat = block.reshape(b, -1)
        blocks.append(flat)
        families[name] = slice(at, at + flat.shape[1])
        at += flat.shape[1]

    push("area", problem.area.signed_distance(pts[:, :-1]))
    push("v_min", problem.v_min - speed)
    push("v_max", speed - problem.v_max)
    push("a_max", accel - problem.a_max)
    iu, ju = np.triu_indices(n_d, k=1)
    if iu.size:
        gaps = np.linalg.norm(pts[:, :, iu, :] - pts[:, :, ju, :], axis=-1)
        push("separation", problem.d_min - gaps)
    else:
        push("separation", np.zeros((b, n_rows, 0)))
    return np.concatenate(blocks, axis=1), families


def constraint_eval(trajectory: np.ndarray,
                    problem: OptimizationProblem) -> ConstraintReport:
    trajectory = np.asarray(trajectory, dtype=np.float64)
    values, families = _constraints_batch(trajectory[None], problem)
    return ConstraintReport(values=values[0], families=families)


# ---------------------------------------------------------------------------
# Augmented Lagrangian solver
# ---------------------------------------------------------------------------


def _penalty(g: np.ndarray, lam: np.ndarray, mu: float) -> np.ndarray:
    """Rockafellar inequality term, summed over constraints (batch-safe)."""
    shifted = np.maximum(0.0, lam + mu * g)
    return (shifted * shifted - lam * lam).sum(axis=-1) / (2.0 * mu)


@dataclass
class IterationRecord:
    iteration: int
    stp: float
    max_violation: float
    merit: float
    step_length: float
    penalty: float


@dataclass
class OptimizationResult:
    trajectory: np.ndarray
    stp_initial: float
    stp_optimized: float
    stack_initial: np.ndarray
    stack_final: np.ndarray
    constraints: ConstraintReport
    iterations: list[IterationRecord]
    n_stack_evaluations: int
    wall_time_s: float

    @property
    def per_tactic_true(self) -> np.ndarray:
        return np.diag(self.stack_final) * 100.0


def _path_length(traj: np.ndarray) -> float:
    n_d = traj.shape[1] // 2
    pts = traj.reshape(traj.shape[0], n_d, 2)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=-1).sum())


def optimize(problem: OptimizationProblem,
             start: np.ndarray | MotionPlan) -> OptimizationResult:
    """Maximize the sum of true predictions from a feasible start.

    ``start`` is a [n_rows, 2*N_D] trajectory or a motion plan expanded via
    :func:`initial_guess`. Row 0 is held fixed. Raises
    :class:`InfeasibleGuessError` when the start violates constraints beyond
    tolerance. With ``settings.max_iterations = 0`` the start is evaluated
    and returned unchanged.
    """
    t_begin = time.perf_counter()
    cfg = problem.config
    st = problem.settings
    if isinstance(start, MotionPlan):
        x = initial_guess(cfg, start, problem.n_rows)
    else:
        x = np.array(start, dtype=np.float64)
    if x.shape != (problem.n_rows, 2 * cfg.n_defenders):
        raise ValueError(f"start must be [{problem.n_rows}, "
                         f"{2 * cfg.n_defenders}], got {list(x.shape)}")

    report0 = constraint_eval(x, problem)
    if not report0.feasible(st.constraint_tolerance):
        raise InfeasibleGuessError(report0.family_max(), st.constraint_tolerance)

    evals = 0

    def stacks(batch: np.ndarray) -> np.ndarray:
        nonlocal evals
        evals += batch.shape[0]
        return _stacks_for_batch(problem.model, problem.scaler, batch, cfg)

    stack0 = stacks(x[None])[0]
    trace0 = float(np.trace(stack0))
    stp0 = 100.0 * trace0

    best_x = x.copy()
    best_trace = trace0
    best_viol = report0.max_violation
    best_len = _path_length(x)

    def consider(cand_x: np.ndarray, trace: float, viol: float) -> None:
        nonlocal best_x, best_trace, best_viol, best_len
        if viol > st.constraint_tolerance:
            return
        length = _path_length(cand_x)
        better = (trace > best_trace
                  or (trace == best_trace and viol < best_viol)
                  or (trace == best_trace and viol == best_viol
                      and length < best_len))
        if better:
            best_x, best_trace = cand_x.copy(), trace
            best_viol, best_len = viol, length

    history: list[IterationRecord] = []

    if st.max_iterations > 0:
        g_x, _ = _constraints_batch(x[None], problem)
        g_x = g_x[0]
        lam = np.zeros_like(g_x)
        mu = st.initial_penalty
        prev_outer_viol = report0.max_violation
        trace_x = trace0
        used = 0
        step_len = st.initial_step
        stall_rounds = 0
        while used < st.max_iterations and stall_rounds < 2:
            progressed = False
            for _ in range(st.inner_steps):
                if used >= st.max_iterations:
                    break
                merit_x = -trace_x + float(_penalty(g_x, lam, mu))
                grad = _merit_gradient(x, lam, mu, problem, stacks)
                gnorm = float(np.linalg.norm(grad))
                if gnorm < st.gradient_floor:
                    break
                # Normalized steepest descent: step lengths are position
                # units, directional derivative is -gnorm.
                direction = -grad / gnorm
                alphas = step_len * (2.0 ** -np.arange(st.backtracks))
                cand = np.repeat(x[None], st.backtracks, axis=0)
                cand[:, 1:, :] += alphas[:, None, None] * direction.reshape(
                    problem.n_rows - 1, -1)[None]
                cand_stacks = stacks(cand)
                cand_traces = np.trace(cand_stacks, axis1=1, axis2=2)
                cand_g, _ = _constraints_batch(cand, problem)
                cand_merits = -cand_traces + _penalty(cand_g, lam, mu)
                cand_viols = np.maximum(cand_g, 0.0).max(axis=1) if cand_g.size \
                    else np.zeros(cand.shape[0])
                # Every evaluated candidate is a legitimate iterate; harvest
                # the feasible ones even if the line search rejects them.
                for j in range(cand.shape[0]):
                    consider(cand[j], float(cand_traces[j]), float(cand_viols[j]))
                sufficient = merit_x - st.armijo_c * alphas * gnorm
                passing = np.nonzero(cand_merits <= sufficient)[0]
                if passing.size == 0:
                    break
                pick = int(passing[0])  # largest step that passes
                if merit_x - float(cand_merits[pick]) < st.merit_floor:
                    break
                x = cand[pick]
                g_x = cand_g[pick]
                trace_x = float(cand_traces[pick])
                viol_x = float(cand_viols[pick])
                used += 1
                progressed = True
                step_len = max(float(alphas[pick]) * 2.0, st.fd_step * 1e-3)
                history.append(IterationRecord(
                    iteration=used, stp=100.0 * trace_x,
                    max_violation=viol_x, merit=float(cand_merits[pick]),
                    step_length=float(alphas[pick]), penalty=mu))
            lam = np.maximum(0.0, lam + mu * g_x)
            outer_viol = float(np.maximum(g_x, 0.0).max()) if g_x.size else 0.0
            if outer_viol > st.violation_decrease * prev_outer_viol and \
                    outer_viol > st.constraint_tolerance:
                mu *= st.penalty_growth
            prev_outer_viol = outer_viol
            # A stalled round reshapes the merit via the multiplier update
            # and retries once before giving up.
            stall_rounds = 0 if progressed else stall_rounds + 1
            if not progressed:
                step_len = st.initial_step

    stack_best = stacks(best_x[None])[0]
    report_best = constraint_eval(best_x, problem)
    result = OptimizationResult(
        trajectory=best_x,
        stp_initial=stp0,
        stp_optimized=sum_true_predictions(stack_best),
        stack_initial=stack0,
        stack_final=stack_best,
        constraints=report_best,
        iterations=history,
        n_stack_evaluations=evals,
        wall_time_s=time.perf_counter() - t_begin,
    )
    logger.info("optimization: %d iterations, %.1f -> %.1f (violation %.2e, "
                "%.1fs)", len(history), stp0, result.stp_optimized,
                report_best.max_violation, result.wall_time_s)
    return result


def _merit_gradient(x: np.ndarray, lam: np.ndarray, mu: float,
                    problem: OptimizationProblem, stacks) -> np.ndarray:
    """Central-difference gradient of the merit over the free rows (1..end).

    Both probe directions for every coordinate run as one simulator/classifier
    batch.
    """
    h = problem.settings.fd_step
    n_rows = problem.n_rows
    free = (n_rows - 1) * x.shape[1]
    probes = np.repeat(x[None], 2 * free, axis=0)
    flat_plus = probes[:free].reshape(free, -1)
    flat_minus = probes[free:].reshape(free, -1)
    offset = x.shape[1]  # skip fixed row 0
    idx = np.arange(free)
    flat_plus[idx, offset + idx] += h
    flat_minus[idx, offset + idx] -= h
    traces = np.trace(stacks(probes), axis1=1, axis2=2)
    g_vals, _ = _constraints_batch(probes, problem)
    merits = -traces + _penalty(g_vals, lam, mu)
    return (merits[:free] - merits[free:]) / (2.0 * h)


# ---------------------------------------------------------------------------
# Initial-trajectory ranking
# ---------------------------------------------------------------------------


@dataclass
class InitialTrajectoryScore:
    motion: MotionType
    ramp_to_max: bool
    stp: float
    stack: np.ndarray
    feasible: bool
    max_violation: float


def evaluate_initial_trajectories(
        problem: OptimizationProblem,
        motions: Sequence[MotionType] = tuple(MotionType),
        include_ramp: bool = True) -> list[InitialTrajectoryScore]:
    """Score the open-loop guesses for each motion family, best first.

    Each plan is drawn from the problem's engagement seed, so the comparison
    is like-for-like across families.
    """
    scores = []
    ramp_flags = (False, True) if include_ramp else (False,)
    for motion in motions:
        for ramp in ramp_flags:
            plan = engagement_motion_plan(problem.config, motion,
                                          ramp_to_max=ramp)
            traj = initial_guess(problem.config, plan, problem.n_rows)
            stack = prediction_stack(problem.model, problem.scaler, traj,
                                     problem.config)
            report = constraint_eval(traj, problem)
            scores.append(InitialTrajectoryScore(
                motion=motion, ramp_to_max=ramp,
                stp=sum_true_predictions(stack), stack=stack,
                feasible=report.feasible(problem.settings.constraint_tolerance),
                max_violation=report.max_violation))
    scores.sort(key=lambda s: s.stp, reverse=True)
    return scores
