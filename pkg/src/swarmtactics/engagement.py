"""Two-dimensional swarm engagement simulator.

A defender group moves through an arena while an adversary group pursues it
under one of four interception tactics. Dynamics are discrete double
integrators: velocity is advanced by the commanded acceleration, position is
advanced by the pre-update velocity, and speed is clipped to the group cap
after integration. Everything is deterministic given a seed; the batch code
paths produce bitwise-identical trajectories to the single-engagement path.

Coordinates are unitless. Headings are radians measured from the +x axis.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "Tactic",
    "MotionType",
    "EngagementConfig",
    "MotionPlan",
    "AgentState",
    "EngagementState",
    "StepResult",
    "TrajectoryMatrix",
    "SimulationResult",
    "generate_motion_plan",
    "engagement_motion_plan",
    "init_engagement",
    "assign_targets",
    "guidance_accel",
    "step",
    "simulate_engagement",
    "simulate_open_loop_batch",
    "simulate_explicit_batch",
    "derive_kinematics",
    "write_trajectory_csv",
]

# Transverse-velocity damping gain for the pursuit guidance law, in units of
# 1/time. Large enough to turn the velocity vector within a few steps at the
# default accel cap without dominating the drive term once aligned.
DAMPING_GAIN = 1.0

_EPS = 1e-12


class Tactic(enum.IntEnum):
    """Adversary interception tactics. Values are the class labels."""

    GREEDY = 0
    GREEDY_PLUS = 1
    AUCTION = 2
    AUCTION_PLUS = 3

    @property
    def lead_pursuit(self) -> bool:
        return self in (Tactic.GREEDY_PLUS, Tactic.AUCTION_PLUS)

    @property
    def auction(self) -> bool:
        return self in (Tactic.AUCTION, Tactic.AUCTION_PLUS)


TACTIC_NAMES = {
    Tactic.GREEDY: "greedy",
    Tactic.GREEDY_PLUS: "greedy+",
    Tactic.AUCTION: "auction",
    Tactic.AUCTION_PLUS: "auction+",
}


class MotionType(enum.IntEnum):
    """Defender motion families. Values are stable codes used in datasets."""

    STAR = 0
    SEMI = 1
    STRAIGHT = 2
    PERP_LEFT = 3
    PERP_RIGHT = 4


# Heading rule per motion type: (low_deg, high_deg) sampled uniformly, or a
# single fixed heading in degrees.
_HEADING_RULES: dict[MotionType, tuple[float, float]] = {
    MotionType.STAR: (0.0, 90.0),
    MotionType.SEMI: (-45.0, 135.0),
    MotionType.STRAIGHT: (45.0, 45.0),
    MotionType.PERP_LEFT: (135.0, 135.0),
    MotionType.PERP_RIGHT: (-45.0, -45.0),
}

MOTION_NAMES = {
    MotionType.STAR: "star",
    MotionType.SEMI: "semi",
    MotionType.STRAIGHT: "straight",
    MotionType.PERP_LEFT: "perp_left",
    MotionType.PERP_RIGHT: "perp_right",
}


def parse_motion(name: str) -> MotionType:
    key = name.strip().lower().replace("-", "_")
    for motion, label in MOTION_NAMES.items():
        if key == label or key == motion.name.lower():
            return motion
    raise ValueError(f"unknown motion type {name!r}; expected one of "
                     f"{sorted(MOTION_NAMES.values())}")


def parse_tactic(name: str) -> Tactic:
    key = name.strip().lower().replace("-", "_").replace("_plus", "+")
    for tactic, label in TACTIC_NAMES.items():
        if key == label or key == tactic.name.lower():
            return tactic
    raise ValueError(f"unknown tactic {name!r}; expected one of "
                     f"{sorted(TACTIC_NAMES.values())}")


# ---------------------------------------------------------------------------
# Configuration and state types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EngagementConfig:
    """Scenario parameters for one engagement.

    The defender group starts in a disk around a protected point at the
    origin; the adversary group starts in a disk ``separation`` away along
    ``threat_bearing``. ``seed`` drives every random draw of the engagement
    (initial placement and, via :func:`engagement_motion_plan`, the defender
    motion plan).
    """

    n_defenders: int = 10
    n_adversaries: int = 10
    dt: float = 1.0
    max_steps: int = 60
    defender_v_min: float = 0.0
    defender_v_max: float = 1.0
    defender_a_max: float = 0.5
    adversary_v_max: float = 2.0
    adversary_a_max: float = 0.5
    separation: float = 100.0
    threat_bearing_deg: float = 45.0
    defender_radius: float = 10.0
    adversary_radius: float = 10.0
    capture_radius: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_defenders < 1 or self.n_adversaries < 1:
            raise ValueError("both groups need at least one agent")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not (0.0 <= self.defender_v_min <= self.defender_v_max):
            raise ValueError("need 0 <= defender_v_min <= defender_v_max")
        if self.adversary_v_max <= 0.0:
            raise ValueError("adversary_v_max must be positive")
        if self.defender_a_max < 0.0 or self.adversary_a_max < 0.0:
            raise ValueError("acceleration caps must be >= 0")
        if self.defender_radius < 0.0 or self.adversary_radius < 0.0:
            raise ValueError("spawn radii must be >= 0")
        if self.capture_radius < 0.0:
            raise ValueError("capture_radius must be >= 0")
        if self.separation < 0.0:
            raise ValueError("separation must be >= 0")


@dataclass(frozen=True)
class MotionPlan:
    """Open-loop defender plan: a heading and cruise speed per defender.

    With ``ramp_to_max`` the group instead starts at rest and accelerates
    along its headings at the defender accel cap until the speed cap binds.
    """

    motion: MotionType
    headings: np.ndarray  # [N_D] radians
    speeds: np.ndarray    # [N_D]
    ramp_to_max: bool = False

    def __post_init__(self) -> None:
        headings = np.asarray(self.headings, dtype=np.float64)
        speeds = np.asarray(self.speeds, dtype=np.float64)
        if headings.ndim != 1 or speeds.shape != headings.shape:
            raise ValueError("headings and speeds must be 1-D and equal length")
        object.__setattr__(self, "headings", headings)
        object.__setattr__(self, "speeds", speeds)

    @property
    def n_defenders(self) -> int:
        return self.headings.shape[0]


@dataclass
class AgentState:
    position: np.ndarray  # [2]
    velocity: np.ndarray  # [2]


@dataclass
class EngagementState:
    """Positions and velocities of both groups at one time step."""

    defender_pos: np.ndarray   # [N_D, 2]
    defender_vel: np.ndarray   # [N_D, 2]
    adversary_pos: np.ndarray  # [N_A, 2]
    adversary_vel: np.ndarray  # [N_A, 2]


@dataclass
class StepResult:
    state: EngagementState
    adversary_accels: np.ndarray   # [N_A, 2] commanded before clipping
    defender_clipped: np.ndarray   # [N_D] bool, speed cap hit this step
    adversary_clipped: np.ndarray  # [N_A] bool
    captured: bool


@dataclass(frozen=True)
class TrajectoryMatrix:
    """Dense position history for one group: row t is [x0, y0, x1, y1, ...]."""

    data: np.ndarray  # [N_t, 2 * N]
    dt: float = 1.0

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] % 2 != 0 or data.shape[1] == 0:
            raise ValueError("trajectory must be [N_t, 2*N] with N >= 1")
        object.__setattr__(self, "data", data)

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_agents(self) -> int:
        return self.data.shape[1] // 2

    def positions(self, agent: int) -> np.ndarray:
        return self.data[:, 2 * agent: 2 * agent + 2]


@dataclass
class SimulationResult:
    """One simulated engagement.

    ``termination_step`` is the number of integration steps executed, so both
    trajectory matrices have ``termination_step + 1`` rows. The commanded
    acceleration and clip records are populated when the simulation is run
    with ``record_kinematics=True``; rows align with steps 0..N_t-2.
    """

    config: EngagementConfig
    tactic: Tactic
    defenders: TrajectoryMatrix
    adversaries: TrajectoryMatrix
    termination_step: int
    captured: bool
    defender_accels: np.ndarray | None = None   # [N_t-1, N_D, 2]
    adversary_accels: np.ndarray | None = None  # [N_t-1, N_A, 2]
    defender_clipped: np.ndarray | None = None  # [N_t-1, N_D] bool
    adversary_clipped: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Random draws
# ---------------------------------------------------------------------------


def _engagement_streams(seed: int) -> tuple[np.random.SeedSequence, ...]:
    # Child 0 places adversaries, child 1 places defenders, child 2 drives the
    # motion plan. Adversary placement is therefore invariant to the defender
    # count and plan, which keeps "same engagement, different defender group"
    # comparisons meaningful.
    return tuple(np.random.SeedSequence(seed).spawn(3))


def _sample_disk(rng: np.random.Generator, n: int, radius: float,
                 center: np.ndarray) -> np.ndarray:
    radii = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n)
    out = np.empty((n, 2), dtype=np.float64)
    out[:, 0] = center[0] + radii * np.cos(angles)
    out[:, 1] = center[1] + radii * np.sin(angles)
    return out


def generate_motion_plan(motion: MotionType, n_defenders: int,
                         v_min: float, v_max: float,
                         seed: int | np.random.SeedSequence,
                         ramp_to_max: bool = False) -> MotionPlan:
    """Draw per-defender headings and cruise speeds for a motion family.

    Star headings are uniform in [0, 90] degrees, semi headings uniform in
    [-45, 135] degrees; straight and the two perpendicular families use fixed
    headings (45, 135, -45 degrees). Speeds are uniform in [v_min, v_max].
    """
    if n_defenders < 1:
        raise ValueError("n_defenders must be >= 1")
    if not (0.0 <= v_min <= v_max):
        raise ValueError("need 0 <= v_min <= v_max")
    rng = np.random.default_rng(seed)
    low, high = _HEADING_RULES[MotionType(motion)]
    if low == high:
        headings_deg = np.full(n_defenders, low, dtype=np.float64)
    else:
        headings_deg = rng.uniform(low, high, size=n_defenders)
    speeds = rng.uniform(v_min, v_max, size=n_defenders)
    return MotionPlan(motion=MotionType(motion),
                      headings=np.deg2rad(headings_deg),
                      speeds=speeds, ramp_to_max=ramp_to_max)


def engagement_motion_plan(config: EngagementConfig, motion: MotionType,
                           ramp_to_max: bool = False) -> MotionPlan:
    """Motion plan drawn from the engagement seed's dedicated stream."""
    _, _, plan_ss = _engagement_streams(config.seed)
    return generate_motion_plan(motion, config.n_defenders,
                                config.defender_v_min, config.defender_v_max,
                                plan_ss, ramp_to_max=ramp_to_max)


def init_engagement(config: EngagementConfig,
                    plan: MotionPlan | None = None) -> EngagementState:
    """Initial state: both groups placed in their spawn disks, at rest unless
    a non-ramp plan supplies defender cruise velocities."""
    adv_ss, def_ss, _ = _engagement_streams(config.seed)
    bearing = math.radians(config.threat_bearing_deg)
    adv_center = np.array([config.separation * math.cos(bearing),
                           config.separation * math.sin(bearing)])
    adversary_pos = _sample_disk(np.random.default_rng(adv_ss),
                                 config.n_adversaries,
                                 config.adversary_radius, adv_center)
    defender_pos = _sample_disk(np.random.default_rng(def_ss),
                                config.n_defenders,
                                config.defender_radius, np.zeros(2))
    defender_vel = np.zeros_like(defender_pos)
    if plan is not None and not plan.ramp_to_max:
        defender_vel = _plan_velocities(plan)
    return EngagementState(defender_pos=defender_pos,
                           defender_vel=defender_vel,
                           adversary_pos=adversary_pos,
                           adversary_vel=np.zeros((config.n_adversaries, 2)))


def _plan_velocities(plan: MotionPlan) -> np.ndarray:
    out = np.empty((plan.n_defenders, 2), dtype=np.float64)
    out[:, 0] = plan.speeds * np.cos(plan.headings)
    out[:, 1] = plan.speeds * np.sin(plan.headings)
    return out


# ---------------------------------------------------------------------------
# Assignment and guidance
# ---------------------------------------------------------------------------


def _assign_batch(adv_pos: np.ndarray, def_pos: np.ndarray, tactic: Tactic,
                  active: np.ndarray | None = None) -> np.ndarray:
    """Target defender index per adversary, [B, N_A] int64.

    Greedy assigns each adversary its nearest defender (argmin, so ties go to
    the lowest index). Auction solves the rectangular min-cost one-to-one
    assignment on Euclidean distance over min(N_D, N_A) pairs; with more
    adversaries than defenders the unassigned surplus falls back to nearest.
    """
    dists = np.linalg.norm(adv_pos[:, :, None, :] - def_pos[:, None, :, :],
                           axis=-1)
    nearest = np.argmin(dists, axis=2)
    if not tactic.auction:
        return nearest
    out = nearest.copy()
    indices = range(adv_pos.shape[0]) if active is None else np.nonzero(active)[0]
    for b in indices:
        rows, cols = linear_sum_assignment(dists[b])
        out[b, rows] = cols
    return out


def assign_targets(adversary_pos: np.ndarray, defender_pos: np.ndarray,
                   tactic: Tactic) -> np.ndarray:
    """Single-engagement assignment; see :func:`_assign_batch`."""
    adversary_pos = np.asarray(adversary_pos, dtype=np.float64)
    defender_pos = np.asarray(defender_pos, dtype=np.float64)
    if adversary_pos.ndim != 2 or defender_pos.ndim != 2:
        raise ValueError("positions must be [N, 2] arrays")
    return _assign_batch(adversary_pos[None], defender_pos[None], tactic)[0]


def _intercept_time(rel: np.ndarray, tgt_vel: np.ndarray,
                    v_max: float) -> np.ndarray:
    """Smallest positive root of |rel + v_tgt * tau| = v_max * tau.

    Falls back to distance / v_max when no positive root exists (target
    fleeing faster than the pursuer can close).
    """
    a = np.sum(tgt_vel * tgt_vel, axis=-1) - v_max * v_max
    b = 2.0 * np.sum(rel * tgt_vel, axis=-1)
    c = np.sum(rel * rel, axis=-1)
    tau = np.sqrt(c) / v_max  # fallback
    lin = (np.abs(a) <= _EPS) & (np.abs(b) > _EPS)
    tau_lin = -c / np.where(np.abs(b) > _EPS, b, 1.0)
    tau = np.where(lin & (tau_lin > 0.0), tau_lin, tau)
    quad = np.abs(a) > _EPS
    disc = b * b - 4.0 * a * c
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    denom = 2.0 * np.where(quad, a, 1.0)
    r1 = (-b - sqrt_disc) / denom
    r2 = (-b + sqrt_disc) / denom
    rmin = np.minimum(r1, r2)
    rmax = np.maximum(r1, r2)
    pos_root = np.where(rmin > 0.0, rmin, rmax)
    ok = quad & (disc >= 0.0) & (pos_root > 0.0)
    return np.where(ok, pos_root, tau)


def _guidance_batch(adv_pos: np.ndarray, adv_vel: np.ndarray,
                    tgt_pos: np.ndarray, tgt_vel: np.ndarray,
                    lead: bool, a_max: float, v_max: float) -> np.ndarray:
    """Commanded adversary acceleration, same leading shape as adv_pos.

    Drives at the accel cap toward the aim point (the target itself, or the
    constant-velocity intercept point under lead pursuit) while damping the
    velocity component transverse to the aim direction; the result is clipped
    to the accel cap. Coincident adversary and target produce zero command.
    """
    rel = tgt_pos - adv_pos
    dist = np.linalg.norm(rel, axis=-1)
    if lead:
        tau = _intercept_time(rel, tgt_vel, v_max)
        aim = rel + tgt_vel * tau[..., None]
    else:
        aim = rel
    aim_dist = np.linalg.norm(aim, axis=-1)
    # Aim collapses onto the adversary only in degenerate intercept geometry;
    # fall back to the raw line of sight there.
    safe_aim = aim_dist > _EPS
    base = np.where(safe_aim[..., None], aim, rel)
    base_dist = np.where(safe_aim, aim_dist, dist)
    unit = base / np.maximum(base_dist, _EPS)[..., None]
    along = np.sum(adv_vel * unit, axis=-1, keepdims=True) * unit
    transverse = adv_vel - along
    accel = a_max * unit - DAMPING_GAIN * transverse
    mag = np.linalg.norm(accel, axis=-1)
    scale = np.where(mag > a_max, a_max / np.maximum(mag, _EPS), 1.0)
    accel = accel * scale[..., None]
    return np.where((dist > _EPS)[..., None], accel, 0.0)


def guidance_accel(adversary: AgentState, target: AgentState, tactic: Tactic,
                   a_max: float, v_max: float) -> np.ndarray:
    """Acceleration command for one adversary chasing one defender."""
    return _guidance_batch(
        np.asarray(adversary.position, dtype=np.float64)[None],
        np.asarray(adversary.velocity, dtype=np.float64)[None],
        np.asarray(target.position, dtype=np.float64)[None],
        np.asarray(target.velocity, dtype=np.float64)[None],
        tactic.lead_pursuit, a_max, v_max)[0]


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------


def _integrate(pos: np.ndarray, vel: np.ndarray, accel: np.ndarray,
               dt: float, v_max: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One double-integrator step with post-hoc magnitude-preserving clip.

    Position advances with the pre-update velocity. Returns (new_pos,
    new_vel, clipped) where clipped marks agents whose speed cap bound.
    """
    new_pos = pos + dt * vel
    raw_vel = vel + dt * accel
    speed = np.linalg.norm(raw_vel, axis=-1)
    clipped = speed > v_max
    scale = np.where(clipped, v_max / np.maximum(speed, _EPS), 1.0)
    return new_pos, raw_vel * scale[..., None], clipped


def step(state: EngagementState, defender_accels: np.ndarray, tactic: Tactic,
         config: EngagementConfig) -> StepResult:
    """Advance one engagement by one time step.

    Both groups update simultaneously from the current state: adversaries
    pick targets and guidance commands against the pre-step defender state,
    then both integrate. Capture is evaluated on the new positions against
    each adversary's just-used target.
    """
    defender_accels = np.asarray(defender_accels, dtype=np.float64)
    if defender_accels.shape != state.defender_pos.shape:
        raise ValueError("defender_accels must be [N_D, 2]")
    assign = _assign_batch(state.adversary_pos[None], state.defender_pos[None],
                           tactic)[0]
    adv_accel = _guidance_batch(state.adversary_pos, state.adversary_vel,
                                state.defender_pos[assign],
                                state.defender_vel[assign],
                                tactic.lead_pursuit,
                                config.adversary_a_max, config.adversary_v_max)
    new_apos, new_avel, aclip = _integrate(state.adversary_pos,
                                           state.adversary_vel, adv_accel,
                                           config.dt, config.adversary_v_max)
    new_dpos, new_dvel, dclip = _integrate(state.defender_pos,
                                           state.defender_vel, defender_accels,
                                           config.dt, config.defender_v_max)
    gap = np.linalg.norm(new_apos - new_dpos[assign], axis=-1)
    return StepResult(
        state=EngagementState(new_dpos, new_dvel, new_apos, new_avel),
        adversary_accels=adv_accel,
        defender_clipped=dclip,
        adversary_clipped=aclip,
        captured=bool(np.any(gap <= config.capture_radius)),
    )


def _run_batch(config: EngagementConfig, tactic: Tactic,
               def_pos0: np.ndarray, def_vel0: np.ndarray,
               adv_pos0: np.ndarray, adv_vel0: np.ndarray,
               n_steps: int,
               def_accel: np.ndarray | None,
               def_paths: np.ndarray | None,
               check_capture: bool,
               record: bool):
    """Core stepping loop shared by the open-loop and explicit modes.

    def_accel is a constant [B, N_D, 2] command (ramp mode) or None; when
    def_paths is given the defender states are read from it instead of being
    integrated. Returns (defender buffer, adversary buffer, lengths, records).
    """
    b, n_d = def_pos0.shape[0], def_pos0.shape[1]
    n_a = adv_pos0.shape[1]
    dt = config.dt
    dbuf = np.empty((b, n_steps + 1, 2 * n_d), dtype=np.float64)
    abuf = np.empty((b, n_steps + 1, 2 * n_a), dtype=np.float64)
    lengths = np.full(b, n_steps + 1, dtype=np.int64)
    active = np.ones(b, dtype=bool)
    records = None
    if record:
        records = {
            "defender_accels": np.zeros((b, n_steps, n_d, 2)),
            "adversary_accels": np.zeros((b, n_steps, n_a, 2)),
            "defender_clipped": np.zeros((b, n_steps, n_d), dtype=bool),
            "adversary_clipped": np.zeros((b, n_steps, n_a), dtype=bool),
        }

    dpos, dvel = def_pos0.copy(), def_vel0.copy()
    apos, avel = adv_pos0.copy(), adv_vel0.copy()
    if def_paths is not None:
        dpos = def_paths[:, 0].reshape(b, n_d, 2).copy()
    dbuf[:, 0] = dpos.reshape(b, -1)
    abuf[:, 0] = apos.reshape(b, -1)
    captured = np.zeros(b, dtype=bool)
    last_row = 0
    for t in range(n_steps):
        assign = _assign_batch(apos, dpos, tactic, active=active)
        tgt_pos = np.take_along_axis(dpos, assign[..., None], axis=1)
        if def_paths is not None:
            dvel = (def_paths[:, t + 1] - def_paths[:, t]).reshape(b, n_d, 2) / dt
        tgt_vel = np.take_along_axis(dvel, assign[..., None], axis=1)
        adv_accel = _guidance_batch(apos, avel, tgt_pos, tgt_vel,
                                    tactic.lead_pursuit,
                                    config.adversary_a_max,
                                    config.adversary_v_max)
        apos, avel, aclip = _integrate(apos, avel, adv_accel, dt,
                                       config.adversary_v_max)
        if def_paths is not None:
            dpos = def_paths[:, t + 1].reshape(b, n_d, 2).copy()
            dclip = np.zeros((b, n_d), dtype=bool)
            d_accel_cmd = np.zeros((b, n_d, 2))
        else:
            d_accel_cmd = np.zeros((b, n_d, 2)) if def_accel is None else def_accel
            dpos, dvel, dclip = _integrate(dpos, dvel, d_accel_cmd, dt,
                                           config.defender_v_max)
        dbuf[:, t + 1] = dpos.reshape(b, -1)
        abuf[:, t + 1] = apos.reshape(b, -1)
        if record:
            records["defender_accels"][:, t] = d_accel_cmd
            records["adversary_accels"][:, t] = adv_accel
            records["defender_clipped"][:, t] = dclip
            records["adversary_clipped"][:, t] = aclip
        last_row = t + 1
        if check_capture:
            gap = np.linalg.norm(apos - np.take_along_axis(dpos, assign[..., None],
                                                           axis=1), axis=-1)
            hit = np.any(gap <= config.capture_radius, axis=1)
            newly = active & hit
            lengths[newly] = t + 2  # rows 0..t+1 inclusive
            captured |= newly
            active &= ~hit
            if not active.any():
                break
    if check_capture:
        lengths[active] = last_row + 1
    else:
        lengths[:] = n_steps + 1
    return dbuf, abuf, lengths, captured, records


def simulate_open_loop_batch(config: EngagementConfig, seeds: Sequence[int],
                             motion: MotionType, tactic: Tactic,
                             ramp_to_max: bool = False,
                             record_kinematics: bool = False):
    """Simulate many engagements at once, one per seed.

    Each seed draws its own initial placement and motion plan exactly as the
    single-engagement path does. Returns (defender buffer [B, S+1, 2*N_D],
    adversary buffer [B, S+1, 2*N_A], lengths [B], captured [B], records);
    rows at index >= lengths[i] are scratch and must be ignored.
    """
    b = len(seeds)
    n_d, n_a = config.n_defenders, config.n_adversaries
    def_pos0 = np.empty((b, n_d, 2))
    def_vel0 = np.empty((b, n_d, 2))
    adv_pos0 = np.empty((b, n_a, 2))
    ramp_dirs = np.empty((b, n_d, 2))
    for i, seed in enumerate(seeds):
        cfg = replace(config, seed=int(seed))
        plan = engagement_motion_plan(cfg, motion, ramp_to_max=ramp_to_max)
        state = init_engagement(cfg, plan)
        def_pos0[i] = state.defender_pos
        def_vel0[i] = state.defender_vel
        adv_pos0[i] = state.adversary_pos
        ramp_dirs[i, :, 0] = np.cos(plan.headings)
        ramp_dirs[i, :, 1] = np.sin(plan.headings)
    def_accel = config.defender_a_max * ramp_dirs if ramp_to_max else None
    return _run_batch(config, tactic, def_pos0, def_vel0, adv_pos0,
                      np.zeros((b, n_a, 2)), config.max_steps,
                      def_accel, None, check_capture=True,
                      record=record_kinematics)


def simulate_explicit_batch(config: EngagementConfig, defender_paths: np.ndarray,
                            tactic: Tactic) -> np.ndarray:
    """Adversary responses to explicit defender trajectories.

    defender_paths is [B, N_t, 2*N_D]; every batch element replays the same
    engagement seed (same adversary placement), so this is the probe kernel
    for trajectory optimization. Returns adversary paths [B, N_t, 2*N_A].
    No capture cutoff: the simulation runs all N_t - 1 steps.
    """
    defender_paths = np.asarray(defender_paths, dtype=np.float64)
    if defender_paths.ndim != 3:
        raise ValueError("defender_paths must be [B, N_t, 2*N_D]")
    b, n_t, cols = defender_paths.shape
    if cols != 2 * config.n_defenders:
        raise ValueError(f"defender trajectory has {cols} columns, expected "
                         f"{2 * config.n_defenders} for {config.n_defenders} defenders")
    if n_t < 1:
        raise ValueError("defender trajectory needs at least one row")
    state = init_engagement(config)
    adv_pos0 = np.broadcast_to(state.adversary_pos, (b,) + state.adversary_pos.shape).copy()
    def_pos0 = defender_paths[:, 0].reshape(b, config.n_defenders, 2)
    _, abuf, _, _, _ = _run_batch(config, tactic, def_pos0,
                                  np.zeros_like(def_pos0), adv_pos0,
                                  np.zeros_like(adv_pos0), n_t - 1,
                                  None, defender_paths, check_capture=False,
                                  record=False)
    return abuf


def simulate_engagement(config: EngagementConfig,
                        defenders: MotionPlan | TrajectoryMatrix | np.ndarray,
                        tactic: Tactic,
                        record_kinematics: bool = False) -> SimulationResult:
    """Run one engagement under a motion plan or an explicit defender path.

    With a :class:`MotionPlan` the engagement runs until capture (any
    adversary within the capture radius of its current target) or
    ``config.max_steps``, whichever is first. With an explicit trajectory
    ([N_t, 2*N_D] array or :class:`TrajectoryMatrix`) the defender states are
    taken verbatim, all N_t - 1 steps run, and capture does not terminate.
    """
    tactic = Tactic(tactic)
    if isinstance(defenders, MotionPlan):
        if defenders.n_defenders != config.n_defenders:
            raise ValueError("plan sized for a different defender count")
        dbuf, abuf, lengths, captured, records = simulate_open_loop_batch(
            config, [config.seed], defenders.motion, tactic,
            ramp_to_max=defenders.ramp_to_max,
            record_kinematics=record_kinematics)
        n_t = int(lengths[0])
        result = SimulationResult(
            config=config, tactic=tactic,
            defenders=TrajectoryMatrix(dbuf[0, :n_t].copy(), dt=config.dt),
            adversaries=TrajectoryMatrix(abuf[0, :n_t].copy(), dt=config.dt),
            termination_step=n_t - 1, captured=bool(captured[0]))
        if record_kinematics and records is not None:
            result.defender_accels = records["defender_accels"][0, :n_t - 1]
            result.adversary_accels = records["adversary_accels"][0, :n_t - 1]
            result.defender_clipped = records["defender_clipped"][0, :n_t - 1]
            result.adversary_clipped = records["adversary_clipped"][0, :n_t - 1]
        return result

    if isinstance(defenders, TrajectoryMatrix):
        paths = defenders.data
    else:
        paths = np.asarray(defenders, dtype=np.float64)
        if paths.ndim != 2:
            raise ValueError("explicit defender trajectory must be [N_t, 2*N_D]")
    abuf = simulate_explicit_batch(config, paths[None], tactic)
    adv = TrajectoryMatrix(abuf[0], dt=config.dt)
    # Capture flag is diagnostic only in explicit mode.
    captured = _explicit_capture_hit(config, paths, abuf[0], tactic)
    return SimulationResult(config=config, tactic=tactic,
                            defenders=TrajectoryMatrix(paths.copy(), dt=config.dt),
                            adversaries=adv,
                            termination_step=paths.shape[0] - 1,
                            captured=captured)


def _explicit_capture_hit(config: EngagementConfig, def_paths: np.ndarray,
                          adv_paths: np.ndarray, tactic: Tactic) -> bool:
    n_d, n_a = config.n_defenders, config.n_adversaries
    for t in range(def_paths.shape[0] - 1):
        dpos = def_paths[t].reshape(n_d, 2)
        apos_next = adv_paths[t + 1].reshape(n_a, 2)
        assign = _assign_batch(adv_paths[t].reshape(1, n_a, 2),
                               dpos[None], tactic)[0]
        dnext = def_paths[t + 1].reshape(n_d, 2)
        gap = np.linalg.norm(apos_next - dnext[assign], axis=-1)
        if np.any(gap <= config.capture_radius):
            return True
    return False


# ---------------------------------------------------------------------------
# Derived kinematics and export
# ---------------------------------------------------------------------------


def derive_kinematics(traj: TrajectoryMatrix | np.ndarray,
                      dt: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference velocities and accelerations from positions.

    V(t) = (P(t+1) - P(t)) / dt on rows 0..N_t-2 and A(t) = (V(t+1) - V(t)) / dt
    on rows 0..N_t-3, matching the integrator's position-update convention.
    """
    if isinstance(traj, TrajectoryMatrix):
        data = traj.data
        dt = traj.dt if dt is None else dt
    else:
        data = np.asarray(traj, dtype=np.float64)
        if dt is None:
            dt = 1.0
    if data.ndim != 2:
        raise ValueError("trajectory must be a 2-D matrix")
    if data.shape[0] < 3:
        raise ValueError("need at least 3 trajectory rows to derive "
                         "velocity and acceleration")
    vel = np.diff(data, axis=0) / dt
    acc = np.diff(vel, axis=0) / dt
    return vel, acc


def write_trajectory_csv(traj: TrajectoryMatrix, path, prefix: str = "A") -> None:
    """Long-format CSV with columns t, agent, x, y."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "agent", "x", "y"])
        for t in range(traj.n_steps):
            for a in range(traj.n_agents):
                x, y = traj.data[t, 2 * a], traj.data[t, 2 * a + 1]
                writer.writerow([t, f"{prefix}{a}", repr(float(x)), repr(float(y))])
