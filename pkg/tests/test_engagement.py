"""Simulator unit tests: assignment oracle, guidance geometry, dynamics."""

import itertools
import math

import numpy as np
import pytest

from swarmtactics.engagement import (
    EngagementConfig,
    MotionType,
    Tactic,
    AgentState,
    MotionPlan,
    TrajectoryMatrix,
    assign_targets,
    derive_kinematics,
    engagement_motion_plan,
    generate_motion_plan,
    guidance_accel,
    init_engagement,
    simulate_engagement,
    simulate_explicit_batch,
    simulate_open_loop_batch,
    step,
    write_trajectory_csv,
    parse_motion,
    parse_tactic,
)


def brute_force_assignment_cost(adv_pos, def_pos):
    """Minimum total Euclidean distance over all one-to-one assignments of
    min(N_A, N_D) pairs; the oracle for the auction tactic."""
    n_a, n_d = len(adv_pos), len(def_pos)
    dist = np.linalg.norm(adv_pos[:, None, :] - def_pos[None, :, :], axis=-1)
    best = math.inf
    if n_a <= n_d:
        for cols in itertools.permutations(range(n_d), n_a):
            best = min(best, sum(dist[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n_a), n_d):
            best = min(best, sum(dist[r, j] for j, r in enumerate(rows)))
    return best


def assignment_cost(adv_pos, def_pos, assign):
    n_d = len(def_pos)
    dist = np.linalg.norm(adv_pos - def_pos[assign], axis=-1)
    if len(adv_pos) <= n_d:
        return float(dist.sum())
    # Only the one-to-one core counts toward the auction objective; surplus
    # adversaries reuse defenders via the nearest fallback.
    seen = {}
    for i, j in enumerate(assign):
        if j not in seen or dist[i] < dist[seen[j]]:
            seen[j] = i
    return float(sum(dist[i] for i in seen.values()))


# ---------------------------------------------------------------------------
# Motion plans
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("motion,lo,hi", [
    (MotionType.STAR, 0.0, 90.0),
    (MotionType.SEMI, -45.0, 135.0),
])
def test_random_heading_families_stay_in_range(motion, lo, hi):
    for seed in range(40):
        plan = generate_motion_plan(motion, 10, 0.0, 1.0, seed)
        deg = np.rad2deg(plan.headings)
        assert np.all(deg >= lo) and np.all(deg <= hi)
        assert np.all(plan.speeds >= 0.0) and np.all(plan.speeds <= 1.0)


@pytest.mark.parametrize("motion,heading", [
    (MotionType.STRAIGHT, 45.0),
    (MotionType.PERP_LEFT, 135.0),
    (MotionType.PERP_RIGHT, -45.0),
])
def test_fixed_heading_families(motion, heading):
    plan = generate_motion_plan(motion, 6, 0.2, 0.9, 3)
    assert np.allclose(np.rad2deg(plan.headings), heading)
    assert np.all(plan.speeds >= 0.2) and np.all(plan.speeds <= 0.9)


def test_heading_draws_cover_range():
    plan = generate_motion_plan(MotionType.SEMI, 500, 0.0, 1.0, 11)
    deg = np.rad2deg(plan.headings)
    assert deg.min() < -30.0 and deg.max() > 120.0


def test_motion_plan_determinism():
    a = generate_motion_plan(MotionType.STAR, 8, 0.0, 1.0, 5)
    b = generate_motion_plan(MotionType.STAR, 8, 0.0, 1.0, 5)
    c = generate_motion_plan(MotionType.STAR, 8, 0.0, 1.0, 6)
    assert np.array_equal(a.headings, b.headings)
    assert np.array_equal(a.speeds, b.speeds)
    assert not np.array_equal(a.headings, c.headings)


def test_speed_bounds_validated():
    with pytest.raises(ValueError):
        generate_motion_plan(MotionType.STAR, 4, 0.5, 0.2, 0)


def test_parse_helpers():
    assert parse_motion("Perp-Left") is MotionType.PERP_LEFT
    assert parse_tactic("auction+") is Tactic.AUCTION_PLUS
    assert parse_tactic("GREEDY_PLUS") is Tactic.GREEDY_PLUS
    with pytest.raises(ValueError):
        parse_motion("circle")
    with pytest.raises(ValueError):
        parse_tactic("random")


# ---------------------------------------------------------------------------
# Initial placement
# ---------------------------------------------------------------------------


def test_init_geometry():
    cfg = EngagementConfig(seed=3)
    state = init_engagement(cfg)
    assert np.all(np.linalg.norm(state.defender_pos, axis=1) <= cfg.defender_radius + 1e-12)
    center = cfg.separation * np.array([math.cos(math.radians(45)),
                                        math.sin(math.radians(45))])
    assert np.all(np.linalg.norm(state.adversary_pos - center, axis=1)
                  <= cfg.adversary_radius + 1e-12)
    assert np.all(state.adversary_vel == 0.0)
    assert np.all(state.defender_vel == 0.0)


def test_init_zero_radius_collapses_to_centers():
    cfg = EngagementConfig(seed=0, defender_radius=0.0, adversary_radius=0.0,
                           separation=50.0, threat_bearing_deg=0.0)
    state = init_engagement(cfg)
    assert np.allclose(state.defender_pos, 0.0)
    assert np.allclose(state.adversary_pos, [50.0, 0.0])


def test_adversary_placement_invariant_to_defender_count():
    a = init_engagement(EngagementConfig(seed=9, n_defenders=3))
    b = init_engagement(EngagementConfig(seed=9, n_defenders=12))
    assert np.array_equal(a.adversary_pos, b.adversary_pos)


def test_init_cruise_velocities_from_plan():
    cfg = EngagementConfig(seed=4, n_defenders=5)
    plan = engagement_motion_plan(cfg, MotionType.STRAIGHT)
    state = init_engagement(cfg, plan)
    speeds = np.linalg.norm(state.defender_vel, axis=1)
    assert np.allclose(speeds, plan.speeds)
    ramp_plan = engagement_motion_plan(cfg, MotionType.STRAIGHT, ramp_to_max=True)
    assert np.all(init_engagement(cfg, ramp_plan).defender_vel == 0.0)


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------


def test_greedy_picks_nearest_with_low_index_ties():
    adv = np.array([[0.0, 0.0], [9.0, 0.0]])
    dfn = np.array([[1.0, 0.0], [-1.0, 0.0], [10.0, 0.0]])
    out = assign_targets(adv, dfn, Tactic.GREEDY)
    assert out.tolist() == [0, 2]  # first adversary tie between 0 and 1 -> 0


def test_greedy_all_converge_on_shared_nearest():
    adv = np.array([[1.0, 0.0], [2.0, 0.0]])
    dfn = np.array([[0.0, 0.0], [10.0, 0.0]])
    assert assign_targets(adv, dfn, Tactic.GREEDY).tolist() == [0, 0]
    # auction must instead spread one-to-one
    assert assign_targets(adv, dfn, Tactic.AUCTION).tolist() == [0, 1]


def test_single_defender_all_tactics_agree():
    adv = np.random.default_rng(0).uniform(-5, 5, size=(6, 2))
    dfn = np.array([[0.5, 0.5]])
    for tactic in Tactic:
        assert np.all(assign_targets(adv, dfn, tactic) == 0)


def test_auction_matches_brute_force_small():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n_a = int(rng.integers(1, 6))
        n_d = int(rng.integers(1, 6))
        adv = rng.uniform(-10, 10, size=(n_a, 2))
        dfn = rng.uniform(-10, 10, size=(n_d, 2))
        assign = assign_targets(adv, dfn, Tactic.AUCTION)
        got = assignment_cost(adv, dfn, assign)
        want = brute_force_assignment_cost(adv, dfn)
        assert got == pytest.approx(want, abs=1e-12)


def test_auction_surplus_adversaries_fall_back_to_nearest():
    adv = np.array([[0.0, 0.0], [0.0, 1.0], [50.0, 0.0]])
    dfn = np.array([[0.0, 0.5]])
    out = assign_targets(adv, dfn, Tactic.AUCTION)
    assert out.tolist() == [0, 0, 0]


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------


def test_guidance_from_rest_drives_along_los_at_cap():
    adv = AgentState(np.zeros(2), np.zeros(2))
    tgt = AgentState(np.array([10.0, 0.0]), np.zeros(2))
    acc = guidance_accel(adv, tgt, Tactic.GREEDY, a_max=0.5, v_max=2.0)
    assert np.allclose(acc, [0.5, 0.0])


def test_guidance_stationary_target_lead_equals_pure():
    adv = AgentState(np.array([1.0, 2.0]), np.array([0.3, -0.1]))
    tgt = AgentState(np.array([7.0, -3.0]), np.zeros(2))
    pure = guidance_accel(adv, tgt, Tactic.GREEDY, 0.5, 2.0)
    lead = guidance_accel(adv, tgt, Tactic.GREEDY_PLUS, 0.5, 2.0)
    assert np.array_equal(pure, lead)


def test_guidance_lead_angle_against_crossing_target():
    # Target at (10, 0) crossing at 90 degrees with speed 1; pursuer speed
    # cap 2. Intercept time solves |r + v t| = 2 t: t = sqrt(100 / 3).
    adv = AgentState(np.zeros(2), np.zeros(2))
    tgt = AgentState(np.array([10.0, 0.0]), np.array([0.0, 1.0]))
    lead = guidance_accel(adv, tgt, Tactic.AUCTION_PLUS, 0.5, 2.0)
    tau = math.sqrt(100.0 / 3.0)
    aim = np.array([10.0, tau])
    want = 0.5 * aim / np.linalg.norm(aim)
    assert np.allclose(lead, want)
    pure = guidance_accel(adv, tgt, Tactic.AUCTION, 0.5, 2.0)
    cos_angle = pure @ lead / (np.linalg.norm(pure) * np.linalg.norm(lead))
    assert math.acos(min(1.0, cos_angle)) > 0.2  # lead angle is real


def test_guidance_coincident_positions_zero():
    adv = AgentState(np.array([1.0, 1.0]), np.array([0.5, 0.0]))
    tgt = AgentState(np.array([1.0, 1.0]), np.array([0.0, 1.0]))
    assert np.all(guidance_accel(adv, tgt, Tactic.GREEDY_PLUS, 0.5, 2.0) == 0.0)


def test_guidance_never_exceeds_cap():
    rng = np.random.default_rng(1)
    for _ in range(200):
        adv = AgentState(rng.uniform(-5, 5, 2), rng.uniform(-2, 2, 2))
        tgt = AgentState(rng.uniform(-5, 5, 2), rng.uniform(-1, 1, 2))
        for tactic in (Tactic.GREEDY, Tactic.GREEDY_PLUS):
            acc = guidance_accel(adv, tgt, tactic, 0.5, 2.0)
            assert np.linalg.norm(acc) <= 0.5 + 1e-12


def test_guidance_damps_transverse_velocity():
    adv = AgentState(np.zeros(2), np.array([0.0, 1.5]))  # moving across LOS
    tgt = AgentState(np.array([10.0, 0.0]), np.zeros(2))
    acc = guidance_accel(adv, tgt, Tactic.GREEDY, 0.5, 2.0)
    assert acc[1] < 0.0  # pushes against the transverse component


# ---------------------------------------------------------------------------
# Integration step
# ---------------------------------------------------------------------------


def test_step_hand_case():
    # V(t+1) = V(t) + dt A, P(t+1) = P(t) + dt V(t): position moves with the
    # old velocity.
    cfg = EngagementConfig(n_defenders=1, n_adversaries=1, dt=1.0,
                           defender_v_max=5.0)
    state = init_engagement(cfg)
    state.defender_pos = np.array([[0.0, 0.0]])
    state.defender_vel = np.array([[1.0, 0.0]])
    state.adversary_pos = np.array([[100.0, 0.0]])
    state.adversary_vel = np.array([[0.0, 0.0]])
    out = step(state, np.array([[0.0, 1.0]]), Tactic.GREEDY, cfg)
    assert np.allclose(out.state.defender_pos, [[1.0, 0.0]])
    assert np.allclose(out.state.defender_vel, [[1.0, 1.0]])


def test_step_speed_clip_preserves_direction():
    cfg = EngagementConfig(n_defenders=1, n_adversaries=1, dt=1.0,
                           defender_v_max=1.0)
    state = init_engagement(cfg)
    state.defender_pos = np.array([[0.0, 0.0]])
    state.defender_vel = np.array([[0.9, 0.0]])
    state.adversary_pos = np.array([[100.0, 0.0]])
    state.adversary_vel = np.array([[0.0, 0.0]])
    out = step(state, np.array([[0.5, 0.0]]), Tactic.GREEDY, cfg)
    assert np.allclose(out.state.defender_vel, [[1.0, 0.0]])
    assert out.defender_clipped.tolist() == [True]
    assert np.allclose(out.state.defender_pos, [[0.9, 0.0]])


def test_step_capture_flag():
    cfg = EngagementConfig(n_defenders=1, n_adversaries=1, capture_radius=2.0)
    state = init_engagement(cfg)
    state.defender_pos = np.array([[0.0, 0.0]])
    state.defender_vel = np.zeros((1, 2))
    state.adversary_pos = np.array([[2.5, 0.0]])
    state.adversary_vel = np.array([[-2.0, 0.0]])
    out = step(state, np.zeros((1, 2)), Tactic.GREEDY, cfg)
    assert out.captured  # adversary coasts to (0.5, 0), within radius 2


# ---------------------------------------------------------------------------
# Full simulation
# ---------------------------------------------------------------------------


def test_simulation_row_counts_and_caps():
    cfg = EngagementConfig(seed=11)
    plan = engagement_motion_plan(cfg, MotionType.STAR)
    result = simulate_engagement(cfg, plan, Tactic.GREEDY)
    n_t = result.termination_step + 1
    assert result.defenders.n_steps == n_t
    assert result.adversaries.n_steps == n_t
    assert n_t <= cfg.max_steps + 1
    vel_d, _ = derive_kinematics(result.defenders)
    vel_a, _ = derive_kinematics(result.adversaries)
    for row in vel_d.reshape(vel_d.shape[0], -1, 2).reshape(-1, 2):
        assert np.linalg.norm(row) <= cfg.defender_v_max + 1e-9
    for row in vel_a.reshape(-1, 2):
        assert np.linalg.norm(row) <= cfg.adversary_v_max + 1e-9


def test_simulation_zero_steps():
    cfg = EngagementConfig(seed=1, max_steps=0)
    plan = engagement_motion_plan(cfg, MotionType.STRAIGHT)
    result = simulate_engagement(cfg, plan, Tactic.AUCTION)
    assert result.termination_step == 0
    assert result.defenders.n_steps == 1
    assert not result.captured


def test_simulation_bitwise_determinism():
    cfg = EngagementConfig(seed=21)
    plan = engagement_motion_plan(cfg, MotionType.SEMI)
    a = simulate_engagement(cfg, plan, Tactic.AUCTION_PLUS)
    b = simulate_engagement(cfg, plan, Tactic.AUCTION_PLUS)
    assert np.array_equal(a.defenders.data, b.defenders.data)
    assert np.array_equal(a.adversaries.data, b.adversaries.data)


def test_tactics_produce_distinct_trajectories():
    cfg = EngagementConfig(seed=2)
    plan = engagement_motion_plan(cfg, MotionType.STAR)
    paths = {}
    for tactic in Tactic:
        r = simulate_engagement(cfg, plan, tactic)
        paths[tactic] = r.adversaries.data
    for a, b in itertools.combinations(Tactic, 2):
        rows = min(paths[a].shape[0], paths[b].shape[0])
        assert not np.allclose(paths[a][:rows], paths[b][:rows]), (a, b)


def test_batch_matches_single_bitwise():
    cfg = EngagementConfig(seed=0)
    seeds = [5, 6, 7]
    for tactic in (Tactic.GREEDY, Tactic.AUCTION_PLUS):
        dbuf, abuf, lengths, captured, _ = simulate_open_loop_batch(
            cfg, seeds, MotionType.STAR, tactic)
        for i, seed in enumerate(seeds):
            c = EngagementConfig(seed=seed)
            plan = engagement_motion_plan(c, MotionType.STAR)
            r = simulate_engagement(c, plan, tactic)
            n = int(lengths[i])
            assert n == r.termination_step + 1
            assert bool(captured[i]) == r.captured
            assert np.array_equal(dbuf[i, :n], r.defenders.data)
            assert np.array_equal(abuf[i, :n], r.adversaries.data)


def test_ramp_plan_speeds_up_to_cap():
    cfg = EngagementConfig(seed=8, max_steps=10)
    plan = engagement_motion_plan(cfg, MotionType.STRAIGHT, ramp_to_max=True)
    result = simulate_engagement(cfg, plan, Tactic.GREEDY)
    vel, _ = derive_kinematics(result.defenders)
    speeds = np.linalg.norm(vel.reshape(vel.shape[0], -1, 2), axis=2)
    # From rest: 0, then a_max steps of dt until the cap binds.
    assert np.allclose(speeds[0], 0.0)
    assert np.allclose(speeds[1], 0.5)
    assert np.allclose(speeds[2:], 1.0)


def test_explicit_trajectory_is_verbatim_and_full_length():
    cfg = EngagementConfig(seed=13, n_defenders=2, n_adversaries=3)
    t = np.arange(12, dtype=np.float64)
    p_d = np.stack([t, t, 5 - t, t * 0.5], axis=1)
    result = simulate_engagement(cfg, p_d, Tactic.AUCTION)
    assert np.array_equal(result.defenders.data, p_d)
    assert result.adversaries.n_steps == 12
    assert result.termination_step == 11


def test_explicit_trajectory_wrong_columns_rejected():
    cfg = EngagementConfig(seed=13, n_defenders=3)
    with pytest.raises(ValueError, match="columns"):
        simulate_engagement(cfg, np.zeros((5, 4)), Tactic.GREEDY)


def test_explicit_batch_first_element_matches_single():
    cfg = EngagementConfig(seed=17, n_defenders=2)
    rng = np.random.default_rng(0)
    base = np.cumsum(rng.uniform(-0.5, 0.5, size=(8, 4)), axis=0)
    batch = np.stack([base, base + 0.1])
    out = simulate_explicit_batch(cfg, batch, Tactic.GREEDY_PLUS)
    single = simulate_engagement(cfg, base, Tactic.GREEDY_PLUS)
    assert np.array_equal(out[0], single.adversaries.data)
    assert not np.array_equal(out[1], out[0])


# ---------------------------------------------------------------------------
# Derived kinematics
# ---------------------------------------------------------------------------


def test_derive_kinematics_quadratic_path():
    t = np.arange(6, dtype=np.float64)
    data = np.stack([t * t, 3.0 * t], axis=1)  # one agent
    vel, acc = derive_kinematics(TrajectoryMatrix(data, dt=1.0))
    assert np.allclose(vel[:, 0], 2 * t[:-1] + 1)
    assert np.allclose(vel[:, 1], 3.0)
    assert np.allclose(acc[:, 0], 2.0)
    assert np.allclose(acc[:, 1], 0.0)


def test_derive_kinematics_respects_dt():
    t = np.arange(5, dtype=np.float64)
    data = np.stack([2.0 * t, 0 * t], axis=1)
    vel, acc = derive_kinematics(data, dt=0.5)
    assert np.allclose(vel[:, 0], 2.0 / 0.5)
    assert np.allclose(acc, 0.0)


def test_derive_kinematics_needs_three_rows():
    with pytest.raises(ValueError):
        derive_kinematics(np.zeros((2, 2)))


def test_dynamics_round_trip_recovers_commands():
    # Simulate with recorded commands, then reconstruct accelerations by
    # forward differences; they must agree to 1e-9 relative wherever the
    # speed clip did not bind.
    for seed in range(5):
        cfg = EngagementConfig(seed=seed, max_steps=30)
        plan = engagement_motion_plan(cfg, MotionType.STAR, ramp_to_max=True)
        r = simulate_engagement(cfg, plan, Tactic.GREEDY_PLUS,
                                record_kinematics=True)
        for traj, accels, clipped in [
            (r.adversaries, r.adversary_accels, r.adversary_clipped),
            (r.defenders, r.defender_accels, r.defender_clipped),
        ]:
            _, acc = derive_kinematics(traj)
            got = acc.reshape(acc.shape[0], -1, 2)
            want = accels[: acc.shape[0]]
            ok = ~clipped[: acc.shape[0]]
            err = np.linalg.norm(got - want, axis=2)
            denom = np.maximum(np.linalg.norm(want, axis=2), 1e-3)
            assert np.all(err[ok] / denom[ok] < 1e-9)


def test_trajectory_csv_round_trip(tmp_path):
    cfg = EngagementConfig(seed=3, max_steps=4, n_defenders=2)
    plan = engagement_motion_plan(cfg, MotionType.STRAIGHT)
    r = simulate_engagement(cfg, plan, Tactic.GREEDY)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(r.defenders, path, prefix="D")
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,agent,x,y"
    assert len(lines) == 1 + r.defenders.n_steps * 2
    t, agent, x, y = lines[1].split(",")
    assert (t, agent) == ("0", "D0")
    assert float(x) == r.defenders.data[0, 0]
