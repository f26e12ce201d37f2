"""Optimizer tests: polygon geometry, objective plumbing, constraints,
augmented-Lagrangian contract."""

import numpy as np
import pytest

from swarmtactics.cnn import CnnModel, CnnSpec, TrainConfig, train
from swarmtactics.datasets import (
    ScalerStats,
    VoiPoint,
    apply_scaler,
    fit_scaler,
    generate_subdataset,
    split_dataset,
)
from swarmtactics.engagement import (
    EngagementConfig,
    MotionPlan,
    MotionType,
    Tactic,
    engagement_motion_plan,
    simulate_open_loop_batch,
)
from swarmtactics.optimize import (
    ConstraintReport,
    InfeasibleGuessError,
    OperationalArea,
    OptimizationProblem,
    SolverSettings,
    constraint_eval,
    evaluate_initial_trajectories,
    initial_guess,
    optimize,
    prediction_stack,
    sum_true_predictions,
)

SQUARE = OperationalArea(np.array([[-50.0, -50.0], [50.0, -50.0],
                                   [50.0, 50.0], [-50.0, 50.0]]))


def tiny_setup(n_defenders=2, seed=3, window=4, model_seed=0):
    """Scenario with 3 adversaries and an untrained (but non-constant) model.

    The scaler divides by ~50 so raw position magnitudes land near O(1);
    an identity scaler saturates the untrained softmax and kills gradients.
    """
    cfg = EngagementConfig(n_defenders=n_defenders, n_adversaries=3, seed=seed)
    spec = CnnSpec(window=window, features=12, filters=(8,), kernels=(3,),
                   pool=2, dropout=0.0)
    model = CnnModel.init(spec, seed=model_seed)
    scaler = ScalerStats(mean=np.zeros(12), var=np.full(12, 2500.0))
    return cfg, model, scaler


# ---------------------------------------------------------------------------
# Operational area
# ---------------------------------------------------------------------------


def test_area_rejects_clockwise_and_collinear():
    with pytest.raises(ValueError, match="counterclockwise"):
        OperationalArea(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="counterclockwise"):
        OperationalArea(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0],
                                  [0.0, 1.0]]))
    with pytest.raises(ValueError, match="vertices"):
        OperationalArea(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_area_signed_distance_unit_square():
    sq = OperationalArea(np.array([[0.0, 0.0], [1.0, 0.0],
                                   [1.0, 1.0], [0.0, 1.0]]))
    assert sq.signed_distance(np.array([0.5, 0.5])) == pytest.approx(-0.5)
    assert sq.signed_distance(np.array([0.9, 0.5])) == pytest.approx(-0.1)
    assert sq.signed_distance(np.array([1.5, 0.5])) == pytest.approx(0.5)
    assert sq.signed_distance(np.array([0.0, 0.0])) == pytest.approx(0.0)
    pts = np.array([[[0.5, 0.5], [2.0, 0.5]]])
    assert sq.contains(pts).tolist() == [[True, False]]


def test_area_distance_batch_shapes():
    sd = SQUARE.signed_distance(np.zeros((3, 4, 2)))
    assert sd.shape == (3, 4)
    assert np.allclose(sd, -50.0)


# ---------------------------------------------------------------------------
# Objective plumbing
# ---------------------------------------------------------------------------


def test_prediction_stack_rows_are_distributions():
    cfg, model, scaler = tiny_setup()
    plan = engagement_motion_plan(cfg, MotionType.STAR)
    traj = initial_guess(cfg, plan, 5)
    stack = prediction_stack(model, scaler, traj, cfg)
    assert stack.shape == (4, 4)
    assert np.allclose(stack.sum(axis=1), 1.0)
    assert np.all(stack > 0.0)


def test_uniform_model_stack_and_stp():
    cfg, model, scaler = tiny_setup()
    model.params["dense_w"][:] = 0.0
    model.params["dense_b"][:] = 0.0
    traj = initial_guess(cfg, engagement_motion_plan(cfg, MotionType.SEMI), 5)
    stack = prediction_stack(model, scaler, traj, cfg)
    assert np.allclose(stack, 0.25)
    assert sum_true_predictions(stack) == pytest.approx(100.0)


def test_sum_true_predictions_identity_and_range():
    assert sum_true_predictions(np.eye(4)) == pytest.approx(400.0)
    stack = np.full((4, 4), 0.25)
    stack[0] = [0.94, 0.01, 0.03, 0.02]
    assert sum_true_predictions(stack) == pytest.approx(100 * (0.94 + 0.75))
    with pytest.raises(ValueError):
        sum_true_predictions(np.ones((3, 4)))


def test_stack_requires_enough_rows():
    cfg, model, scaler = tiny_setup(window=6)
    with pytest.raises(ValueError, match="window"):
        prediction_stack(model, scaler, np.zeros((5, 4)), cfg)


# ---------------------------------------------------------------------------
# Initial guesses
# ---------------------------------------------------------------------------


def test_initial_guess_matches_open_loop_simulation():
    cfg = EngagementConfig(n_defenders=3, n_adversaries=3, seed=11, max_steps=4)
    for ramp in (False, True):
        plan = engagement_motion_plan(cfg, MotionType.STAR, ramp_to_max=ramp)
        guess = initial_guess(cfg, plan, 5)
        dbuf, _, lengths, _, _ = simulate_open_loop_batch(
            cfg, [cfg.seed], MotionType.STAR, Tactic.GREEDY, ramp_to_max=ramp)
        rows = min(int(lengths[0]), 5)
        assert np.allclose(guess[:rows], dbuf[0, :rows], atol=1e-12)


def test_initial_guess_straight_heading():
    cfg = EngagementConfig(n_defenders=2, n_adversaries=3, seed=1)
    plan = engagement_motion_plan(cfg, MotionType.STRAIGHT)
    guess = initial_guess(cfg, plan, 4)
    steps = np.diff(guess.reshape(4, 2, 2), axis=0)
    angles = np.arctan2(steps[..., 1], steps[..., 0])
    assert np.allclose(np.rad2deg(angles), 45.0)


def test_initial_guess_ramp_speed_profile():
    cfg = EngagementConfig(n_defenders=1, n_adversaries=3, seed=2)
    plan = engagement_motion_plan(cfg, MotionType.STRAIGHT, ramp_to_max=True)
    guess = initial_guess(cfg, plan, 6)
    speeds = np.linalg.norm(np.diff(guess.reshape(6, 1, 2), axis=0), axis=-1)
    assert np.allclose(speeds[:, 0], [0.0, 0.5, 1.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


def make_problem(cfg, model, scaler, **kw):
    kw.setdefault("area", SQUARE)
    return OptimizationProblem(model=model, scaler=scaler, config=cfg, **kw)


def test_constraints_feasible_cruise():
    cfg, model, scaler = tiny_setup()
    problem = make_problem(cfg, model, scaler, n_rows=5, d_min=0.0)
    traj = initial_guess(cfg, engagement_motion_plan(cfg, MotionType.STAR), 5)
    report = constraint_eval(traj, problem)
    assert report.feasible(1e-9)
    assert set(report.families) == {"area", "v_min", "v_max", "a_max",
                                    "separation"}


def test_constraint_area_violation_magnitude():
    cfg, model, scaler = tiny_setup(n_defenders=1)
    problem = make_problem(cfg, model, scaler, n_rows=5)
    traj = np.zeros((5, 2))
    traj[:, 0] = 57.0  # 7 beyond the +x edge, stationary
    report = constraint_eval(traj, problem)
    assert report.family_max()["area"] == pytest.approx(7.0)
    assert report.family_max()["v_max"] == 0.0


def test_constraint_speed_and_accel_violations():
    cfg, model, scaler = tiny_setup(n_defenders=1)
    problem = make_problem(cfg, model, scaler, n_rows=5, v_min=0.2)
    t = np.arange(5, dtype=np.float64)
    traj = np.stack([1.5 * t, np.zeros(5)], axis=1)  # speed 1.5 > cap 1
    report = constraint_eval(traj, problem)
    assert report.family_max()["v_max"] == pytest.approx(0.5)
    still = np.zeros((5, 2))  # speed 0 < floor 0.2
    assert constraint_eval(still, problem).family_max()["v_min"] == pytest.approx(0.2)
    quad = np.stack([0.5 * t * t, np.zeros(5)], axis=1)  # accel 1 > cap 0.5
    assert constraint_eval(quad, problem).family_max()["a_max"] == pytest.approx(0.5)


def test_constraint_separation_violation():
    cfg, model, scaler = tiny_setup(n_defenders=2)
    problem = make_problem(cfg, model, scaler, n_rows=5, d_min=1.0)
    traj = np.zeros((5, 4))  # both defenders parked at the origin
    report = constraint_eval(traj, problem)
    assert report.family_max()["separation"] == pytest.approx(1.0)
    assert report.max_violation == pytest.approx(1.0)


def test_single_defender_has_no_separation_rows():
    cfg, model, scaler = tiny_setup(n_defenders=1)
    problem = make_problem(cfg, model, scaler, n_rows=5, d_min=5.0)
    report = constraint_eval(np.zeros((5, 2)), problem)
    assert report.values[report.families["separation"]].size == 0


# ---------------------------------------------------------------------------
# Optimize
# ---------------------------------------------------------------------------


def test_optimize_zero_iterations_returns_start():
    cfg, model, scaler = tiny_setup()
    problem = make_problem(cfg, model, scaler,
                           settings=SolverSettings(max_iterations=0))
    plan = engagement_motion_plan(cfg, MotionType.STAR)
    start = initial_guess(cfg, plan, problem.n_rows)
    result = optimize(problem, start)
    assert np.array_equal(result.trajectory, start)
    assert result.stp_optimized == pytest.approx(result.stp_initial)
    assert result.iterations == []


def test_optimize_rejects_infeasible_start():
    cfg, model, scaler = tiny_setup(n_defenders=1)
    problem = make_problem(cfg, model, scaler, n_rows=5)
    bad = np.zeros((5, 2))
    bad[:, 0] = 60.0  # parked outside the area
    with pytest.raises(InfeasibleGuessError, match="area"):
        optimize(problem, bad)


def test_optimize_rejects_wrong_shape():
    cfg, model, scaler = tiny_setup()
    problem = make_problem(cfg, model, scaler)
    with pytest.raises(ValueError, match="start must be"):
        optimize(problem, np.zeros((2, 2)))


def test_optimize_contract_and_determinism():
    # Untrained model: the landscape is arbitrary but smooth, which is all
    # the contract needs. Best feasible iterate never loses to the start.
    cfg, model, scaler = tiny_setup(seed=5, model_seed=7)
    settings = SolverSettings(max_iterations=6, inner_steps=3)
    problem = make_problem(cfg, model, scaler, d_min=0.1, settings=settings)
    plan = engagement_motion_plan(cfg, MotionType.SEMI)
    r1 = optimize(problem, plan)
    assert r1.stp_optimized >= r1.stp_initial - 1e-12
    assert r1.constraints.max_violation <= settings.constraint_tolerance
    fresh = prediction_stack(model, scaler, r1.trajectory, cfg)
    assert abs(sum_true_predictions(fresh) - r1.stp_optimized) < 1e-9
    r2 = optimize(problem, plan)
    assert np.array_equal(r1.trajectory, r2.trajectory)
    assert r1.stp_optimized == r2.stp_optimized


@pytest.fixture(scope="module")
def trained_small():
    """Briefly trained 2-defender model: enough signal for a real landscape."""
    base = EngagementConfig(n_defenders=2, n_adversaries=3, seed=0)
    ds = generate_subdataset(base, VoiPoint(2, MotionType.STAR), 120,
                             window_floor=4)
    tr, va, _ = split_dataset(ds, seed=0)
    stats = fit_scaler(tr)
    spec = CnnSpec(window=4, features=12, filters=(8,), kernels=(3,),
                   pool=2, dropout=0.0)
    cfg = TrainConfig(learning_rate=3e-3, max_epochs=25, patience=25, seed=0)
    model, _ = train(spec, apply_scaler(tr, stats), apply_scaler(va, stats),
                     cfg)
    return base, model, stats


def test_optimize_improves_on_trained_landscape(trained_small):
    # With a real gradient signal the optimizer must actually move.
    base, model, stats = trained_small
    cfg = EngagementConfig(n_defenders=2, n_adversaries=3, seed=9)
    settings = SolverSettings(max_iterations=12, inner_steps=4)
    problem = OptimizationProblem(model=model, scaler=stats, config=cfg,
                                  area=SQUARE, d_min=0.1, settings=settings)
    plan = engagement_motion_plan(cfg, MotionType.STAR)
    result = optimize(problem, plan)
    assert result.stp_optimized > result.stp_initial + 0.5
    assert len(result.iterations) > 0
    assert result.n_stack_evaluations > 0
    assert result.constraints.max_violation <= settings.constraint_tolerance
    fresh = prediction_stack(model, stats, result.trajectory, cfg)
    assert abs(sum_true_predictions(fresh) - result.stp_optimized) < 1e-9


def test_optimize_accepts_motion_plan_start(trained_small):
    base, model, stats = trained_small
    cfg = EngagementConfig(n_defenders=2, n_adversaries=3, seed=21)
    problem = OptimizationProblem(model=model, scaler=stats, config=cfg,
                                  area=SQUARE, d_min=0.1,
                                  settings=SolverSettings(max_iterations=4))
    plan = engagement_motion_plan(cfg, MotionType.PERP_LEFT)
    from_plan = optimize(problem, plan)
    from_array = optimize(problem, initial_guess(cfg, plan, problem.n_rows))
    assert from_plan.stp_initial == from_array.stp_initial
    assert np.array_equal(from_plan.trajectory, from_array.trajectory)


def test_optimize_row_zero_fixed():
    cfg, model, scaler = tiny_setup(seed=2, model_seed=1)
    problem = make_problem(cfg, model, scaler,
                           settings=SolverSettings(max_iterations=4))
    plan = engagement_motion_plan(cfg, MotionType.STAR)
    start = initial_guess(cfg, plan, problem.n_rows)
    result = optimize(problem, start)
    assert np.array_equal(result.trajectory[0], start[0])


def test_evaluate_initial_trajectories_ranked():
    cfg, model, scaler = tiny_setup(seed=4, model_seed=2)
    problem = make_problem(cfg, model, scaler, d_min=0.1)
    scores = evaluate_initial_trajectories(problem)
    assert len(scores) == 10  # 5 motion families x {cruise, ramp}
    stps = [s.stp for s in scores]
    assert stps == sorted(stps, reverse=True)
    assert {(s.motion, s.ramp_to_max) for s in scores} == {
        (m, r) for m in MotionType for r in (False, True)}
    for s in scores:
        assert s.stack.shape == (4, 4)
    again = evaluate_initial_trajectories(problem)
    assert [s.stp for s in again] == stps


def test_problem_validation():
    cfg, model, scaler = tiny_setup()
    with pytest.raises(ValueError, match="rows"):
        OptimizationProblem(model=model, scaler=scaler, config=cfg,
                            area=SQUARE, n_rows=3)
    bad_cfg = EngagementConfig(n_defenders=2, n_adversaries=5, seed=1)
    with pytest.raises(ValueError, match="features"):
        OptimizationProblem(model=model, scaler=scaler, config=bad_cfg,
                            area=SQUARE)
