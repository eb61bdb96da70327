import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trigger_cuped.balancing import (
    BalanceProblem,
    BalanceSolution,
    balance_problem_for,
    balance_weights_to_scoreset,
    entropy_balance,
    entropy_balance_scores,
)
from trigger_cuped.errors import ConvergenceError, InfeasibleBalanceError
from trigger_cuped.estimators import augmentation_tau0
from trigger_cuped.scoring import ScoreKind


def test_target_at_control_mean_gives_uniform_weights():
    x = np.array([[0.0, 1.0], [1.0, 3.0], [2.0, 2.0], [5.0, 0.0]])
    sol = entropy_balance(BalanceProblem(x, x.mean(axis=0)))
    assert sol.converged
    assert np.allclose(sol.weights, 0.25, atol=1e-14)
    s = balance_weights_to_scoreset(sol)
    assert s.kind is ScoreKind.ENTROPY_BALANCE
    assert len(s) == 4
    assert np.ptp(s.control_weights) < 1e-14


def _grid_weights(x, target):
    # oracle: 1-D search for lambda with w ~ exp(lam * x), zooming on the mean gap
    def gap(lam):
        w = np.exp(lam * (x - x.max()))
        return abs(w @ x / w.sum() - target)

    lo, hi = -50.0, 50.0
    for _ in range(12):
        grid = np.linspace(lo, hi, 201)
        best = grid[np.argmin([gap(g) for g in grid])]
        step = grid[1] - grid[0]
        lo, hi = best - 2 * step, best + 2 * step
    w = np.exp(best * (x - x.max()))
    return w / w.sum()


def test_three_units_match_grid_search():
    x = np.array([0.0, 1.0, 2.0])
    sol = entropy_balance(BalanceProblem(x, [1.5]))
    assert sol.converged
    assert np.allclose(sol.weights, _grid_weights(x, 1.5), atol=1e-6)
    assert sol.weights @ x == pytest.approx(1.5, abs=1e-10)
    # the weights have the exponential-tilt form: successive ratios are equal
    r = sol.weights[1:] / sol.weights[:-1]
    assert r[0] == pytest.approx(r[1], rel=1e-9)


def test_target_outside_hull_is_infeasible():
    with pytest.raises(InfeasibleBalanceError):
        entropy_balance(BalanceProblem(np.array([0.0, 1.0, 2.0]), [3.0]))


def test_target_on_hull_boundary_concentrates_on_face():
    sol = entropy_balance(BalanceProblem(np.array([0.0, 1.0, 2.0, 2.0]), [2.0]))
    assert sol.converged
    assert sol.max_constraint_violation <= 1e-9
    assert sol.weights[2:].sum() == pytest.approx(1.0, abs=1e-9)


def test_constant_column():
    x = np.column_stack([np.arange(5.0), np.ones(5)])
    sol = entropy_balance(BalanceProblem(x, [2.5, 1.0]))
    assert sol.converged
    with pytest.raises(InfeasibleBalanceError):
        entropy_balance(BalanceProblem(x, [2.5, 1.5]))


def test_problem_shape_checks():
    with pytest.raises(ValueError):
        BalanceProblem(np.zeros((4, 2)), [1.0])
    with pytest.raises(ValueError):
        entropy_balance(BalanceProblem(np.array([[0.0], [1.0]]), [0.5], base_weights=[1.0, 0.0]))


def test_unconverged_solution_rejected():
    sol = BalanceSolution(np.array([0.5, 0.5]), np.zeros(1), False, 1e-3)
    with pytest.raises(ConvergenceError):
        balance_weights_to_scoreset(sol)


def test_iteration_budget_returns_best_iterate():
    gen = np.random.default_rng(1)
    x = gen.normal(size=(200, 2))
    sol = entropy_balance(BalanceProblem(x, [1.2, -0.8], max_iterations=1))
    assert not sol.converged
    assert sol.iterations == 1
    assert sol.max_constraint_violation > 0


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    m=st.integers(1, 4),
    shift=st.floats(-0.8, 0.8),
)
def test_moment_matching_and_normalization(seed, m, shift):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(300, m)) * gen.uniform(0.1, 10, m) + gen.uniform(-5, 5, m)
    target = x.mean(axis=0) + shift * x.std(axis=0)
    sol = entropy_balance(BalanceProblem(x, target))
    assert sol.converged
    assert np.all(sol.weights >= 0)
    assert abs(sol.weights.sum() - 1) < 1e-12
    assert np.max(np.abs(sol.weights @ x - target)) <= 1e-8
    hist = np.array(sol.objective_history)
    assert np.all(np.diff(hist) <= 1e-12 * (1 + np.abs(hist[:-1])))
    # weights follow exp(-mult . x) up to normalization
    logw = np.log(sol.weights)
    fitted = -x @ sol.dual_multipliers
    assert np.allclose(logw - fitted, (logw - fitted).mean(), atol=1e-8)


def test_base_weights_equal_duplication():
    gen = np.random.default_rng(4)
    x = gen.normal(size=(50, 2))
    counts = gen.integers(0, 4, 50)
    target = np.array([0.3, -0.2])
    weighted = entropy_balance(BalanceProblem(x, target, base_weights=counts.astype(float)))
    dup = entropy_balance(BalanceProblem(np.repeat(x, counts, axis=0), target))
    per_row = np.repeat(weighted.weights / np.maximum(counts, 1), counts)
    assert np.allclose(per_row, dup.weights, atol=1e-12)


def test_warm_start_reaches_same_solution():
    gen = np.random.default_rng(6)
    x = gen.normal(size=(400, 3))
    target = np.array([0.2, 0.1, -0.3])
    cold = entropy_balance(BalanceProblem(x, target))
    warm = entropy_balance(BalanceProblem(x, target, initial_multipliers=cold.dual_multipliers * 0.9))
    assert warm.converged
    assert warm.iterations <= cold.iterations
    assert np.allclose(warm.weights, cold.weights, atol=1e-10)


def test_problem_for_dataset_targets_t0(small_one):
    prob = balance_problem_for(small_one, ["x_1", "x_2"])
    t0 = small_one.treated & ~small_one.triggered
    assert np.allclose(prob.target_means, small_one.columns(["x_1", "x_2"])[t0].mean(axis=0))
    assert prob.control_covariates.shape[0] == (~small_one.treated).sum()
    sol = entropy_balance(prob)
    assert sol.max_constraint_violation <= 1e-8


def test_balancing_on_outcome_zeroes_augmentation(small_one):
    s = entropy_balance_scores(small_one, ["Y"])
    assert abs(augmentation_tau0(small_one, s)) <= 1e-10
