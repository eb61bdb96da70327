import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trigger_cuped.errors import DataValidationError, RankDeficientError, SeparationError
from trigger_cuped.scoring import (
    PROB_CLAMP,
    LogisticModel,
    ScoreKind,
    ScoreSet,
    fit_logistic,
    fit_principal_model,
    ground_truth_scores,
    principal_scores,
    propensity_scores,
    propensity_to_triggering,
    score_conversion,
    triggering_from_odds,
)


def _loglik(b0, b1, x, y):
    # independent of the package: log-likelihood written out termwise
    eta = b0 + b1 * x
    return float(np.sum(y * eta - np.log1p(np.exp(eta))))


def _grid_argmax(x, y, lo=-10.0, hi=10.0, points=81, rounds=8):
    c0 = c1 = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    best = (-math.inf, c0, c1)
    for _ in range(rounds):
        for b0 in np.linspace(c0 - half, c0 + half, points):
            for b1 in np.linspace(c1 - half, c1 + half, points):
                ll = _loglik(b0, b1, x, y)
                if ll > best[0]:
                    best = (ll, b0, b1)
        _, c0, c1 = best
        half *= 4.0 / points
    return best


def test_noisy_threshold_matches_grid_search():
    gen = np.random.default_rng(11)
    x = gen.normal(size=1000)
    y = (x + gen.normal(scale=0.8, size=1000) > 0).astype(float)
    model = fit_logistic(x, y)
    assert model.converged
    assert model.coefficients[1] > 0
    ll_grid, b0, b1 = _grid_argmax(x, y)
    ll_model = _loglik(*model.coefficients, x, y)
    assert abs(ll_model - ll_grid) < 1e-4
    assert ll_model >= ll_grid - 1e-9
    assert model.final_deviance == pytest.approx(-2 * ll_model, rel=1e-10)


def test_uninformative_labels_give_zero_coefficients():
    # symmetric design: MLE is exactly zero
    x = np.array([[-1.0, 2.0], [-1.0, 2.0], [1.0, -2.0], [1.0, -2.0], [0.5, 0.0], [0.5, 0.0]])
    y = np.array([0, 1, 0, 1, 0, 1.0])
    model = fit_logistic(x[:, :1], y)
    assert np.allclose(model.coefficients, 0.0, atol=1e-10)


def test_random_uninformative_labels_near_zero():
    gen = np.random.default_rng(3)
    x = gen.normal(size=(4000, 2))
    y = gen.integers(0, 2, 4000).astype(float)
    model = fit_logistic(x, y)
    # each coefficient has SE about 2/sqrt(n) = 0.032
    assert np.all(np.abs(model.coefficients) < 4 * 2 / math.sqrt(4000))


def test_perfect_separation_raises_with_direction():
    x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError) as info:
        fit_logistic(x, y)
    assert info.value.direction[0] > 0


def test_rank_deficient_design():
    gen = np.random.default_rng(0)
    a = gen.normal(size=50)
    x = np.column_stack([a, 2 * a])
    y = (gen.random(50) < 0.5).astype(float)
    with pytest.raises(RankDeficientError):
        fit_logistic(x, y)
    ridge = fit_logistic(x, y, ridge=1.0)
    assert ridge.converged


def test_label_checks():
    with pytest.raises(DataValidationError):
        fit_logistic(np.arange(4.0), np.ones(4))
    with pytest.raises(ValueError):
        fit_logistic(np.arange(4.0), np.array([0, 1, 2, 1.0]))
    with pytest.raises(ValueError):
        fit_logistic(np.arange(4.0), np.array([0, 1.0]))


def test_frequency_weights_equal_duplication():
    gen = np.random.default_rng(5)
    x = gen.normal(size=(200, 2))
    y = (gen.random(200) < 0.3).astype(float)
    counts = gen.integers(0, 3, 200)
    weighted = fit_logistic(x, y, counts.astype(float))
    dup = fit_logistic(np.repeat(x, counts, axis=0), np.repeat(y, counts))
    assert np.allclose(weighted.coefficients, dup.coefficients, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(30, 300), scale=st.floats(0.1, 3.0))
def test_irls_deviance_is_monotone(seed, n, scale):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, 2))
    eta = scale * (x[:, 0] - 0.5 * x[:, 1]) + gen.normal(size=n)
    y = (eta > 0).astype(float)
    if y.min() == y.max():
        return
    try:
        model = fit_logistic(x, y, init=np.array([1.0, -2.0, 2.0]))
    except SeparationError:
        return
    hist = np.array(model.deviance_history)
    assert np.all(np.diff(hist) <= 1e-9 * np.abs(hist[:-1]))


def test_principal_scores_identity_cases():
    zero = LogisticModel(np.zeros(3), True, 0, 0.0)
    s = principal_scores(zero, np.ones((5, 2)))
    assert s.kind is ScoreKind.PRINCIPAL_OUT_OF_SAMPLE
    assert np.all(s.control_weights == 0.5)
    model = LogisticModel(np.array([0.0, 1.0, 0.0]), True, 0, 0.0)
    # coefficients are intercept first: the unit slope multiplies x_1
    assert principal_scores(model, [[0.0, 1.0]]).control_weights[0] == 0.5
    assert principal_scores(model, [[1.0, 0.0]]).control_weights[0] == pytest.approx(1 / (1 + math.exp(-1)))
    with pytest.raises(ValueError):
        principal_scores(model, np.ones((2, 3)))


def test_principal_scores_are_clamped():
    model = LogisticModel(np.array([50.0, 0.0]), True, 0, 0.0)
    w = principal_scores(model, [[0.0], [1.0]]).control_weights
    assert np.all(w == 1 - PROB_CLAMP)


def test_dgp_principal_mean_score(small_one):
    ds = small_one
    model = fit_principal_model(ds, ["x_1", "x_2"])
    w = principal_scores(model, ds.columns(["x_1", "x_2"])[~ds.treated]).control_weights
    se = math.sqrt(0.05 * 0.95 / ds.treated.sum()) + math.sqrt(0.05 * 0.95 / (~ds.treated).sum())
    assert abs(w.mean() - 0.05) < 3 * se


def test_score_conversion_examples():
    assert score_conversion(0.0, 1.0) == 0.5
    # direct evaluation: 1 / (1 + 1/3 + (1/3)(0.05/0.95))
    expected = 1.0 / (1.0 + 1.0 / 3.0 + (1.0 / 3.0) * (0.05 / 0.95))
    assert score_conversion(0.05, 1 / 3) == pytest.approx(expected, rel=1e-15)
    # 1 / (4/3 + 1/57) = 57/77; the commonly quoted 0.74025 is this value truncated
    assert score_conversion(0.05, 1 / 3) == pytest.approx(57 / 77, rel=1e-14)
    assert score_conversion(0.05, 1 / 3) == pytest.approx(0.74025, abs=1e-5)
    for p in (0.0, 0.05, 0.5, 0.99):
        assert propensity_to_triggering(score_conversion(p, 0.7), 0.7) == pytest.approx(p, abs=1e-12)
    with pytest.raises(ValueError):
        score_conversion(1.0, 1.0)
    with pytest.raises(ValueError):
        score_conversion(0.2, 0.0)


def test_score_equivalence_ratio():
    gen = np.random.default_rng(8)
    p = gen.uniform(0.0, 0.95, 100)
    for k in (1 / 3, 1.0, 4.2):
        e = score_conversion(p, k)
        ratio = (e / (1 - e)) / (1 - p)
        assert ratio.max() / ratio.min() - 1 < 1e-12


def test_ground_truth_through_propensity_scale_is_identity():
    gen = np.random.default_rng(9)
    p = gen.uniform(0.01, 0.2, 500)
    k = 1 / 3
    e = score_conversion(p, k)
    back, diag = triggering_from_odds(e / (1 - e), k)
    assert not diag["k_rescaled"]
    assert np.allclose(back, p, atol=1e-12)
    assert np.allclose(1 - back, 1 - ground_truth_scores(p).control_weights, atol=1e-12)


def test_odds_rescaling_keeps_proportions():
    odds = np.array([0.5, 2.0, 8.0])
    p, diag = triggering_from_odds(odds, 1.0)
    assert diag["k_rescaled"]
    comp = 1 - p
    assert np.allclose(comp / comp[0], odds / odds[0], rtol=1e-12)
    assert p.min() >= PROB_CLAMP * 0.999


def test_propensity_no_signal_gives_constant_weights():
    gen = np.random.default_rng(2)
    from trigger_cuped.data import ExperimentDataset

    n = 20000
    treated = np.arange(n) >= n // 4
    trig = treated & (gen.random(n) < 0.05)
    ds = ExperimentDataset(treated, trig, gen.normal(size=(n, 2)), gen.normal(size=n), ("a", "b"))
    s = propensity_scores(ds)
    assert s.kind is ScoreKind.PROPENSITY_IN_SAMPLE
    t0 = (treated & ~trig).sum()
    e = 1 / (1 + 1 / np.exp(s.model.linear_predictor(ds.covariates[~treated])))
    assert np.allclose(e, t0 / (t0 + (~treated).sum()), atol=0.02)
    w = s.control_weights
    assert w.std() / (1 - w).mean() < 0.05


def test_scoreset_validation():
    with pytest.raises(ValueError):
        ScoreSet(ScoreKind.PRINCIPAL_GROUND_TRUTH, [0.5, np.nan])
    with pytest.raises(ValueError):
        ScoreSet(ScoreKind.PRINCIPAL_GROUND_TRUTH, [0.0, 0.5])
    with pytest.raises(ValueError):
        ScoreSet(ScoreKind.ENTROPY_BALANCE, [-0.1, 1.1])
    s = ScoreSet(ScoreKind.ENTROPY_BALANCE, [0.25, 0.75])
    assert s.augmentation_weights().tolist() == [0.25, 0.75]
    assert ScoreSet(ScoreKind.PRINCIPAL_GROUND_TRUTH, [0.25]).augmentation_weights().tolist() == [0.75]
