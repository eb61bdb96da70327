import math

import numpy as np
import pytest

from trigger_cuped import Rng, ScoreSpec
from trigger_cuped.errors import NumericalError, SeparationError
from trigger_cuped.inference import (
    MIN_B,
    TestMethod,
    bootstrap,
    bootstrap_many,
    estimate_one_sided,
    estimate_theta,
    mean_zero_test,
    variance_trg1,
    wald_test,
)
from trigger_cuped.estimators import naive_delta


class ConstantStub:
    label = "stub"

    def __init__(self, value=0.0):
        self.value = value

    def prepare(self, ds):
        return self

    def tau0(self, counts=None):
        return self.value


class ExplodingStub(ConstantStub):
    def tau0(self, counts=None):
        if counts is not None and counts[0] == 2:
            raise SeparationError("boom", direction=np.ones(1))
        return float(0 if counts is None else counts[:3].sum())


def test_theta_hand_examples():
    assert estimate_theta([1.0, 3.0], [2.0, 4.0]) == pytest.approx(1.0, abs=1e-15)
    d = np.array([0.3, -1.0, 2.0, 0.7])
    assert estimate_theta(d, d) == pytest.approx(1.0, abs=1e-15)
    gen = np.random.default_rng(1)
    assert abs(estimate_theta(gen.normal(size=20000), gen.normal(size=20000))) < 0.03
    assert estimate_theta([1.0, 2.0, 3.0], [5.0, 5.0, 5.0]) == 0.0


def test_variance_hand_examples():
    assert variance_trg1(np.array([[4.0, 2.0], [2.0, 4.0]])) == pytest.approx(3.0, abs=1e-15)
    assert variance_trg1(np.array([[4.0, 0.0], [0.0, 9.0]])) == 4.0
    assert variance_trg1(np.array([[4.0, 6.0], [6.0, 9.0]])) == pytest.approx(0.0, abs=1e-15)
    assert variance_trg1(np.array([[4.0, 0.0], [0.0, 0.0]])) == 4.0
    # numerically negative is floored
    assert variance_trg1(np.array([[1.0, 1.0 + 1e-9], [1.0 + 1e-9, 1.0]])) == 0.0


def test_variance_invariant_to_rescaling_tau_draws():
    gen = np.random.default_rng(2)
    d = gen.normal(size=300)
    t = 0.6 * d + gen.normal(size=300)
    base = variance_trg1(np.cov(d, t))
    for c in (1e-4, 0.5, 37.0):
        assert variance_trg1(np.cov(d, c * t)) == pytest.approx(base, rel=1e-10)


def test_constant_stub_falls_back_to_no_reduction(small_one):
    boot = bootstrap(small_one, ConstantStub(), 60, Rng(3))
    assert boot.theta_hat == 0.0
    assert boot.var_trg1_hat == pytest.approx(boot.cov_matrix[0, 0], rel=1e-15)
    assert boot.diagnostics["theta_degenerate"]


def test_constant_stub_test_is_non_rejection(small_one):
    res = mean_zero_test(small_one, ConstantStub(), rng=Rng(3), b=60)
    assert (res.wald_z, res.p_value) == (0.0, 1.0)
    assert res.diagnostics["degenerate_se"]


def test_wald_arithmetic():
    r = wald_test(0.02, 0.01, TestMethod.DELTA)
    assert r.wald_z == pytest.approx(2.0)
    assert r.p_value == pytest.approx(0.0455002638963584, rel=1e-12)


def test_bootstrap_is_deterministic_and_worker_independent(small_one):
    spec = ScoreSpec.principal(["x_1", "x_2"])
    a = bootstrap(small_one, spec, 50, Rng(5))
    b = bootstrap(small_one, spec, 50, Rng(5))
    c = bootstrap_many(small_one, {"p": spec}, 50, Rng(5), workers=3)["p"]
    for other in (b, c):
        assert np.array_equal(a.delta_y_draws, other.delta_y_draws)
        assert np.array_equal(a.tau0_draws, other.tau0_draws)
        assert a.theta_hat == other.theta_hat and a.var_trg1_hat == other.var_trg1_hat
    assert a.to_dict()["seed"] == 5
    assert "tau0_draws" not in a.to_dict()
    assert len(a.to_dict(include_draws=True)["tau0_draws"]) == 50


def test_bootstrap_minimum_b(small_one):
    with pytest.raises(ValueError):
        bootstrap(small_one, ConstantStub(), MIN_B - 1, Rng(1))


def test_errors_carry_resample_index(small_one):
    with pytest.raises(NumericalError) as info:
        bootstrap(small_one, ExplodingStub(), 200, Rng(8))
    assert info.value.resample_index is not None
    assert f"resample {info.value.resample_index}" in str(info.value)


def test_stratified_resamples_keep_arm_sizes(small_one):
    class Recorder(ConstantStub):
        seen = []

        def tau0(self, counts=None):
            if counts is not None:
                self.seen.append(counts[small_one.treated].sum())
            return 0.0

    rec = Recorder()
    bootstrap(small_one, rec, 50, Rng(1), stratified=True)
    assert set(rec.seen) == {small_one.treated.sum()}


def test_tiny_dataset_redraws_empty_groups():
    from trigger_cuped.data import ExperimentDataset

    ds = ExperimentDataset([1, 1, 1, 0, 0], [1, 1, 0, 0, 0], np.zeros((5, 0)), [1.0, 2, 3, 4, 5], ())
    boot = bootstrap(ds, ConstantStub(), 200, Rng(0))
    assert boot.diagnostics["redraws"] > 0


def test_cuped_dominance_and_theta_argmin(small_one):
    report, boot = estimate_one_sided(small_one, ScoreSpec.principal(["x_1", "x_2"]), 100, Rng(4))
    assert boot.var_trg1_hat <= boot.cov_matrix[0, 0]
    assert report.standard_error == pytest.approx(math.sqrt(boot.var_trg1_hat))

    def var_at(theta):
        return np.var(boot.delta_y_draws - theta * boot.tau0_draws, ddof=1)

    for f in (0.9, 1.1):
        assert var_at(f * boot.theta_hat) >= var_at(boot.theta_hat)
    assert var_at(boot.theta_hat) == pytest.approx(boot.var_trg1_hat, rel=1e-9)
    assert report.itt_estimate == pytest.approx(
        naive_delta(small_one).itt_estimate - boot.theta_hat * report.augmentation_value, abs=1e-15
    )


def test_delta_and_bootstrap_standard_errors_agree(small_one):
    spec = ScoreSpec.principal(["x_1", "x_2"])
    d = mean_zero_test(small_one, spec, TestMethod.DELTA)
    b = mean_zero_test(small_one, spec, TestMethod.BOOTSTRAP, Rng(20230806), b=200)
    assert d.tau0_hat == pytest.approx(b.tau0_hat, abs=1e-12)
    assert abs(d.se_tau0 / b.se_tau0 - 1) < 0.15
    assert d.wald_z == pytest.approx(d.tau0_hat / d.se_tau0)
    assert 0.0 <= b.p_value <= 1.0


def test_delta_method_needs_score_pipeline(small_one):
    from trigger_cuped.errors import DataValidationError

    with pytest.raises(DataValidationError):
        mean_zero_test(small_one, ConstantStub(), TestMethod.DELTA)
