"""Point estimators of the intent-to-treat effect.

Every function here is deterministic arithmetic on a dataset. The CUPED
variants take ``theta`` explicitly; estimating it (and the standard error of
the one- and two-sided CUPED estimators) is the job of
:mod:`trigger_cuped.inference`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ExperimentDataset, Mode, group_summary, partition
from .errors import DataValidationError, ModeError, RankDeficientError
from .scoring import ScoreSet


class Method(str, enum.Enum):
    NAIVE = "naive"
    TRIGGER_DILUTE = "trigger-dilute"
    CUPED_TWO_SIDED = "cuped-two-sided"
    CUPED_ONE_SIDED = "cuped-one-sided"

    @property
    def is_cuped(self) -> bool:
        return self in (Method.CUPED_TWO_SIDED, Method.CUPED_ONE_SIDED)


@dataclass(frozen=True)
class EstimateReport:
    """An ITT estimate with its standard error.

    ``standard_error`` is None for CUPED estimates built with a pinned theta
    and no variance estimate yet.
    """

    method: Method
    itt_estimate: float
    standard_error: float | None = None
    theta: float | None = None
    augmentation_value: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        method = Method(self.method)
        object.__setattr__(self, "method", method)
        if self.standard_error is not None and not self.standard_error >= 0:
            raise ValueError("standard error must be nonnegative")
        if method.is_cuped != (self.theta is not None):
            raise ValueError("theta is set exactly for CUPED methods")

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "itt_estimate": self.itt_estimate,
            "standard_error": self.standard_error,
            "theta": self.theta,
            "augmentation_value": self.augmentation_value,
            "diagnostics": self.diagnostics,
        }


def _require_two_sided(ds: ExperimentDataset, what: str) -> None:
    if ds.mode is not Mode.TWO_SIDED:
        raise ModeError(f"{what} requires two-sided trigger labels (control trigger status)")


def naive_delta(ds: ExperimentDataset) -> EstimateReport:
    """Difference in means with the unpooled closed-form standard error."""
    t = group_summary(ds.outcome[ds.treated])
    c = group_summary(ds.outcome[~ds.treated])
    var = t.sample_variance / t.n + c.sample_variance / c.n
    return EstimateReport(
        Method.NAIVE,
        t.mean - c.mean,
        math.sqrt(var),
        diagnostics={"n_treatment": t.n, "n_control": c.n},
    )


def trigger_dilute(ds: ExperimentDataset) -> EstimateReport:
    """Triggered-subgroup effect scaled by the triggering rate.

    With ``gamma = (n_T1 + n_C1) / n`` and ``d = mean(T1) - mean(C1)`` the
    variance is ``(s2_T1/n_T1 + s2_C1/n_C1) gamma^2 + gamma (1 - gamma) d^2 / n``.
    """
    _require_two_sided(ds, "trigger-dilute")
    part = partition(ds)
    if part.t1.size < 2 or part.c1.size < 2:
        raise DataValidationError("trigger-dilute needs at least two triggered units per arm")
    t1 = group_summary(ds.outcome[part.t1])
    c1 = group_summary(ds.outcome[part.c1])
    n = ds.n
    gamma = (t1.n + c1.n) / n
    diff = t1.mean - c1.mean
    var = (t1.sample_variance / t1.n + c1.sample_variance / c1.n) * gamma**2
    var += gamma * (1.0 - gamma) / n * diff**2
    return EstimateReport(
        Method.TRIGGER_DILUTE,
        diff * gamma,
        math.sqrt(var),
        diagnostics={"gamma": gamma, "triggered_effect": diff, "n_t1": t1.n, "n_c1": c1.n},
    )


def weighted_tau0(y_t0, y_c, control_weights, t0_counts=None, c_counts=None) -> float:
    """T0 mean minus the weighted control mean; optional row multiplicities."""
    if t0_counts is None:
        a = float(np.mean(y_t0))
    else:
        a = float(np.dot(t0_counts, y_t0) / t0_counts.sum())
    v = control_weights if c_counts is None else control_weights * c_counts
    total = float(v.sum())
    if not total > 0:
        raise ZeroDivisionError("total control weight is zero")
    return a - float(np.dot(v, y_c)) / total


def augmentation_tau0(ds: ExperimentDataset, scores: ScoreSet) -> float:
    """The one-sided augmentation: hard T0 mean minus soft-weighted control mean.

    Probability scores weight control unit ``i`` by ``1 - w_i``; entropy-balance
    weights are used directly. Only ratios of the weights matter.
    """
    part = partition(ds)
    if part.t0.size == 0:
        raise DataValidationError("no untriggered treatment units (T0)")
    if len(scores) != part.c.size:
        raise ValueError(f"{len(scores)} scores for {part.c.size} control units")
    return weighted_tau0(ds.outcome[part.t0], ds.outcome[part.c], scores.augmentation_weights())


def delta_zero(ds: ExperimentDataset) -> float:
    """Mean outcome difference between T0 and C0 (two-sided data only)."""
    _require_two_sided(ds, "the two-sided augmentation")
    part = partition(ds)
    if part.t0.size == 0 or part.c0.size == 0:
        raise DataValidationError("two-sided augmentation needs nonempty T0 and C0")
    return float(ds.outcome[part.t0].mean() - ds.outcome[part.c0].mean())


def _delta(ds: ExperimentDataset) -> float:
    return float(ds.outcome[ds.treated].mean() - ds.outcome[~ds.treated].mean())


def cuped_one_sided(
    ds: ExperimentDataset, scores: ScoreSet, theta: float, standard_error: float | None = None
) -> EstimateReport:
    tau0 = augmentation_tau0(ds, scores)
    delta = _delta(ds)
    return EstimateReport(
        Method.CUPED_ONE_SIDED,
        delta - theta * tau0,
        standard_error,
        theta=float(theta),
        augmentation_value=tau0,
        diagnostics={"delta_y": delta, "score_kind": scores.kind.value},
    )


def cuped_two_sided(ds: ExperimentDataset, theta: float, standard_error: float | None = None) -> EstimateReport:
    d0 = delta_zero(ds)
    delta = _delta(ds)
    return EstimateReport(
        Method.CUPED_TWO_SIDED,
        delta - theta * d0,
        standard_error,
        theta=float(theta),
        augmentation_value=d0,
        diagnostics={"delta_y": delta},
    )


@dataclass(frozen=True, eq=False)
class ResidualizedDataset:
    base: ExperimentDataset
    fit_coefficients: np.ndarray
    covariate_names: tuple[str, ...]


def residualize(ds: ExperimentDataset, covariate_subset: Sequence[str]) -> ResidualizedDataset:
    """Replace outcomes by OLS residuals on pre-assignment covariates, fit on both arms pooled."""
    names = tuple(covariate_subset)
    if not names:
        raise ValueError("residualize needs at least one covariate")
    if ds.outcome_name in names:
        raise ValueError("cannot residualize the outcome on itself")
    x = np.column_stack([np.ones(ds.n), ds.columns(names)])
    coef, _, rank, _ = np.linalg.lstsq(x, ds.outcome, rcond=None)
    if rank < x.shape[1]:
        raise RankDeficientError(f"residualization design on {list(names)} is rank deficient")
    resid = ds.outcome - x @ coef
    return ResidualizedDataset(ds.with_outcome(resid), coef, names)
