"""Augmentation pipelines: how the control weights (and thus the augmentation) are built.

A pipeline is anything with ``prepare(ds)`` returning an object whose
``tau0(counts)`` evaluates the augmentation on a resample. ``counts`` holds the
multiplicity of every row in a with-replacement resample (``None`` means the
original data); weighting by multiplicities is exactly equivalent to
materializing the resampled rows, and lets every resample refit its score
model without copying data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .balancing import BalanceProblem, balance_problem_for, entropy_balance, entropy_balance_scores
from .data import ExperimentDataset, Mode, partition
from .errors import ConvergenceError, DataValidationError, ModeError
from .estimators import weighted_tau0
from .scoring import (
    PROB_CLAMP,
    ScoreKind,
    ScoreSet,
    sigmoid,
    fit_logistic,
    ground_truth_scores,
    principal_scores,
    propensity_scores,
    triggering_from_odds,
)


class Prepared(Protocol):
    def tau0(self, counts: np.ndarray | None = None) -> float: ...


class Pipeline(Protocol):
    label: str

    def prepare(self, ds: ExperimentDataset) -> Prepared: ...


@dataclass(frozen=True)
class ScoreSpec:
    """Which score route to use and which columns it may consume.

    ``columns`` are model features for principal/propensity scores, balancing
    columns for entropy balance (the outcome name is allowed), and the single
    true-probability column for ground-truth scores.
    """

    kind: ScoreKind
    columns: tuple[str, ...]
    ridge: float = 0.0
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        object.__setattr__(self, "columns", tuple(self.columns))
        if not self.columns:
            raise DataValidationError(f"{self.kind.value} pipeline needs at least one column")
        if self.kind is ScoreKind.PRINCIPAL_GROUND_TRUTH and len(self.columns) != 1:
            raise ValueError("ground-truth scores take exactly one probability column")

    @classmethod
    def principal(cls, columns: Sequence[str], **kw) -> ScoreSpec:
        return cls(ScoreKind.PRINCIPAL_OUT_OF_SAMPLE, tuple(columns), **kw)

    @classmethod
    def propensity(cls, columns: Sequence[str], **kw) -> ScoreSpec:
        return cls(ScoreKind.PROPENSITY_IN_SAMPLE, tuple(columns), **kw)

    @classmethod
    def ground_truth(cls, column: str, **kw) -> ScoreSpec:
        return cls(ScoreKind.PRINCIPAL_GROUND_TRUTH, (column,), **kw)

    @classmethod
    def entropy(cls, columns: Sequence[str], **kw) -> ScoreSpec:
        return cls(ScoreKind.ENTROPY_BALANCE, tuple(columns), **kw)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        short = {
            ScoreKind.PRINCIPAL_OUT_OF_SAMPLE: "principal",
            ScoreKind.PRINCIPAL_GROUND_TRUTH: "ground-truth",
            ScoreKind.PROPENSITY_IN_SAMPLE: "propensity",
            ScoreKind.ENTROPY_BALANCE: "entropy",
        }[self.kind]
        return f"{short}({','.join(self.columns)})"

    def scores(self, ds: ExperimentDataset) -> ScoreSet:
        """Score set on the full data through the public scoring API."""
        c = ~ds.treated
        if self.kind is ScoreKind.PRINCIPAL_OUT_OF_SAMPLE:
            x = ds.columns(self.columns)
            model = fit_logistic(
                x[ds.treated], ds.triggered[ds.treated], ridge=self.ridge, feature_names=self.columns
            )
            return principal_scores(model, x[c])
        if self.kind is ScoreKind.PROPENSITY_IN_SAMPLE:
            return propensity_scores(ds, self.columns, ridge=self.ridge)
        if self.kind is ScoreKind.PRINCIPAL_GROUND_TRUTH:
            return ground_truth_scores(ds.column(self.columns[0])[c])
        return entropy_balance_scores(ds, self.columns)

    def prepare(self, ds: ExperimentDataset) -> Prepared:
        for col in self.columns:
            ds.column(col)  # raises KeyError early for hidden/missing columns
        if self.kind is ScoreKind.PRINCIPAL_OUT_OF_SAMPLE:
            return _PreparedPrincipal(ds, self)
        if self.kind is ScoreKind.PROPENSITY_IN_SAMPLE:
            return _PreparedPropensity(ds, self)
        if self.kind is ScoreKind.PRINCIPAL_GROUND_TRUTH:
            return _PreparedFixed(ds, self)
        return _PreparedEntropy(ds, self)


class _Base:
    def __init__(self, ds: ExperimentDataset):
        if ds.mode is not Mode.ONE_SIDED:
            ds = ds.replace(mode=Mode.ONE_SIDED, triggered=ds.triggered & ds.treated)
        part = partition(ds)
        if part.t0.size == 0:
            raise DataValidationError("no untriggered treatment units (T0)")
        self.ds = ds
        self.t0 = part.t0
        self.c = part.c
        self.y_t0 = ds.outcome[part.t0]
        self.y_c = ds.outcome[part.c]

    def _tau0(self, control_weights, counts, weights_include_counts=False) -> float:
        if counts is None:
            return weighted_tau0(self.y_t0, self.y_c, control_weights)
        c_counts = None if weights_include_counts else counts[self.c]
        return weighted_tau0(self.y_t0, self.y_c, control_weights, counts[self.t0], c_counts)


class _PreparedPrincipal(_Base):
    def __init__(self, ds, spec: ScoreSpec):
        super().__init__(ds)
        x = self.ds.columns(spec.columns)
        t = self.ds.treated
        self.x_t = x[t]
        self.y_t = self.ds.triggered[t]
        self.x_c = x[~t]
        self.t_rows = np.flatnonzero(t)
        self.ridge = spec.ridge
        self.names = spec.columns
        self.model = fit_logistic(self.x_t, self.y_t, ridge=self.ridge, feature_names=self.names)

    def tau0(self, counts=None) -> float:
        if counts is None:
            model = self.model
        else:
            model = fit_logistic(
                self.x_t,
                self.y_t,
                counts[self.t_rows],
                ridge=self.ridge,
                init=self.model.coefficients,
                check_rank=False,
            )
        w = np.clip(sigmoid(model.linear_predictor(self.x_c)), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return self._tau0(1.0 - w, counts)


class _PreparedPropensity(_Base):
    def __init__(self, ds, spec: ScoreSpec):
        super().__init__(ds)
        x = self.ds.columns(spec.columns)
        t0 = self.ds.treated & ~self.ds.triggered
        pool = t0 | ~self.ds.treated
        self.pool_rows = np.flatnonzero(pool)
        self.x_pool = x[pool]
        self.y_pool = t0[pool]
        self.x_c = x[self.c]
        self.ridge = spec.ridge
        self.model = fit_logistic(self.x_pool, self.y_pool, ridge=self.ridge, feature_names=spec.columns)
        self.n_t = int(self.ds.treated.sum())

    def tau0(self, counts=None) -> float:
        if counts is None:
            model = self.model
            k = self.c.size / self.n_t
        else:
            model = fit_logistic(
                self.x_pool,
                self.y_pool,
                counts[self.pool_rows],
                ridge=self.ridge,
                init=self.model.coefficients,
                check_rank=False,
            )
            k = counts[self.c].sum() / (counts.sum() - counts[self.c].sum())
        odds = np.exp(model.linear_predictor(self.x_c))
        p, _ = triggering_from_odds(odds, k)
        return self._tau0(1.0 - p, counts)


class _PreparedFixed(_Base):
    def __init__(self, ds, spec: ScoreSpec):
        super().__init__(ds)
        p = np.clip(self.ds.column(spec.columns[0])[self.c], PROB_CLAMP, 1.0 - PROB_CLAMP)
        self.v = 1.0 - p

    def tau0(self, counts=None) -> float:
        return self._tau0(self.v, counts)


class _PreparedEntropy(_Base):
    def __init__(self, ds, spec: ScoreSpec):
        super().__init__(ds)
        self.columns = spec.columns
        values = self.ds.columns(spec.columns)
        self.v_t0 = values[self.t0]
        self.v_c = values[self.c]
        full = entropy_balance(balance_problem_for(self.ds, self.columns))
        self.init = full.dual_multipliers if full.converged else None

    def tau0(self, counts=None) -> float:
        if counts is None:
            problem = BalanceProblem(self.v_c, self.v_t0.mean(axis=0))
        else:
            a = counts[self.t0]
            if a.sum() == 0:
                raise ZeroDivisionError("resample has no T0 units")
            problem = BalanceProblem(
                self.v_c, a @ self.v_t0 / a.sum(), base_weights=counts[self.c], initial_multipliers=self.init
            )
        sol = entropy_balance(problem)
        if not sol.converged:
            raise ConvergenceError(
                f"entropy balancing on {list(self.columns)} did not converge "
                f"(violation {sol.max_constraint_violation:.3g})"
            )
        return self._tau0(sol.weights, counts, weights_include_counts=True)


@dataclass(frozen=True)
class TwoSidedSpec:
    """The two-sided augmentation ``mean(T0) - mean(C0)``; needs control trigger labels."""

    label: str = "two-sided"

    def prepare(self, ds: ExperimentDataset) -> Prepared:
        return _PreparedTwoSided(ds)


class _PreparedTwoSided:
    def __init__(self, ds: ExperimentDataset):
        if ds.mode is not Mode.TWO_SIDED:
            raise ModeError("the two-sided augmentation requires two-sided trigger labels")
        part = partition(ds)
        if part.t0.size == 0 or part.c0.size == 0:
            raise DataValidationError("two-sided augmentation needs nonempty T0 and C0")
        self.t0, self.c0 = part.t0, part.c0
        self.y_t0 = ds.outcome[part.t0]
        self.y_c0 = ds.outcome[part.c0]

    def tau0(self, counts=None) -> float:
        if counts is None:
            return float(self.y_t0.mean() - self.y_c0.mean())
        a, b = counts[self.t0], counts[self.c0]
        if a.sum() == 0 or b.sum() == 0:
            raise ZeroDivisionError("resample has empty T0 or C0")
        return float(a @ self.y_t0 / a.sum() - b @ self.y_c0 / b.sum())
