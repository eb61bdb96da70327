"""Triggering-probability weights for control units.

Three routes produce a :class:`ScoreSet`:

* principal scores: logistic regression of the trigger flag on covariates,
  fitted on the treatment arm and predicted out of sample on control;
* propensity scores: logistic regression of T0-membership over T0 and C,
  mapped back to the triggering-probability scale;
* ground-truth probabilities (simulation only).

Entropy-balancing weights live in :mod:`trigger_cuped.balancing`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ExperimentDataset
from .errors import DataValidationError, RankDeficientError, SeparationError

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
PROB_CLAMP = 1e-6
SEPARATION_NORM = 1e4
# weighted deviance below this means the labels are reproduced exactly
_PERFECT_FIT_DEVIANCE = 1e-6
_MAX_HALVINGS = 30
_RANK_RCOND = 1e-12


@dataclass(frozen=True, eq=False)
class LogisticModel:
    """A fitted logistic regression; ``coefficients[0]`` is the intercept."""

    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_deviance: float
    deviance_history: tuple[float, ...] = ()
    feature_names: tuple[str, ...] | None = None

    @property
    def n_features(self) -> int:
        return self.coefficients.size - 1

    def linear_predictor(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got {x.shape[1]}")
        return self.coefficients[0] + x @ self.coefficients[1:]

    def predict_proba(self, features, eps: float = PROB_CLAMP) -> np.ndarray:
        return np.clip(sigmoid(self.linear_predictor(features)), eps, 1.0 - eps)

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "feature_names": list(self.feature_names) if self.feature_names else None,
            "converged": self.converged,
            "iterations": self.iterations,
            "final_deviance": self.final_deviance,
        }


def _softplus(eta):
    return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))


def sigmoid(eta):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-eta))


def _deviance(eta, y, w) -> float:
    # -2 log-lik of a Bernoulli model on the logit scale
    return 2.0 * float(np.dot(w, _softplus(eta) - y * eta))


def fit_logistic(
    features,
    labels,
    sample_weight=None,
    *,
    tol: float = IRLS_TOL,
    max_iter: int = IRLS_MAX_ITER,
    ridge: float = 0.0,
    init=None,
    feature_names: Sequence[str] | None = None,
    check_rank: bool = True,
) -> LogisticModel:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Each Newton step is step-halved until the (penalized) deviance does not
    increase, so the recorded deviance history is non-increasing.

    Args:
        features: ``(n, m)`` design without intercept column.
        labels: 0/1 vector.
        sample_weight: Optional nonnegative frequency weights (bootstrap counts).
        tol: Relative deviance change declaring convergence.
        ridge: L2 penalty on the slopes (not the intercept).
        init: Starting coefficients, e.g. a previous fit for warm starts.
        check_rank: Verify the weighted design has full column rank first.

    Raises:
        SeparationError: The coefficient norm exceeds ``SEPARATION_NORM`` or the
            labels are reproduced exactly; carries the offending direction.
        RankDeficientError: The weighted design is singular.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(labels, dtype=float).ravel()
    n, m = x.shape
    if y.size != n:
        raise ValueError(f"{n} feature rows but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float).ravel()
    if w.size != n or np.any(w < 0):
        raise ValueError("sample_weight must be nonnegative with one entry per row")
    pos = float(np.dot(w, y))
    total = float(w.sum())
    if pos <= 0 or pos >= total:
        raise DataValidationError("logistic fit needs at least one positive and one negative label")

    # column-major design: row j is regressor j, row 0 the intercept
    design = np.empty((m + 1, n))
    design[0] = 1.0
    design[1:] = x.T
    penalty = np.full(m + 1, float(ridge))
    penalty[0] = 0.0

    if check_rank and ridge <= 0:
        gram = (design * w) @ design.T
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= _RANK_RCOND * max(eig[-1], 1e-300):
            raise RankDeficientError("design matrix is rank deficient")

    if init is None:
        beta = np.zeros(m + 1)
        beta[0] = np.log(pos / (total - pos))
    else:
        beta = np.array(init, dtype=float).ravel().copy()
        if beta.size != m + 1:
            raise ValueError("init has the wrong length")

    def objective(eta, b):
        return _deviance(eta, y, w) + float(np.dot(penalty, b * b))

    eta = beta @ design
    dev = objective(eta, beta)
    history = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = sigmoid(eta)
        hess = (design * (w * mu * (1.0 - mu))) @ design.T
        hess[np.diag_indices_from(hess)] += penalty
        grad = design @ (w * (y - mu)) - penalty * beta
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise RankDeficientError("singular IRLS system") from None
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta + t * step
            cand_eta = cand @ design
            cand_dev = objective(cand_eta, cand)
            if cand_dev <= dev:
                break
            t *= 0.5
        else:
            # no descent possible: we are at the optimum to machine precision
            converged = True
            break
        change = abs(dev - cand_dev) / (abs(cand_dev) + 0.1)
        beta, eta, dev = cand, cand_eta, cand_dev
        history.append(dev)
        norm = float(np.linalg.norm(beta[1:]))
        if norm > SEPARATION_NORM:
            raise SeparationError(
                f"coefficient norm {norm:.3g} exceeds {SEPARATION_NORM:g}: labels are separated",
                direction=beta[1:] / norm,
            )
        if change < tol:
            converged = True
            break

    if ridge <= 0 and dev < _PERFECT_FIT_DEVIANCE:
        norm = float(np.linalg.norm(beta[1:]))
        direction = beta[1:] / norm if norm > 0 else beta[1:]
        raise SeparationError("labels are perfectly separated by the covariates", direction=direction)

    return LogisticModel(
        coefficients=beta,
        converged=converged,
        iterations=it,
        final_deviance=dev,
        deviance_history=tuple(history),
        feature_names=tuple(feature_names) if feature_names is not None else None,
    )


# -- score sets ---------------------------------------------------------------


class ScoreKind(str, enum.Enum):
    PRINCIPAL_OUT_OF_SAMPLE = "principal-out-of-sample"
    PRINCIPAL_GROUND_TRUTH = "principal-ground-truth"
    PROPENSITY_IN_SAMPLE = "propensity-in-sample"
    ENTROPY_BALANCE = "entropy-balance"

    @property
    def is_probability(self) -> bool:
        return self is not ScoreKind.ENTROPY_BALANCE


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """Per-control-unit weights, in control-row order.

    For probability kinds ``control_weights`` holds triggering probabilities
    ``w_i`` and the augmentation weights control units by ``1 - w_i``. For
    ``ENTROPY_BALANCE`` the weights are used as-is.
    """

    kind: ScoreKind
    control_weights: np.ndarray
    model: LogisticModel | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = ScoreKind(self.kind)
        w = np.asarray(self.control_weights, dtype=float).ravel()
        if not np.all(np.isfinite(w)):
            raise ValueError("score weights must be finite")
        if kind.is_probability:
            if np.any(w < PROB_CLAMP * (1 - 1e-9)) or np.any(w > 1 - PROB_CLAMP * (1 - 1e-9)):
                raise ValueError("probability scores must lie in [eps, 1 - eps]")
        elif np.any(w < 0):
            raise ValueError("balance weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "control_weights", w)

    def __len__(self) -> int:
        return self.control_weights.size

    def augmentation_weights(self) -> np.ndarray:
        """Weights applied to control outcomes in the augmentation's second term."""
        if self.kind.is_probability:
            return 1.0 - self.control_weights
        return self.control_weights


def principal_scores(model: LogisticModel, control_features, eps: float = PROB_CLAMP) -> ScoreSet:
    """Out-of-sample triggering probabilities for control units."""
    w = model.predict_proba(control_features, eps=eps)
    return ScoreSet(ScoreKind.PRINCIPAL_OUT_OF_SAMPLE, w, model=model)


def ground_truth_scores(probabilities, eps: float = PROB_CLAMP) -> ScoreSet:
    w = np.clip(np.asarray(probabilities, dtype=float), eps, 1.0 - eps)
    return ScoreSet(ScoreKind.PRINCIPAL_GROUND_TRUTH, w)


def fit_principal_model(
    ds: ExperimentDataset, columns: Sequence[str] | None = None, **fit_kwargs
) -> LogisticModel:
    """Fit P(trigger | X) on the treatment arm only."""
    columns = list(ds.covariate_names if columns is None else columns)
    if not columns:
        raise DataValidationError("a triggering-probability model needs at least one covariate")
    t = ds.treated
    return fit_logistic(
        ds.columns(columns)[t], ds.triggered[t], feature_names=columns, **fit_kwargs
    )


def principal_scores_for(ds: ExperimentDataset, columns: Sequence[str] | None = None, **fit_kwargs) -> ScoreSet:
    """Fit on treatment, predict on control, in one call."""
    columns = list(ds.covariate_names if columns is None else columns)
    model = fit_principal_model(ds, columns, **fit_kwargs)
    return principal_scores(model, ds.columns(columns)[~ds.treated])


def score_conversion(p, k):
    """Triggering probability ``p`` to propensity ``e = P(T0 | X, T0 or C)``.

    ``k`` is the control-to-treatment size ratio ``P(C)/P(T)``.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p >= 1) or np.any(p < 0):
        raise ValueError("triggering probability must lie in [0, 1)")
    if not np.all(np.asarray(k) > 0):
        raise ValueError("k must be positive")
    e = 1.0 / (1.0 + k + k * p / (1.0 - p))
    return float(e) if e.ndim == 0 else e


def propensity_to_triggering(e, k):
    """Inverse of :func:`score_conversion`: ``1 - p = k * e / (1 - e)``."""
    e = np.asarray(e, dtype=float)
    if np.any(e <= 0) or np.any(e >= 1):
        raise ValueError("propensity must lie in (0, 1)")
    p = 1.0 - k * e / (1.0 - e)
    return float(p) if p.ndim == 0 else p


def triggering_from_odds(odds: np.ndarray, k: float, eps: float = PROB_CLAMP) -> tuple[np.ndarray, dict]:
    """Map T0-vs-C odds to triggering probabilities, keeping them in ``[eps, 1 - eps]``.

    Only the proportions of ``1 - p`` across control units matter to the
    augmentation, so when an in-sample fit implies ``p < eps`` for some units
    the ratio ``k`` is shrunk uniformly instead of clipping individual units.
    """
    odds = np.asarray(odds, dtype=float)
    diag = {"k": float(k), "k_rescaled": False, "clipped": 0}
    top = float(odds.max())
    if k * top > 1.0 - eps:
        k = (1.0 - eps) / top
        diag["k_rescaled"] = True
        diag["k_used"] = float(k)
    complement = k * odds
    low = complement < eps
    if np.any(low):
        diag["clipped"] = int(low.sum())
        complement = np.maximum(complement, eps)
    return 1.0 - complement, diag


def propensity_scores(
    ds: ExperimentDataset, columns: Sequence[str] | None = None, eps: float = PROB_CLAMP, **fit_kwargs
) -> ScoreSet:
    """In-sample propensity of T0 membership over T0 and C, on the triggering scale.

    The fitted odds ``e/(1-e)`` are converted with ``k = n_C / n_T``, so the
    returned weights enter the augmentation exactly like principal scores.
    """
    columns = list(ds.covariate_names if columns is None else columns)
    if not columns:
        raise DataValidationError("a propensity model needs at least one covariate")
    t0 = ds.treated & ~ds.triggered
    c = ~ds.treated
    pool = t0 | c
    x = ds.columns(columns)
    model = fit_logistic(x[pool], t0[pool], feature_names=columns, **fit_kwargs)
    odds = np.exp(model.linear_predictor(x[c]))
    k = c.sum() / ds.treated.sum()
    w, diag = triggering_from_odds(odds, k, eps)
    return ScoreSet(ScoreKind.PROPENSITY_IN_SAMPLE, w, model=model, diagnostics=diag)
