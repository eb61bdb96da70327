"""Entropy balancing of control units towards T0 covariate means.

Weights minimize KL divergence from the base weights subject to exact mean
constraints. The solver runs damped Newton on the m-dimensional dual, on
covariates standardized over the (base-weighted) control sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ExperimentDataset
from .errors import ConvergenceError, InfeasibleBalanceError, NumericalError
from .scoring import ScoreKind, ScoreSet

BALANCE_TOL = 1e-10
BALANCE_MAX_ITER = 200
ARMIJO_C = 1e-4
_MAX_BACKTRACK = 60
_SINGULAR_EIG = 1e-13
_F_SLACK = 1e-13


@dataclass(frozen=True, eq=False)
class BalanceProblem:
    """Balance ``control_covariates`` rows so their weighted mean equals ``target_means``.

    ``base_weights`` defaults to uniform; bootstrap resamples pass their
    multiplicity counts here, which is equivalent to duplicating rows.
    """

    control_covariates: np.ndarray
    target_means: np.ndarray
    tolerance: float = BALANCE_TOL
    max_iterations: int = BALANCE_MAX_ITER
    base_weights: np.ndarray | None = None
    initial_multipliers: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.control_covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        t = np.atleast_1d(np.asarray(self.target_means, dtype=float))
        if x.shape[1] != t.size:
            raise ValueError(f"{x.shape[1]} covariates but {t.size} targets")
        if t.size < 1:
            raise ValueError("need at least one balancing covariate")
        object.__setattr__(self, "control_covariates", x)
        object.__setattr__(self, "target_means", t)
        if self.initial_multipliers is not None:
            init = np.asarray(self.initial_multipliers, dtype=float).ravel()
            if init.size != t.size:
                raise ValueError("initial_multipliers must have one entry per covariate")
            object.__setattr__(self, "initial_multipliers", init)


@dataclass(frozen=True, eq=False)
class BalanceSolution:
    weights: np.ndarray
    dual_multipliers: np.ndarray
    converged: bool
    max_constraint_violation: float
    iterations: int = 0
    objective_history: tuple[float, ...] = field(default=(), repr=False)


def entropy_balance(problem: BalanceProblem) -> BalanceSolution:
    """Solve an entropy-balancing problem.

    Returns weights ``w_i ∝ q_i exp(-lambda . x_i)`` summing to one. When the
    iteration budget runs out the best iterate is returned with
    ``converged=False``.

    Raises:
        InfeasibleBalanceError: the targets lie outside the convex hull of the
            control rows (detected up front per coordinate, or by a vanishing
            dual Hessian).
        NumericalError: the dual objective became non-finite.
    """
    x = problem.control_covariates
    target = problem.target_means
    k, m = x.shape
    q = np.ones(k) if problem.base_weights is None else np.asarray(problem.base_weights, dtype=float).ravel()
    if q.size != k or np.any(q < 0) or q.sum() <= 0:
        raise ValueError("base weights must be nonnegative, nonzero, one per control row")
    active = q > 0
    if int(active.sum()) <= m:
        raise ValueError(f"need more control units ({int(active.sum())}) than constraints ({m})")
    q = q / q.sum()

    xa = x[active] if not active.all() else x
    lo = xa.min(axis=0)
    hi = xa.max(axis=0)
    outside = (target < lo) | (target > hi)
    if np.any(outside):
        j = int(np.flatnonzero(outside)[0])
        raise InfeasibleBalanceError(
            f"target {target[j]:.6g} for covariate {j} outside control range [{lo[j]:.6g}, {hi[j]:.6g}]"
        )

    mean = q @ x
    sd = np.sqrt(q @ (x - mean) ** 2)
    const = sd == 0
    if np.any(const & (np.abs(target - mean) > 0)):
        raise InfeasibleBalanceError("constant control covariate cannot reach a different target")
    keep = ~const
    # column-major standardized design, centred at the target
    zc = ((x[:, keep] - target[keep]) / sd[keep]).T.copy()
    with np.errstate(divide="ignore"):
        logq = np.log(q)

    def dual(lam):
        s = logq + lam @ zc
        top = s.max()
        e = np.exp(s - top)
        total = e.sum()
        return top + np.log(total), e / total

    if problem.initial_multipliers is None:
        lam = np.zeros(zc.shape[0])
    else:
        lam = -problem.initial_multipliers[keep] * sd[keep]
    f, w = dual(lam)
    if not np.isfinite(f):
        lam = np.zeros(zc.shape[0])
        f, w = dual(lam)
    grad = zc @ w
    history = [float(f)]
    converged = False
    it = 0
    while True:
        gnorm = np.linalg.norm(grad)
        if gnorm <= problem.tolerance:
            converged = True
            break
        if it >= problem.max_iterations:
            break
        it += 1
        hess = (zc * w) @ zc.T - np.outer(grad, grad)
        eig = np.linalg.eigvalsh(hess)
        if eig[0] <= _SINGULAR_EIG * max(1.0, eig[-1]):
            raise InfeasibleBalanceError("dual Hessian is singular: targets are on or outside the control hull")
        step = -np.linalg.solve(hess, grad)
        slope = float(grad @ step)
        t = 1.0
        for _ in range(_MAX_BACKTRACK):
            cand = lam + t * step
            f_new, w_new = dual(cand)
            if np.isfinite(f_new):
                grad_new = zc @ w_new
                if f_new <= f + ARMIJO_C * t * slope:
                    break
                # near the optimum objective changes drop below float resolution;
                # fall back to requiring a smaller gradient
                if f_new <= f + _F_SLACK * (1.0 + abs(f)) and np.linalg.norm(grad_new) < gnorm:
                    break
            t *= 0.5
        else:
            if not np.isfinite(f_new):
                raise NumericalError("entropy-balancing dual objective is not finite")
            break
        lam, f, w, grad = cand, f_new, w_new, grad_new
        history.append(float(f))

    weights = w
    violation = float(np.max(np.abs(weights @ x - target)))
    multipliers = np.zeros(m)
    # w ∝ exp(lam . z) = exp(-mult . x) + const
    multipliers[keep] = -lam / sd[keep]
    return BalanceSolution(
        weights=weights,
        dual_multipliers=multipliers,
        converged=converged,
        max_constraint_violation=violation,
        iterations=it,
        objective_history=tuple(history),
    )


def balance_weights_to_scoreset(sol: BalanceSolution) -> ScoreSet:
    if not sol.converged:
        raise ConvergenceError(
            f"entropy balancing did not converge (max violation {sol.max_constraint_violation:.3g})"
        )
    return ScoreSet(ScoreKind.ENTROPY_BALANCE, sol.weights, diagnostics={"iterations": sol.iterations})


def balance_problem_for(
    ds: ExperimentDataset, columns: Sequence[str], base_weights=None, **kwargs
) -> BalanceProblem:
    """Problem matching control means of ``columns`` to their T0 means.

    ``base_weights`` are per-row weights over the whole dataset (e.g.
    bootstrap counts); they weight both the T0 targets and the control base.
    ``columns`` may name the outcome to balance on it directly.
    """
    if not columns:
        raise ValueError("need at least one balancing column")
    values = ds.columns(columns)
    t0 = ds.treated & ~ds.triggered
    c = ~ds.treated
    if base_weights is None:
        target = values[t0].mean(axis=0)
        base = None
    else:
        bw = np.asarray(base_weights, dtype=float)
        target = bw[t0] @ values[t0] / bw[t0].sum()
        base = bw[c]
    return BalanceProblem(values[c], target, base_weights=base, **kwargs)


def entropy_balance_scores(ds: ExperimentDataset, columns: Sequence[str], **kwargs) -> ScoreSet:
    return balance_weights_to_scoreset(entropy_balance(balance_problem_for(ds, columns, **kwargs)))
