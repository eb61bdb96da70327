"""Bootstrap engine, theta estimation, CUPED variance and the mean-zero test."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import ExperimentDataset, Mode, partition
from .errors import DataValidationError, NumericalError
from .estimators import EstimateReport, Method, weighted_tau0
from .pipeline import Pipeline, ScoreSpec, TwoSidedSpec
from .rng import Rng, as_rng

DEFAULT_B = 1000
MIN_B = 50
MAX_REDRAWS = 100
# var(tau0 draws) at or below this fraction of var(delta draws) counts as a point mass
DEGENERATE_VAR_RATIO = 1e-12


class BootstrapFailure(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    b: int
    delta_y_draws: np.ndarray
    tau0_draws: np.ndarray
    cov_matrix: np.ndarray
    theta_hat: float
    var_trg1_hat: float
    seed: int
    stream: tuple[int, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, include_draws: bool = False) -> dict:
        out = {
            "b": self.b,
            "cov_matrix": self.cov_matrix.tolist(),
            "theta_hat": self.theta_hat,
            "var_trg1_hat": self.var_trg1_hat,
            "seed": self.seed,
            "stream": list(self.stream),
            "diagnostics": self.diagnostics,
        }
        if include_draws:
            out["delta_y_draws"] = self.delta_y_draws.tolist()
            out["tau0_draws"] = self.tau0_draws.tolist()
        return out


def _is_degenerate(var_tau0: float, var_delta: float) -> bool:
    return not var_tau0 > DEGENERATE_VAR_RATIO * max(var_delta, 0.0)


def estimate_theta(delta_draws, tau0_draws) -> float:
    """``cov(delta, tau0) / var(tau0)`` over paired draws; 0 when tau0 does not vary."""
    d = np.asarray(delta_draws, dtype=float)
    a = np.asarray(tau0_draws, dtype=float)
    if d.size != a.size or d.size < 2:
        raise ValueError("need at least two paired draws")
    cov = np.cov(d, a)
    if _is_degenerate(cov[1, 1], cov[0, 0]) or cov[1, 1] == 0:
        return 0.0
    return float(cov[0, 1] / cov[1, 1])


def variance_trg1(cov_matrix) -> float:
    """``var(delta) - cov(delta, tau0)^2 / var(tau0)``, floored at zero.

    A degenerate ``var(tau0)`` gives no reduction and returns ``var(delta)``.
    """
    cov = np.asarray(cov_matrix, dtype=float)
    if cov.shape != (2, 2):
        raise ValueError("expected a 2x2 covariance matrix")
    if _is_degenerate(cov[1, 1], cov[0, 0]) or cov[1, 1] == 0:
        return float(max(cov[0, 0], 0.0))
    return float(max(cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1], 0.0))


def _draw_counts(gen, n, treated, stratified):
    if not stratified:
        return np.bincount(gen.integers(0, n, n), minlength=n)
    counts = np.zeros(n, dtype=np.int64)
    for rows in (np.flatnonzero(treated), np.flatnonzero(~treated)):
        counts += np.bincount(rows[gen.integers(0, rows.size, rows.size)], minlength=n)
    return counts


def bootstrap_many(
    ds: ExperimentDataset,
    pipelines: Mapping[str, Pipeline],
    b: int = DEFAULT_B,
    rng: Rng | int | None = None,
    *,
    stratified: bool = False,
    workers: int = 1,
    prepared: Mapping[str, object] | None = None,
) -> dict[str, BootstrapResult]:
    """Bootstrap several augmentation pipelines on shared resamples.

    Every resample draws ``n`` units with replacement (pooled over arms unless
    ``stratified``), refits each pipeline's score model or balance problem,
    and records ``(delta(Y), tau0)``. Resample ``i`` draws from stream
    ``rng.child(i)``, so results do not depend on ``workers``. Resamples with
    an empty T0 or control group are redrawn up to ``MAX_REDRAWS`` times.
    """
    if b < MIN_B:
        raise ValueError(f"bootstrap needs b >= {MIN_B}, got {b}")
    rng = as_rng(rng)
    if prepared is None:
        prepared = {name: p.prepare(ds) for name, p in pipelines.items()}
    names = list(pipelines)
    n = ds.n
    treated = ds.treated
    part = partition(ds)
    y = ds.outcome
    t_rows = np.flatnonzero(treated)
    c_rows = part.c

    def one(i):
        gen = rng.child(i).generator()
        for attempt in range(MAX_REDRAWS):
            counts = _draw_counts(gen, n, treated, stratified)
            ct = counts[t_rows]
            cc = counts[c_rows]
            if counts[part.t0].sum() == 0 or cc.sum() == 0:
                continue
            if ds.mode is Mode.TWO_SIDED and counts[part.c0].sum() == 0:
                continue
            delta = float(ct @ y[t_rows] / ct.sum() - cc @ y[c_rows] / cc.sum())
            taus = []
            for name in names:
                try:
                    taus.append(prepared[name].tau0(counts))
                except NumericalError as exc:
                    exc.resample_index = i
                    exc.args = (f"bootstrap resample {i}, pipeline {name}: {exc}",)
                    raise
            return delta, taus, attempt
        raise BootstrapFailure(f"resample {i}: no usable resample in {MAX_REDRAWS} draws")

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(b)))
    else:
        results = [one(i) for i in range(b)]

    delta_draws = np.array([r[0] for r in results])
    redraws = int(sum(r[2] for r in results))
    out = {}
    for j, name in enumerate(names):
        tau_draws = np.array([r[1][j] for r in results])
        cov = np.cov(delta_draws, tau_draws)
        degenerate = _is_degenerate(cov[1, 1], cov[0, 0]) or cov[1, 1] == 0
        theta = estimate_theta(delta_draws, tau_draws)
        var = variance_trg1(cov)
        raw = cov[0, 0] - (0.0 if degenerate else cov[0, 1] ** 2 / cov[1, 1])
        out[name] = BootstrapResult(
            b=b,
            delta_y_draws=delta_draws,
            tau0_draws=tau_draws,
            cov_matrix=cov,
            theta_hat=theta,
            var_trg1_hat=var,
            seed=rng.seed,
            stream=rng.stream,
            diagnostics={
                "redraws": redraws,
                "theta_degenerate": bool(degenerate),
                "variance_floored": bool(raw < 0),
                "stratified": stratified,
            },
        )
    return out


def bootstrap(
    ds: ExperimentDataset,
    pipeline: Pipeline,
    b: int = DEFAULT_B,
    rng: Rng | int | None = None,
    **kwargs,
) -> BootstrapResult:
    if ds.mode is not Mode.ONE_SIDED and not isinstance(pipeline, TwoSidedSpec):
        # one-sided pipelines ignore control labels; masking keeps that explicit
        ds = ds.replace(mode=Mode.ONE_SIDED, triggered=ds.triggered & ds.treated)
    return bootstrap_many(ds, {"augmentation": pipeline}, b, rng, **kwargs)["augmentation"]


def report_from_bootstrap(
    ds: ExperimentDataset, tau0_hat: float, boot: BootstrapResult, method: Method
) -> EstimateReport:
    delta = float(ds.outcome[ds.treated].mean() - ds.outcome[~ds.treated].mean())
    return EstimateReport(
        method,
        delta - boot.theta_hat * tau0_hat,
        math.sqrt(boot.var_trg1_hat),
        theta=boot.theta_hat,
        augmentation_value=tau0_hat,
        diagnostics={"delta_y": delta, "bootstrap_b": boot.b, **boot.diagnostics},
    )


def estimate_one_sided(
    ds: ExperimentDataset, spec: Pipeline, b: int = DEFAULT_B, rng: Rng | int | None = None, **kwargs
) -> tuple[EstimateReport, BootstrapResult]:
    """Full one-sided CUPED pipeline: scores, augmentation, bootstrap theta and variance."""
    if ds.mode is not Mode.ONE_SIDED:
        ds = ds.replace(mode=Mode.ONE_SIDED, triggered=ds.triggered & ds.treated)
    prep = spec.prepare(ds)
    tau0_hat = prep.tau0(None)
    boot = bootstrap_many(ds, {"a": spec}, b, rng, prepared={"a": prep}, **kwargs)["a"]
    report = report_from_bootstrap(ds, tau0_hat, boot, Method.CUPED_ONE_SIDED)
    report.diagnostics["pipeline"] = spec.label
    return report, boot


def estimate_two_sided(
    ds: ExperimentDataset, b: int = DEFAULT_B, rng: Rng | int | None = None, **kwargs
) -> tuple[EstimateReport, BootstrapResult]:
    spec = TwoSidedSpec()
    prep = spec.prepare(ds)
    boot = bootstrap_many(ds, {"a": spec}, b, rng, prepared={"a": prep}, **kwargs)["a"]
    return report_from_bootstrap(ds, prep.tau0(None), boot, Method.CUPED_TWO_SIDED), boot


# -- mean-zero test -------------------------------------------------------------


class TestMethod(str, enum.Enum):
    BOOTSTRAP = "bootstrap"
    DELTA = "delta"

    __test__ = False


@dataclass(frozen=True)
class MeanZeroTest:
    tau0_hat: float
    se_tau0: float
    wald_z: float
    p_value: float
    method: TestMethod
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tau0_hat": self.tau0_hat,
            "se_tau0": self.se_tau0,
            "wald_z": self.wald_z,
            "p_value": self.p_value,
            "method": self.method.value,
            "diagnostics": self.diagnostics,
        }


def wald_test(tau0_hat: float, se: float, method: TestMethod, **diagnostics) -> MeanZeroTest:
    """Two-sided normal test of a zero mean. A zero SE is reported as a non-rejection."""
    if not se > 0:
        diagnostics["degenerate_se"] = True
        return MeanZeroTest(tau0_hat, 0.0, 0.0, 1.0, TestMethod(method), diagnostics)
    z = tau0_hat / se
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return MeanZeroTest(tau0_hat, se, z, min(max(p, 0.0), 1.0), TestMethod(method), diagnostics)


def delta_method_se(ds: ExperimentDataset, control_weights: np.ndarray) -> float:
    """SE of the augmentation linearizing both ratio means, weights held fixed."""
    part = partition(ds)
    y_t0 = ds.outcome[part.t0]
    y_c = ds.outcome[part.c]
    v = np.asarray(control_weights, dtype=float)
    var_a = float(np.var(y_t0, ddof=1)) / y_t0.size if y_t0.size > 1 else 0.0
    ratio = float(v @ y_c / v.sum())
    var_b = float(np.sum(v**2 * (y_c - ratio) ** 2) / v.sum() ** 2)
    return math.sqrt(var_a + var_b)


def mean_zero_test(
    ds: ExperimentDataset,
    pipeline: Pipeline,
    method: TestMethod | str = TestMethod.BOOTSTRAP,
    rng: Rng | int | None = None,
    b: int = DEFAULT_B,
    **kwargs,
) -> MeanZeroTest:
    """Wald test that the augmentation has mean zero.

    ``bootstrap`` uses the SD of refitted bootstrap draws; ``delta`` linearizes
    the two ratio means with the full-data weights fixed (score pipelines only).
    """
    method = TestMethod(method)
    if ds.mode is not Mode.ONE_SIDED:
        ds = ds.replace(mode=Mode.ONE_SIDED, triggered=ds.triggered & ds.treated)
    if method is TestMethod.DELTA:
        if not isinstance(pipeline, ScoreSpec):
            raise DataValidationError("the delta method needs a score pipeline")
        scores = pipeline.scores(ds)
        part = partition(ds)
        v = scores.augmentation_weights()
        tau0_hat = weighted_tau0(ds.outcome[part.t0], ds.outcome[part.c], v)
        return wald_test(tau0_hat, delta_method_se(ds, v), method, pipeline=pipeline.label)
    prep = pipeline.prepare(ds)
    tau0_hat = prep.tau0(None)
    boot = bootstrap_many(ds, {"a": pipeline}, b, rng, prepared={"a": prep}, **kwargs)["a"]
    return wald_from_bootstrap(tau0_hat, boot, pipeline=getattr(pipeline, "label", "custom"))


def wald_from_bootstrap(tau0_hat: float, boot: BootstrapResult, **diagnostics) -> MeanZeroTest:
    var = float(boot.cov_matrix[1, 1])
    se = 0.0 if boot.diagnostics.get("theta_degenerate") else math.sqrt(max(var, 0.0))
    return wald_test(tau0_hat, se, TestMethod.BOOTSTRAP, bootstrap_b=boot.b, **diagnostics)
