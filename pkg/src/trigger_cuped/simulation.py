"""Synthetic conversion experiments and the four Monte Carlo studies.

The generator mirrors a 30-day conversion process: an engagement tier ``U``,
two pre-assignment covariates, a linear triggering probability and a
binomial outcome whose rate rises by ``r_effect`` for triggered treated units.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .data import ExperimentDataset, Mode
from .errors import DataValidationError, NumericalError
from .estimators import naive_delta, residualize, trigger_dilute
from .inference import bootstrap_many, wald_from_bootstrap
from .pipeline import ScoreSpec, TwoSidedSpec
from .rng import Rng, as_rng

COVARIATES = ("x_1", "x_2", "U", "p_s")


@dataclass(frozen=True)
class DgpParams:
    n_control: int = 25_000
    n_treatment: int = 75_000
    p_0: float = 0.2
    p_1: float = 0.05
    c_1: float = 0.05
    c_2: float = 0.05
    c_3: float = 0.1
    trials_per_unit: int = 30
    r_low: float = 0.05
    r_high: float = 0.1
    r_effect: float = 0.05
    seed: int = 20230806

    def __post_init__(self):
        if self.n_control < 1 or self.n_treatment < 1:
            raise DataValidationError("both arms need at least one unit")
        if not 0 <= self.p_0 <= 1:
            raise DataValidationError("p_0 must be a probability")
        if self.trials_per_unit < 1:
            raise DataValidationError("trials_per_unit must be positive")
        lo, hi = self.trigger_probability_range()
        if lo < 0 or hi > 1:
            raise DataValidationError(f"triggering probability ranges over [{lo:.4g}, {hi:.4g}], outside [0, 1]")
        lo, hi = self.rate_range()
        if lo < 0 or hi > 1:
            raise DataValidationError(f"conversion rate ranges over [{lo:.4g}, {hi:.4g}], outside [0, 1]")

    @property
    def mean_x1(self) -> float:
        return (3 * self.p_0 + 1) / 8

    def trigger_probability_range(self) -> tuple[float, float]:
        # x_1 ranges over [0, 1] (U=1) or [0, 0.25] (U=0); x_2 over [0, 1]
        x1_hi = 1.0 if self.p_0 > 0 else 0.25
        a = sorted((self.c_1 * (0 - self.mean_x1), self.c_1 * (x1_hi - self.mean_x1)))
        b = sorted((self.c_2 * -0.5, self.c_2 * 0.5))
        return self.p_1 + a[0] + b[0], self.p_1 + a[1] + b[1]

    def rate_range(self) -> tuple[float, float]:
        bases = [self.r_low] if self.p_0 == 0 else [self.r_high] if self.p_0 == 1 else [self.r_low, self.r_high]
        c = sorted((self.c_3 * -0.5, self.c_3 * 0.5))
        e = sorted((0.0, self.r_effect))
        return min(bases) + c[0] + e[0], max(bases) + c[1] + e[1]

    @property
    def true_itt(self) -> float:
        return self.trials_per_unit * self.r_effect * self.p_1

    @classmethod
    def from_dict(cls, raw: dict) -> DgpParams:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataValidationError(f"unknown DGP parameter(s): {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def generate(params: DgpParams, rng: Rng | int | None = None) -> ExperimentDataset:
    """Draw one two-sided dataset. Control rows come first.

    Covariates are ``x_1``, ``x_2`` plus the auxiliary ``U`` and true
    triggering probability ``p_s``; ``triggered`` holds ``S`` for every unit.
    """
    gen = as_rng(rng if rng is not None else params.seed).generator()
    n = params.n_control + params.n_treatment
    treated = np.zeros(n, dtype=bool)
    treated[params.n_control:] = True
    u = gen.binomial(1, params.p_0, n)
    x1 = gen.uniform(0.0, 0.25 + 0.75 * u)
    x2 = gen.uniform(0.0, 1.0, n)
    p_s = params.p_1 + params.c_1 * (x1 - params.mean_x1) + params.c_2 * (x2 - 0.5)
    s = gen.binomial(1, p_s).astype(bool)
    d = s & treated
    r = np.where(u == 1, params.r_high, params.r_low) + params.c_3 * (x2 - 0.5) + params.r_effect * d
    y = gen.binomial(params.trials_per_unit, r)
    return ExperimentDataset(
        treated=treated,
        triggered=s,
        covariates=np.column_stack([x1, x2, u.astype(float), p_s]),
        outcome=y.astype(float),
        covariate_names=COVARIATES,
        mode=Mode.TWO_SIDED,
    )


def mask_to_one_sided(ds: ExperimentDataset, hide: Sequence[str] = ()) -> ExperimentDataset:
    """Drop control trigger labels and optionally hide covariate columns."""
    if ds.mode is not Mode.TWO_SIDED:
        raise DataValidationError("mask_to_one_sided expects a two-sided dataset")
    out = ds.drop_covariates(hide) if hide else ds
    return out.replace(mode=Mode.ONE_SIDED, triggered=ds.triggered & ds.treated)


# -- studies ---------------------------------------------------------------------


class Study(str, enum.Enum):
    S1 = "s1"
    S2 = "s2"
    S3 = "s3"
    S4 = "s4"


NAIVE = "Naive"
TRIGGER_DILUTE = "Trigger-Dilute"
TWO_SIDED = "CUPED Two-Sided Trigger"


@dataclass(frozen=True)
class StudyConfig:
    study: Study
    residualize_on: tuple[str, ...]
    hide: tuple[str, ...]
    two_sided: bool
    pipelines: tuple[ScoreSpec, ...]


def _s2_pipelines(a: tuple[str, ...]) -> tuple[ScoreSpec, ...]:
    return (
        ScoreSpec.principal(a),
        ScoreSpec.ground_truth("p_s"),
        ScoreSpec.propensity(a),
        ScoreSpec.entropy(a),
        ScoreSpec.entropy(a + ("U",)),
        ScoreSpec.entropy(("p_s",)),
    )


def study_config(study: Study | str) -> StudyConfig:
    study = Study(study)
    both = ("x_1", "x_2")
    if study is Study.S1:
        return StudyConfig(study, (), (), True, (ScoreSpec.principal(both),))
    if study is Study.S2:
        return StudyConfig(study, (), (), True, _s2_pipelines(both))
    if study is Study.S3:
        return StudyConfig(study, both, (), True, _s2_pipelines(both))
    # x_1 is unobserved: dropped from residualization, models and balancing
    only = ("x_2",)
    return StudyConfig(
        study,
        only,
        ("x_1", "p_s"),
        False,
        (
            ScoreSpec.principal(only),
            ScoreSpec.propensity(only),
            ScoreSpec.entropy(only),
            ScoreSpec.entropy(only + ("U",)),
        ),
    )


def roster(study: Study | str) -> list[str]:
    cfg = study_config(study)
    names = [NAIVE, TRIGGER_DILUTE]
    if cfg.two_sided:
        names.append(TWO_SIDED)
    names += [p.label for p in cfg.pipelines]
    return names


@dataclass(frozen=True)
class TrialResult:
    study: str
    trial: int
    estimator: str
    estimate: float
    est_se: float
    diagnostics: dict = field(default_factory=dict)


def run_trial(
    study: Study | str, trial: int, params: DgpParams, bootstrap_b: int, rng: Rng
) -> list[TrialResult]:
    cfg = study_config(study)
    twin = generate(params, rng.child(trial, 0))
    if cfg.residualize_on:
        twin = residualize(twin, cfg.residualize_on).base
    one = mask_to_one_sided(twin, cfg.hide)
    sid = cfg.study.value
    out = []

    nv = naive_delta(one)
    out.append(TrialResult(sid, trial, NAIVE, nv.itt_estimate, nv.standard_error))
    td = trigger_dilute(twin)
    out.append(TrialResult(sid, trial, TRIGGER_DILUTE, td.itt_estimate, td.standard_error, {"gamma": td.diagnostics["gamma"]}))

    pipelines = {}
    prepared = {}
    if cfg.two_sided:
        pipelines[TWO_SIDED] = TwoSidedSpec()
        prepared[TWO_SIDED] = pipelines[TWO_SIDED].prepare(twin)
    for spec in cfg.pipelines:
        pipelines[spec.label] = spec
        prepared[spec.label] = spec.prepare(one)
    boots = bootstrap_many(twin, pipelines, bootstrap_b, rng.child(trial, 1), prepared=prepared)

    delta = nv.itt_estimate
    for name, boot in boots.items():
        tau0 = prepared[name].tau0(None)
        est = delta - boot.theta_hat * tau0
        diag = {"theta": boot.theta_hat, "tau0": tau0}
        if name != TWO_SIDED:
            test = wald_from_bootstrap(tau0, boot)
            diag["p_value"] = test.p_value
            diag["wald_z"] = test.wald_z
        out.append(TrialResult(sid, trial, name, est, math.sqrt(boot.var_trg1_hat), diag))
    for r in out:
        if not (math.isfinite(r.estimate) and math.isfinite(r.est_se)):
            raise NumericalError(f"trial {trial}: non-finite result for {r.estimator}")
    return out


@dataclass(frozen=True)
class StudyRow:
    estimator: str
    mean_estimate: float
    mc_sd: float
    mean_est_se: float
    n_trials: int
    rejection_rate: float | None = None


@dataclass
class StudyReport:
    study: str
    rows: list[StudyRow]
    trials: int
    config: dict
    failed_trials: list[int] = field(default_factory=list)
    trial_results: list[TrialResult] = field(default_factory=list, repr=False)

    def row(self, estimator: str) -> StudyRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def estimates(self, estimator: str) -> np.ndarray:
        return np.array([t.estimate for t in self.trial_results if t.estimator == estimator])

    def to_dict(self, include_trials: bool = False) -> dict:
        out = {
            "study": self.study,
            "trials": self.trials,
            "config": self.config,
            "failed_trials": self.failed_trials,
            "rows": [asdict(r) for r in self.rows],
        }
        if include_trials:
            out["trial_results"] = [asdict(t) for t in self.trial_results]
        return out

    def to_json(self, include_trials: bool = False) -> str:
        return json.dumps(self.to_dict(include_trials), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["estimator", "mean_estimate", "mc_sd", "mean_est_se", "n_trials", "rejection_rate"])
        for r in self.rows:
            w.writerow([r.estimator, r.mean_estimate, r.mc_sd, r.mean_est_se, r.n_trials,
                        "" if r.rejection_rate is None else r.rejection_rate])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r.estimator) for r in self.rows) + 2
        head = f"{'Estimator':<{width}}{'Est. ITT':>10}{'True SE':>10}{'Est. SE':>10}{'Reject':>8}"
        lines = [f"Study {self.study.upper()} ({self.trials} trials)", head, "-" * len(head)]
        for r in self.rows:
            rej = "" if r.rejection_rate is None else f"{r.rejection_rate:.3f}"
            lines.append(
                f"{r.estimator:<{width}}{r.mean_estimate:>10.4f}{r.mc_sd:>10.5f}{r.mean_est_se:>10.5f}{rej:>8}"
            )
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, raw: dict) -> StudyReport:
        return cls(
            study=raw["study"],
            rows=[StudyRow(**r) for r in raw["rows"]],
            trials=raw["trials"],
            config=raw["config"],
            failed_trials=list(raw.get("failed_trials", [])),
            trial_results=[TrialResult(**t) for t in raw.get("trial_results", [])],
        )


def aggregate(study: str, names: Sequence[str], results: Sequence[TrialResult], config: dict,
              failed: Sequence[int] = (), alpha: float = 0.05) -> StudyReport:
    rows = []
    for name in names:
        sel = [r for r in results if r.estimator == name]
        est = np.array([r.estimate for r in sel])
        se = np.array([r.est_se for r in sel])
        pvals = [r.diagnostics["p_value"] for r in sel if "p_value" in r.diagnostics]
        rej = float(np.mean(np.array(pvals) < alpha)) if pvals else None
        rows.append(
            StudyRow(
                estimator=name,
                mean_estimate=float(est.mean()),
                mc_sd=float(est.std(ddof=1)) if est.size > 1 else 0.0,
                mean_est_se=float(se.mean()),
                n_trials=int(est.size),
                rejection_rate=rej,
            )
        )
    trials = len({r.trial for r in results})
    return StudyReport(study, rows, trials, config, sorted(failed), list(results))


def _trial_task(args):
    study, trial, params, b, rng, skip_failed = args
    try:
        return trial, run_trial(study, trial, params, b, rng), None
    except (NumericalError, DataValidationError, ZeroDivisionError) as exc:
        if not skip_failed:
            raise type(exc)(f"trial {trial}: {exc}") from exc
        return trial, [], str(exc)


def run_study(
    study: Study | str,
    trials: int = 1000,
    params: DgpParams | None = None,
    bootstrap_b: int = 200,
    rng: Rng | int | None = None,
    *,
    workers: int = 1,
    skip_failed: bool = False,
    progress: Callable[[int, int], None] | None = None,
    min_trials: int = 50,
) -> StudyReport:
    """Run ``trials`` independent trials of a study and aggregate them.

    Trial ``i`` draws its data from stream ``rng.child(i, 0)`` and its
    bootstrap from ``rng.child(i, 1)``, so the report does not depend on
    ``workers``.
    """
    study = Study(study)
    if trials < min_trials:
        raise ValueError(f"a study needs at least {min_trials} trials")
    params = params or DgpParams()
    rng = as_rng(rng if rng is not None else params.seed)
    tasks = [(study, i, params, bootstrap_b, rng, skip_failed) for i in range(trials)]
    collected: dict[int, list[TrialResult]] = {}
    failed = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for done, (i, res, err) in enumerate(pool.map(_trial_task, tasks, chunksize=1), start=1):
                collected[i] = res
                if err:
                    failed.append(i)
                if progress:
                    progress(done, trials)
    else:
        for done, task in enumerate(tasks, start=1):
            i, res, err = _trial_task(task)
            collected[i] = res
            if err:
                failed.append(i)
            if progress:
                progress(done, trials)
    results = [r for i in sorted(collected) for r in collected[i]]
    config = {
        "study": study.value,
        "trials": trials,
        "bootstrap_b": bootstrap_b,
        "seed": rng.seed,
        "stream": list(rng.stream),
        "params": params.to_dict(),
    }
    return aggregate(study.value, roster(study), results, config, failed)
