"""Command-line front end: ``trigger-cuped {estimate,test-augmentation,simulate,study}``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure
(separation, infeasible balance, non-convergence). All randomness flows from
``--seed``; the worker count never changes output.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Sequence

from . import __version__
from .balancing import balance_problem_for, entropy_balance
from .data import CsvSchema, ExperimentDataset, Mode, load_csv, write_csv
from .errors import DataValidationError, NumericalError
from .estimators import naive_delta, residualize, trigger_dilute
from .inference import (
    DEFAULT_B,
    BootstrapResult,
    TestMethod,
    estimate_one_sided,
    estimate_two_sided,
    mean_zero_test,
)
from .pipeline import ScoreSpec
from .rng import DEFAULT_SEED, Rng
from .scoring import ScoreKind
from .simulation import DgpParams, Study, generate, mask_to_one_sided, run_study

THREADS_ENV = "TRIGGER_CUPED_THREADS"
STUDY_B = 200

METHODS = (
    "naive",
    "trigger-dilute",
    "two-sided",
    "one-sided-principal",
    "one-sided-propensity",
    "one-sided-entropy",
    "one-sided-ground-truth",
)
SCORES = ("principal", "propensity", "entropy", "ground-truth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _columns(text: str | None) -> list[str] | None:
    if text is None:
        return None
    cols = [c.strip() for c in text.split(",") if c.strip()]
    if not cols:
        raise UsageError("empty column list")
    return cols


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, value)


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _load(args) -> ExperimentDataset:
    schema = CsvSchema(
        unit_id=args.id_column,
        assignment=args.assignment_column,
        triggered=args.trigger_column,
        outcome=args.outcome,
        covariates=tuple(_columns(args.covariates)) if args.covariates else None,
    )
    ds = load_csv(args.input, schema, args.mode)
    if args.residualize:
        ds = residualize(ds, _columns(args.residualize)).base
    return ds


def _spec(kind: str, ds: ExperimentDataset, args) -> ScoreSpec:
    if kind == "ground-truth":
        if not args.probability_column:
            raise UsageError("ground-truth scores need --probability-column")
        return ScoreSpec.ground_truth(args.probability_column)
    cols = _columns(args.balance) if kind == "entropy" and args.balance else _columns(args.features)
    cols = cols or list(ds.covariate_names)
    if not cols:
        raise DataValidationError("no covariates available for the score model")
    ridge = getattr(args, "ridge", 0.0)
    if kind == "principal":
        return ScoreSpec.principal(cols, ridge=ridge)
    if kind == "propensity":
        return ScoreSpec.propensity(cols, ridge=ridge)
    return ScoreSpec.entropy(cols)


def _emit(args, payload: dict, text: str) -> None:
    out = json.dumps(payload, indent=2) if args.json else text
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    else:
        print(out)


def _dump_draws(path: str, boot: BootstrapResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["resample", "delta_y", "tau0"])
        for i, (d, t) in enumerate(zip(boot.delta_y_draws, boot.tau0_draws)):
            w.writerow([i, repr(float(d)), repr(float(t))])


def _dump_model(path: str, spec: ScoreSpec, ds: ExperimentDataset) -> None:
    one = ds if ds.mode is Mode.ONE_SIDED else ds.replace(mode=Mode.ONE_SIDED, triggered=ds.triggered & ds.treated)
    if spec.kind is ScoreKind.ENTROPY_BALANCE:
        sol = entropy_balance(balance_problem_for(one, spec.columns))
        payload = {
            "kind": spec.kind.value,
            "columns": list(spec.columns),
            "dual_multipliers": sol.dual_multipliers.tolist(),
            "converged": sol.converged,
            "max_constraint_violation": sol.max_constraint_violation,
            "iterations": sol.iterations,
        }
    else:
        scores = spec.scores(one)
        payload = {
            "kind": spec.kind.value,
            "columns": list(spec.columns),
            "model": scores.model.to_dict() if scores.model is not None else None,
            "diagnostics": scores.diagnostics,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def _text_report(title: str, fields: dict) -> str:
    width = max(len(k) for k in fields) + 2
    lines = [title]
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"  {k:<{width}}{v}")
    return "\n".join(lines)


def cmd_estimate(args) -> int:
    ds = _load(args)
    if args.method == "naive":
        report, boot = naive_delta(ds), None
    elif args.method == "trigger-dilute":
        report, boot = trigger_dilute(ds), None
    elif args.method == "two-sided":
        report, boot = estimate_two_sided(
            ds, args.bootstrap, Rng(args.seed), stratified=args.stratified, workers=args.threads
        )
    else:
        spec = _spec(args.method.removeprefix("one-sided-"), ds, args)
        if args.dump_model:
            _dump_model(args.dump_model, spec, ds)
        report, boot = estimate_one_sided(
            ds, spec, args.bootstrap, Rng(args.seed), stratified=args.stratified, workers=args.threads
        )
    if boot is not None and args.dump_draws:
        _dump_draws(args.dump_draws, boot)
    payload = report.to_dict()
    if boot is not None:
        payload["bootstrap"] = boot.to_dict()
    fields = {"method": report.method.value, "itt_estimate": report.itt_estimate}
    fields["standard_error"] = report.standard_error
    if report.theta is not None:
        fields["theta"] = report.theta
        fields["augmentation_value"] = report.augmentation_value
        fields["bootstrap_b"] = boot.b
    _emit(args, payload, _text_report("ITT estimate", fields))
    return 0


def cmd_test_augmentation(args) -> int:
    ds = _load(args)
    spec = _spec(args.score, ds, args)
    if args.method == TestMethod.DELTA.value:
        result = mean_zero_test(ds, spec, TestMethod.DELTA)
    else:
        result = mean_zero_test(
            ds, spec, TestMethod.BOOTSTRAP, Rng(args.seed), args.bootstrap,
            stratified=args.stratified, workers=args.threads,
        )
    fields = {
        "pipeline": spec.label,
        "method": result.method.value,
        "tau0_hat": result.tau0_hat,
        "se_tau0": result.se_tau0,
        "wald_z": result.wald_z,
        "p_value": result.p_value,
    }
    _emit(args, result.to_dict() | {"pipeline": spec.label}, _text_report("Mean-zero test of the augmentation", fields))
    return 0


def _params(args) -> DgpParams:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise DataValidationError("config file must hold a JSON object")
    for flag, key in (("n_control", "n_control"), ("n_treatment", "n_treatment"), ("r_effect", "r_effect")):
        value = getattr(args, flag)
        if value is not None:
            raw[key] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    return DgpParams.from_dict(raw)


def cmd_simulate(args) -> int:
    params = _params(args)
    ds = generate(params, Rng(params.seed))
    if args.one_sided or args.hide:
        ds = mask_to_one_sided(ds, _columns(args.hide) or ())
    write_csv(ds, args.output_csv)
    rate = float(ds.triggered[ds.treated].mean())
    print(f"wrote {ds.n} rows to {args.output_csv} (treatment trigger rate {rate:.4f})", file=sys.stderr)
    return 0


def cmd_study(args) -> int:
    params = _params(args)
    progress = None
    if args.progress:
        def progress(done, total):
            print(f"\r{done}/{total} trials", end="" if done < total else "\n", file=sys.stderr, flush=True)

    report = run_study(
        args.study,
        args.trials,
        params,
        args.bootstrap,
        Rng(params.seed),
        workers=args.threads,
        skip_failed=args.skip_failed,
        progress=progress,
    )
    if args.dump_trials:
        with open(args.dump_trials, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(include_trials=True)["trial_results"], fh)
    if args.csv:
        text = report.to_csv().rstrip("\n")
    else:
        text = report.to_text()
    _emit(args, report.to_dict(), text)
    return 0


def _add_common(p: argparse.ArgumentParser, bootstrap_default: int) -> None:
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--bootstrap", type=_positive, default=bootstrap_default, metavar="B",
                   help=f"bootstrap resamples (default {bootstrap_default})")
    p.add_argument("--threads", type=_positive, default=None, metavar="N",
                   help=f"worker count (default ${THREADS_ENV} or 1); never changes output")
    p.add_argument("--json", action="store_true", help="machine-readable JSON output")
    p.add_argument("--output", "-o", help="write the report to this file instead of stdout")


def _add_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="experiment CSV")
    p.add_argument("--mode", choices=[m.value for m in Mode], help="declare the trigger mode instead of inferring it")
    p.add_argument("--outcome", default="Y", help="outcome column (default Y)")
    p.add_argument("--id-column", default="unit_id", help="unit id column (default unit_id)")
    p.add_argument("--assignment-column", default="assignment", help="arm column (default assignment)")
    p.add_argument("--trigger-column", default="triggered", help="trigger column (default triggered)")
    p.add_argument("--covariates", help="comma-separated covariate columns to load (default: all others)")
    p.add_argument("--features", help="comma-separated score-model features (default: all covariates)")
    p.add_argument("--balance", help="comma-separated entropy-balancing columns; may include the outcome")
    p.add_argument("--probability-column", help="column of known triggering probabilities (ground-truth scores)")
    p.add_argument("--ridge", type=float, default=0.0, help="L2 penalty for score models (default 0)")
    p.add_argument("--residualize", help="comma-separated covariates to regress out of the outcome first")
    p.add_argument("--stratified", action="store_true", help="resample within each arm instead of pooled")


def _add_dgp(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with simulation parameters (field names as in DgpParams)")
    p.add_argument("--n-control", type=_positive, default=None, help="control units (default 25000)")
    p.add_argument("--n-treatment", type=_positive, default=None, help="treatment units (default 75000)")
    p.add_argument("--r-effect", type=float, default=None, help="rate effect among triggered units (default 0.05)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trigger-cuped", description="ITT estimation for experiments with one-sided triggering.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate the ITT effect from a CSV")
    p.add_argument("--method", choices=METHODS, default="one-sided-principal",
                   help="estimator (default one-sided-principal)")
    _add_input(p)
    _add_common(p, DEFAULT_B)
    p.add_argument("--dump-model", metavar="PATH", help="write the fitted score model as JSON")
    p.add_argument("--dump-draws", metavar="PATH", help="write bootstrap (delta_y, tau0) draws as CSV")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test-augmentation", help="test that the one-sided augmentation has mean zero")
    p.add_argument("--score", choices=SCORES, default="principal", help="weighting route (default principal)")
    p.add_argument("--method", choices=[m.value for m in TestMethod], default=TestMethod.BOOTSTRAP.value,
                   help="standard-error method (default bootstrap)")
    _add_input(p)
    _add_common(p, DEFAULT_B)
    p.set_defaults(func=cmd_test_augmentation)

    p = sub.add_parser("simulate", help="write a synthetic experiment CSV")
    p.add_argument("output_csv", help="destination CSV")
    _add_dgp(p)
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--one-sided", action="store_true", help="drop control trigger labels")
    p.add_argument("--hide", help="comma-separated covariates to drop (implies --one-sided)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run a Monte Carlo study")
    p.add_argument("study", choices=[s.value for s in Study])
    p.add_argument("--trials", type=_positive, default=1000, help="simulation trials (default 1000, minimum 50)")
    _add_dgp(p)
    _add_common(p, STUDY_B)
    p.add_argument("--csv", action="store_true", help="CSV table instead of aligned text")
    p.add_argument("--dump-trials", metavar="PATH", help="write per-trial results as JSON")
    p.add_argument("--skip-failed", action="store_true", help="drop failing trials instead of aborting")
    p.add_argument("--progress", action="store_true", help="print progress to stderr")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "threads") and args.threads is None:
            args.threads = _default_threads()
        if getattr(args, "seed", None) is None and args.command in ("estimate", "test-augmentation"):
            args.seed = DEFAULT_SEED
        return args.func(args)
    except (NumericalError, ZeroDivisionError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DataValidationError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
