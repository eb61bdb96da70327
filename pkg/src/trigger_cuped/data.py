"""Experiment datasets: validation, partitioning and CSV interchange.

A dataset is stored column-wise (numpy arrays) and is immutable after
construction. Row-oriented :class:`UnitRecord` objects are available for
small inputs and tests, but every estimator works on the arrays.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataValidationError


class Assignment(str, enum.Enum):
    TREATMENT = "treatment"
    CONTROL = "control"


class Mode(str, enum.Enum):
    """Which arms carry trigger labels.

    ``ONE_SIDED``: only treatment units have an observed trigger flag.
    ``TWO_SIDED``: every unit carries its counterfactual trigger status
    (only available in simulation).
    """

    ONE_SIDED = "one-sided"
    TWO_SIDED = "two-sided"


@dataclass(frozen=True)
class UnitRecord:
    unit_id: str
    assignment: Assignment
    triggered: bool | None
    covariates: tuple[float, ...]
    outcome: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ExperimentDataset:
    """Column-oriented experiment data.

    Attributes:
        treated: Boolean assignment indicator (``Z``).
        triggered: Boolean trigger flag. For control units in one-sided mode
            the value is meaningless and stored as False.
        covariates: ``(n, m)`` float matrix, columns named by ``covariate_names``.
        outcome: Observed outcome ``Y``.
        mode: One-sided or two-sided trigger labelling.
        unit_ids: Optional unique identifiers; generated lazily when omitted.
    """

    treated: np.ndarray
    triggered: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple[str, ...]
    mode: Mode = Mode.ONE_SIDED
    unit_ids: np.ndarray | None = None
    outcome_name: str = "Y"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        treated = np.asarray(self.treated, dtype=bool).ravel()
        n = treated.size
        triggered = np.asarray(self.triggered, dtype=bool).ravel()
        outcome = np.asarray(self.outcome, dtype=float).ravel()
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1 and n > 0 and cov.size == 0:
            cov = cov.reshape(n, 0)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1)
        names = tuple(str(c) for c in self.covariate_names)
        mode = Mode(self.mode)

        if triggered.size != n or outcome.size != n or cov.shape[0] != n:
            raise DataValidationError("column lengths differ")
        if cov.shape[1] != len(names):
            raise DataValidationError(
                f"{cov.shape[1]} covariate columns but {len(names)} covariate names"
            )
        if len(set(names)) != len(names):
            raise DataValidationError("duplicate covariate names")
        if self.outcome_name in names:
            raise DataValidationError(f"covariate name clashes with outcome {self.outcome_name!r}")
        if not np.all(np.isfinite(outcome)):
            raise DataValidationError("outcome contains missing or non-finite values")
        if not np.all(np.isfinite(cov)):
            raise DataValidationError("covariates contain missing or non-finite values")
        n_t = int(treated.sum())
        if n_t < 1 or n_t == n:
            raise DataValidationError("both treatment and control groups must be nonempty")
        if mode is Mode.ONE_SIDED:
            if not np.any(treated & ~triggered):
                raise DataValidationError("one-sided data needs at least one untriggered treatment unit (T0)")
            triggered = triggered & treated

        ids = self.unit_ids
        if ids is not None:
            ids = np.asarray(ids, dtype=object).ravel()
            if ids.size != n:
                raise DataValidationError("unit_ids length differs from data")
            if len(set(ids.tolist())) != n:
                raise DataValidationError("duplicate unit_id values")
            ids = _frozen(ids)

        object.__setattr__(self, "treated", _frozen(treated))
        object.__setattr__(self, "triggered", _frozen(triggered))
        object.__setattr__(self, "outcome", _frozen(outcome))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "unit_ids", ids)

    @property
    def n(self) -> int:
        return self.treated.size

    @property
    def ids(self) -> np.ndarray:
        if self.unit_ids is not None:
            return self.unit_ids
        if "ids" not in self._cache:
            self._cache["ids"] = np.array([str(i) for i in range(self.n)], dtype=object)
        return self._cache["ids"]

    @property
    def is_two_sided(self) -> bool:
        return self.mode is Mode.TWO_SIDED

    def column(self, name: str) -> np.ndarray:
        """Return a covariate column, or the outcome when ``name`` is the outcome name."""
        if name == self.outcome_name:
            return self.outcome
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"no column named {name!r}; have {list(self.covariate_names)}") from None
        return self.covariates[:, j]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.column(c) for c in names])

    def replace(self, **changes) -> ExperimentDataset:
        kwargs = dict(
            treated=self.treated,
            triggered=self.triggered,
            covariates=self.covariates,
            outcome=self.outcome,
            covariate_names=self.covariate_names,
            mode=self.mode,
            unit_ids=self.unit_ids,
            outcome_name=self.outcome_name,
        )
        kwargs.update(changes)
        return ExperimentDataset(**kwargs)

    def with_outcome(self, outcome: np.ndarray) -> ExperimentDataset:
        return self.replace(outcome=outcome)

    def drop_covariates(self, names: Iterable[str]) -> ExperimentDataset:
        names = list(names)
        missing = [c for c in names if c not in self.covariate_names]
        if missing:
            raise KeyError(f"cannot drop unknown columns {missing}")
        keep = [j for j, c in enumerate(self.covariate_names) if c not in names]
        return self.replace(
            covariates=self.covariates[:, keep],
            covariate_names=tuple(self.covariate_names[j] for j in keep),
        )

    def take(self, index: np.ndarray) -> ExperimentDataset:
        """Row subset (with repetition allowed). Ids are dropped when rows repeat."""
        index = np.asarray(index)
        ids = None
        if self.unit_ids is not None and np.unique(index).size == index.size:
            ids = self.unit_ids[index]
        return self.replace(
            treated=self.treated[index],
            triggered=self.triggered[index],
            covariates=self.covariates[index],
            outcome=self.outcome[index],
            unit_ids=ids,
        )

    @property
    def records(self) -> list[UnitRecord]:
        out = []
        for i in range(self.n):
            treated = bool(self.treated[i])
            trig = bool(self.triggered[i]) if (treated or self.is_two_sided) else None
            out.append(
                UnitRecord(
                    unit_id=str(self.ids[i]),
                    assignment=Assignment.TREATMENT if treated else Assignment.CONTROL,
                    triggered=trig,
                    covariates=tuple(float(v) for v in self.covariates[i]),
                    outcome=float(self.outcome[i]),
                )
            )
        return out

    @classmethod
    def from_records(
        cls,
        records: Sequence[UnitRecord],
        covariate_names: Sequence[str],
        mode: Mode | str | None = None,
        outcome_name: str = "Y",
    ) -> ExperimentDataset:
        if not records:
            raise DataValidationError("no records")
        m = len(covariate_names)
        if any(len(r.covariates) != m for r in records):
            raise DataValidationError("ragged covariate rows")
        treated = np.array([Assignment(r.assignment) is Assignment.TREATMENT for r in records])
        for r, t in zip(records, treated):
            if t and r.triggered is None:
                raise DataValidationError(f"treatment unit {r.unit_id!r} has no trigger flag")
        control_labels = [r.triggered is not None for r, t in zip(records, treated) if not t]
        mode = _resolve_mode(mode, control_labels)
        triggered = np.array([bool(r.triggered) if r.triggered is not None else False for r in records])
        return cls(
            treated=treated,
            triggered=triggered,
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), m),
            outcome=np.array([r.outcome for r in records], dtype=float),
            covariate_names=tuple(covariate_names),
            mode=mode,
            unit_ids=np.array([r.unit_id for r in records], dtype=object),
            outcome_name=outcome_name,
        )

    def equals(self, other: ExperimentDataset) -> bool:
        return (
            self.mode is other.mode
            and self.covariate_names == other.covariate_names
            and self.outcome_name == other.outcome_name
            and np.array_equal(self.treated, other.treated)
            and np.array_equal(self.triggered, other.triggered)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.ids, other.ids)
        )


def _resolve_mode(declared, control_has_label: Sequence[bool]) -> Mode:
    any_label = any(control_has_label)
    if declared is None:
        if any_label and not all(control_has_label):
            raise DataValidationError("trigger labels present on some control rows but not others")
        return Mode.TWO_SIDED if any_label else Mode.ONE_SIDED
    declared = Mode(declared)
    if declared is Mode.ONE_SIDED and any_label:
        raise DataValidationError("control row carries a trigger value but mode is declared one-sided")
    if declared is Mode.TWO_SIDED and not all(control_has_label):
        raise DataValidationError("two-sided mode requires trigger values on every control row")
    return declared


class Partition(NamedTuple):
    """Index arrays of the study subgroups. ``c1``/``c0`` are None for one-sided data."""

    t1: np.ndarray
    t0: np.ndarray
    c: np.ndarray
    c1: np.ndarray | None = None
    c0: np.ndarray | None = None


def partition(ds: ExperimentDataset) -> Partition:
    t = ds.treated
    d = ds.triggered
    c1 = c0 = None
    if ds.is_two_sided:
        c1 = np.flatnonzero(~t & d)
        c0 = np.flatnonzero(~t & ~d)
    return Partition(
        t1=np.flatnonzero(t & d),
        t0=np.flatnonzero(t & ~d),
        c=np.flatnonzero(~t),
        c1=c1,
        c0=c0,
    )


class GroupSummary(NamedTuple):
    n: int
    mean: float
    sample_variance: float
    degenerate: bool = False


def group_summary(values) -> GroupSummary:
    """Mean and ``n - 1`` sample variance. A single value has variance 0, flagged degenerate."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("group_summary of an empty vector")
    if v.size == 1:
        return GroupSummary(1, float(v[0]), 0.0, True)
    return GroupSummary(int(v.size), float(v.mean()), float(v.var(ddof=1)))


# -- CSV --------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for CSV input.

    ``covariates=None`` means every column not otherwise mapped.
    """

    unit_id: str = "unit_id"
    assignment: str = "assignment"
    triggered: str = "triggered"
    outcome: str = "Y"
    covariates: tuple[str, ...] | None = None
    treatment_value: str = "treatment"
    control_value: str = "control"


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"line {line}: non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise DataValidationError(f"line {line}: non-finite value in column {column!r}")
    return value


def _parse_trigger(text: str, line: int) -> bool | None:
    text = text.strip()
    if text == "":
        return None
    if text in ("0", "1"):
        return text == "1"
    raise DataValidationError(f"line {line}: trigger value must be 0, 1 or empty, got {text!r}")


def load_csv(
    path: str | os.PathLike,
    schema: CsvSchema | None = None,
    mode: Mode | str | None = None,
) -> ExperimentDataset:
    """Read and validate an experiment CSV.

    The mode is inferred from whether control rows carry trigger values; a
    declared ``mode`` overrides inference and is validated against the data.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError("empty CSV file (header row required)") from None
        header = [h.strip() for h in header]
        required = [schema.unit_id, schema.assignment, schema.triggered, schema.outcome]
        missing = [c for c in required if c not in header]
        if schema.covariates is not None:
            missing += [c for c in schema.covariates if c not in header]
        if missing:
            raise DataValidationError(f"missing column(s): {missing}")
        if schema.covariates is None:
            cov_names = tuple(h for h in header if h not in required)
        else:
            cov_names = tuple(schema.covariates)
        pos = {h: i for i, h in enumerate(header)}
        cov_pos = [pos[c] for c in cov_names]

        records = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataValidationError(f"line {line}: ragged row, expected {len(header)} fields, got {len(row)}")
            raw_assign = row[pos[schema.assignment]].strip()
            if raw_assign == schema.treatment_value:
                assignment = Assignment.TREATMENT
            elif raw_assign == schema.control_value:
                assignment = Assignment.CONTROL
            else:
                raise DataValidationError(
                    f"line {line}: assignment {raw_assign!r} not in "
                    f"{{{schema.treatment_value!r}, {schema.control_value!r}}}"
                )
            outcome_text = row[pos[schema.outcome]].strip()
            if outcome_text == "":
                raise DataValidationError(f"line {line}: missing outcome")
            records.append(
                UnitRecord(
                    unit_id=row[pos[schema.unit_id]].strip(),
                    assignment=assignment,
                    triggered=_parse_trigger(row[pos[schema.triggered]], line),
                    covariates=tuple(_parse_float(row[p], header[p], line) for p in cov_pos),
                    outcome=_parse_float(outcome_text, schema.outcome, line),
                )
            )
    return ExperimentDataset.from_records(records, cov_names, mode=mode, outcome_name=schema.outcome)


def write_csv(ds: ExperimentDataset, path: str | os.PathLike, schema: CsvSchema | None = None) -> None:
    schema = schema or CsvSchema(outcome=ds.outcome_name)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [schema.unit_id, schema.assignment, schema.triggered, *ds.covariate_names, schema.outcome]
        )
        ids = ds.ids
        for i in range(ds.n):
            treated = bool(ds.treated[i])
            if treated or ds.is_two_sided:
                trig = "1" if ds.triggered[i] else "0"
            else:
                trig = ""
            writer.writerow(
                [
                    ids[i],
                    schema.treatment_value if treated else schema.control_value,
                    trig,
                    *(repr(float(v)) for v in ds.covariates[i]),
                    repr(float(ds.outcome[i])),
                ]
            )
