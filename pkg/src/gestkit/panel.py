"""Panel data model, CSV ingestion and sample-flow accounting.

A panel is the flattened one-row-per-unit table the estimators consume:
an opaque unit id, a binary treatment ``A``, a binary fixed-horizon outcome
``Y`` and a vector of real-valued covariates ``L``.  Arrays are stored
column-wise and frozen on construction so a panel can be shared freely
between threads and bootstrap workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import InitVar, dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from ._io import atomic_write_text, format_float
from .errors import (
    DuplicateUnit,
    EmptyResult,
    FileUnreadable,
    MissingValue,
    NonBinaryOutcome,
    NonBinaryTreatment,
    SchemaMismatch,
    SingleArm,
)

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


class PanelRow(NamedTuple):
    unit_id: str
    treatment: int
    outcome: int
    covariates: tuple


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Immutable column store of ``(unit_id, A, Y, L)`` rows.

    ``check_unique`` may be switched off for bootstrap resamples, which repeat
    units by construction; every panel built from external data is checked.
    """

    schema: tuple
    unit_ids: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    provenance: str = ""
    dropped_missing: int = 0
    check_unique: InitVar[bool] = True

    def __post_init__(self, check_unique):
        schema = tuple(str(s) for s in self.schema)
        ids = _frozen(self.unit_ids, object)
        a = _frozen(self.treatment, np.int8)
        y = _frozen(self.outcome, np.int8)
        n = len(ids)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((n, len(schema)))
        cov = _frozen(cov.reshape(n, len(schema)), float)
        if not (len(a) == len(y) == n):
            raise SchemaMismatch("unit, treatment and outcome columns differ in length")
        if not np.isin(a, (0, 1)).all():
            raise NonBinaryTreatment(f"treatment outside {{0,1}} at row {int(np.flatnonzero(~np.isin(a, (0, 1)))[0])}")
        if not np.isin(y, (0, 1)).all():
            raise NonBinaryOutcome(f"outcome outside {{0,1}} at row {int(np.flatnonzero(~np.isin(y, (0, 1)))[0])}")
        if not np.isfinite(cov).all():
            bad = int(np.flatnonzero(~np.isfinite(cov).all(axis=1))[0])
            raise MissingValue(f"non-finite covariate at row {bad}")
        if check_unique and len(set(ids.tolist())) != n:
            raise DuplicateUnit("unit_id values are not unique")
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "treatment", a)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariates", cov)

    @classmethod
    def from_rows(cls, schema, rows: Iterable[PanelRow], provenance=""):
        rows = list(rows)
        p = len(schema)
        for i, r in enumerate(rows):
            if len(r.covariates) != p:
                raise SchemaMismatch(f"row {i} has {len(r.covariates)} covariates, schema declares {p}")
        return cls(
            schema=tuple(schema),
            unit_ids=[r.unit_id for r in rows],
            treatment=[r.treatment for r in rows],
            outcome=[r.outcome for r in rows],
            covariates=np.array([r.covariates for r in rows], dtype=float).reshape(len(rows), p),
            provenance=provenance,
        )

    def __len__(self):
        return len(self.unit_ids)

    @property
    def n(self):
        return len(self.unit_ids)

    @property
    def n_treated(self):
        return int(self.treatment.sum())

    @property
    def n_control(self):
        return self.n - self.n_treated

    def row(self, i) -> PanelRow:
        return PanelRow(
            str(self.unit_ids[i]),
            int(self.treatment[i]),
            int(self.outcome[i]),
            tuple(float(v) for v in self.covariates[i]),
        )

    def rows(self):
        for i in range(self.n):
            yield self.row(i)

    def covariate(self, name):
        try:
            j = self.schema.index(name)
        except ValueError:
            raise SchemaMismatch(f"covariate {name!r} not in schema {list(self.schema)}") from None
        return self.covariates[:, j]

    def take(self, idx, *, provenance=None, check_unique=False):
        idx = np.asarray(idx)
        return Panel(
            schema=self.schema,
            unit_ids=self.unit_ids[idx],
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            covariates=self.covariates[idx],
            provenance=self.provenance if provenance is None else provenance,
            dropped_missing=self.dropped_missing,
            check_unique=check_unique,
        )

    def select_covariates(self, names: Sequence[str]):
        cols = [self.schema.index(n) if n in self.schema else None for n in names]
        missing = [n for n, c in zip(names, cols) if c is None]
        if missing:
            raise SchemaMismatch(f"covariates {missing} not in schema {list(self.schema)}")
        return Panel(
            schema=tuple(names),
            unit_ids=self.unit_ids,
            treatment=self.treatment,
            outcome=self.outcome,
            covariates=self.covariates[:, cols],
            provenance=self.provenance,
            dropped_missing=self.dropped_missing,
        )

    def add_covariate(self, name, values):
        values = np.asarray(values, dtype=float).reshape(self.n, 1)
        return Panel(
            schema=self.schema + (name,),
            unit_ids=self.unit_ids,
            treatment=self.treatment,
            outcome=self.outcome,
            covariates=np.hstack([self.covariates, values]),
            provenance=self.provenance,
            dropped_missing=self.dropped_missing,
        )

    def equals(self, other):
        """Exact (bit-level for floats) equality of content; provenance ignored."""
        return (
            self.schema == other.schema
            and self.n == other.n
            and np.array_equal(self.unit_ids, other.unit_ids)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.outcome, other.outcome)
            and self.covariates.tobytes() == other.covariates.tobytes()
        )

    def require_both_arms(self):
        if self.n_treated == 0 or self.n_control == 0:
            raise SingleArm(f"panel needs both arms (treated={self.n_treated}, control={self.n_control})")


# --------------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class ColumnMapping:
    unit: str = "unit_id"
    treatment: str = "treatment"
    outcome: str = "outcome"
    covariates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


def _parse_cell(text):
    """Return a float, or None for a missing / non-finite cell."""
    t = text.strip()
    if t.lower() in MISSING_TOKENS:
        return None
    try:
        v = float(t)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else None


def load_panel(path, mapping: ColumnMapping, *, drop_missing=False) -> Panel:
    """Read a UTF-8 CSV with a header row into a :class:`Panel`.

    Columns are located by name through ``mapping``; extra columns are ignored.
    With ``drop_missing`` unset the first missing or non-finite value raises
    :class:`MissingValue`; with it set such rows are skipped and counted in
    ``Panel.dropped_missing``.
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            body = list(reader)
    except (OSError, UnicodeDecodeError) as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise SchemaMismatch(f"{path} is empty (no header row)")
    header = [h.strip() for h in header]
    wanted = [mapping.unit, mapping.treatment, mapping.outcome, *mapping.covariates]
    absent = [c for c in wanted if c not in header]
    if absent:
        raise SchemaMismatch(f"columns {absent} not found in {path}; header is {header}")
    pos = {c: header.index(c) for c in wanted}

    ids, a, y, cov = [], [], [], []
    dropped = 0
    for i, rec in enumerate(body):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise SchemaMismatch(f"row {i} has {len(rec)} fields, header has {len(header)}")
        vals = {c: _parse_cell(rec[pos[c]]) for c in wanted[1:]}
        uid = rec[pos[mapping.unit]].strip()
        missing = [c for c, v in vals.items() if v is None] + ([mapping.unit] if not uid else [])
        if missing:
            if drop_missing:
                dropped += 1
                continue
            raise MissingValue(f"row {i}: missing value in column(s) {missing}")
        bad = [c for c, v in vals.items() if isinstance(v, float) and math.isnan(v)]
        if bad:
            raise SchemaMismatch(f"row {i}: non-numeric value in column(s) {bad}")
        at, yt = vals[mapping.treatment], vals[mapping.outcome]
        if at not in (0.0, 1.0):
            raise NonBinaryTreatment(f"row {i}: treatment {rec[pos[mapping.treatment]]!r} not in {{0,1}}")
        if yt not in (0.0, 1.0):
            raise NonBinaryOutcome(f"row {i}: outcome {rec[pos[mapping.outcome]]!r} not in {{0,1}}")
        ids.append(uid)
        a.append(int(at))
        y.append(int(yt))
        cov.append([vals[c] for c in mapping.covariates])

    prov = f"csv:{path}"
    if dropped:
        prov += f" (dropped {dropped} rows with missing values)"
    return Panel(
        schema=mapping.covariates,
        unit_ids=ids,
        treatment=a,
        outcome=y,
        covariates=np.array(cov, dtype=float).reshape(len(ids), len(mapping.covariates)),
        provenance=prov,
        dropped_missing=dropped,
    )


def write_panel(panel: Panel, path, mapping: ColumnMapping | None = None):
    """Write ``panel`` as CSV (atomically); floats use round-trip repr."""
    if mapping is None:
        mapping = ColumnMapping(covariates=panel.schema)
    header = [mapping.unit, mapping.treatment, mapping.outcome, *mapping.covariates]
    lines = [",".join(header)]
    for uid, a, y, row in zip(panel.unit_ids, panel.treatment, panel.outcome, panel.covariates.tolist()):
        lines.append(",".join([str(uid), str(int(a)), str(int(y)), *map(format_float, row)]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------------------- sample flow


class RowFilter(NamedTuple):
    name: str
    predicate: Callable[[PanelRow], bool]
    reason: str


@dataclass(frozen=True)
class FlowStage:
    stage: str
    n_units: int
    n_rows: int
    reason: str

    def to_dict(self):
        return {"stage": self.stage, "n_units": self.n_units, "n_rows": self.n_rows, "reason": self.reason}


@dataclass(frozen=True)
class SampleFlow:
    stages: tuple

    def to_json(self):
        return [s.to_dict() for s in self.stages]

    @property
    def final(self):
        return self.stages[-1]


def _n_units(panel):
    return len(set(panel.unit_ids.tolist()))


def sample_flow(raw: Panel, filters: Sequence[RowFilter] = (), *, initial_stage="Input") -> tuple[Panel, SampleFlow]:
    """Apply ``filters`` in order, recording units/rows left after each stage.

    The first stage always reports the raw counts.  Raises :class:`EmptyResult`
    if any filter leaves nothing.
    """
    stages = [FlowStage(initial_stage, _n_units(raw), raw.n, "-")]
    current = raw
    for f in filters:
        keep = np.fromiter((bool(f.predicate(r)) for r in current.rows()), dtype=bool, count=current.n)
        if not keep.any():
            raise EmptyResult(f"filter {f.name!r} leaves zero rows")
        current = current.take(np.flatnonzero(keep), check_unique=True)
        stages.append(FlowStage(f.name, _n_units(current), current.n, f.reason))
    return current, SampleFlow(tuple(stages))


# --------------------------------------------------------------------------- group summary


@dataclass(frozen=True)
class ArmSummary:
    arm: int
    n: int
    outcome_rate: float
    covariate_means: dict

    def to_dict(self):
        return {
            "arm": self.arm,
            "n": self.n,
            "outcome_rate": self.outcome_rate,
            "covariate_means": dict(self.covariate_means),
        }


@dataclass(frozen=True)
class GroupSummary:
    treated: ArmSummary
    control: ArmSummary
    n: int
    outcome_rate: float
    covariate_means: dict = field(default_factory=dict)

    @property
    def treated_fraction(self):
        return self.treated.n / self.n

    @property
    def risk_difference(self):
        return self.treated.outcome_rate - self.control.outcome_rate

    @property
    def risk_ratio(self):
        if self.control.outcome_rate == 0:
            return math.inf
        return self.treated.outcome_rate / self.control.outcome_rate

    def to_dict(self):
        return {
            "arms": [self.treated.to_dict(), self.control.to_dict()],
            "n": self.n,
            "outcome_rate": self.outcome_rate,
            "covariate_means": dict(self.covariate_means),
            "treated_fraction": self.treated_fraction,
            "risk_difference": self.risk_difference,
            "risk_difference_pp": 100.0 * self.risk_difference,
            "risk_ratio": self.risk_ratio,
        }


def _arm(panel, arm):
    mask = panel.treatment == arm
    n = int(mask.sum())
    means = {name: float(panel.covariates[mask, j].mean()) for j, name in enumerate(panel.schema)}
    return ArmSummary(arm, n, float(panel.outcome[mask].mean()), means)


def summarize_groups(panel: Panel) -> GroupSummary:
    if panel.n == 0:
        raise SingleArm("empty panel")
    panel.require_both_arms()
    means = {name: float(panel.covariates[:, j].mean()) for j, name in enumerate(panel.schema)}
    return GroupSummary(
        treated=_arm(panel, 1),
        control=_arm(panel, 0),
        n=panel.n,
        outcome_rate=float(panel.outcome.mean()),
        covariate_means=means,
    )


def group_summary_from_rates(n_treated, rate_treated, n_control, rate_control) -> GroupSummary:
    """Build a summary from published arm sizes and rates (no covariates)."""
    n = n_treated + n_control
    overall = (n_treated * rate_treated + n_control * rate_control) / n
    return GroupSummary(
        treated=ArmSummary(1, n_treated, rate_treated, {}),
        control=ArmSummary(0, n_control, rate_control, {}),
        n=n,
        outcome_rate=overall,
    )
