"""Survey extract parsing and structural completion of occupational groups.

Records are keyed by (occupation, additive_group); all records sharing a key
form an occupational group whose estimates must sum to one.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, TextIO

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9
ALL_WORKERS = "All Workers"

CANONICAL_COLUMNS = (
    "occupation", "soc_code", "additive_group", "element", "level",
    "value", "std_error", "origin",
)


class Origin(str, enum.Enum):
    OBSERVED = "Observed"
    GENERATED_LEVEL = "GeneratedLevel"
    N_MINUS_ONE = "NMinusOneFilled"


class RecordError(ValueError):
    """A row of the extract that cannot be turned into a record."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConstraintViolation(ValueError):
    pass


class CatalogError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class SurveyRecord:
    occupation: str
    soc_code: str
    additive_group: int
    element: str
    level: str
    value: float | None = None
    std_error: float | None = None
    origin: Origin = Origin.OBSERVED

    def __post_init__(self):
        if self.value is not None and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"value {self.value} outside [0, 1] for {self.key}")
        if self.std_error is not None and self.std_error < 0:
            raise ValueError(f"negative standard error for {self.key}")
        if self.origin is Origin.N_MINUS_ONE and self.value is None:
            raise ValueError("an N-1 filled record must carry a value")

    @property
    def known(self) -> bool:
        return self.value is not None

    @property
    def group_key(self) -> tuple[str, int]:
        return (self.occupation, self.additive_group)

    @property
    def level_key(self) -> tuple[str, str]:
        return (self.element, self.level)

    @property
    def key(self) -> tuple[str, int, str, str]:
        return (self.occupation, self.additive_group, self.element, self.level)


@dataclass
class OccupationalGroup:
    key: tuple[str, int]
    members: list[SurveyRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for m in self.members:
            if m.group_key != self.key:
                raise ValueError(f"record {m.key} does not belong to group {self.key}")
            if m.level_key in seen:
                raise ValueError(f"duplicate level {m.level_key} in group {self.key}")
            seen.add(m.level_key)

    @property
    def known_sum(self) -> float:
        return math.fsum(m.value for m in self.members if m.value is not None)

    @property
    def n_missing(self) -> int:
        return sum(1 for m in self.members if m.value is None)

    @property
    def residual(self) -> float:
        return residual(self)


def residual(group: OccupationalGroup) -> float:
    """Mass left for the missing members: 1 - known sum, clamped to [0, 1]."""
    return min(1.0, max(0.0, 1.0 - group.known_sum))


@dataclass(frozen=True)
class Schema:
    """Column names of a raw extract and the filters that select percentages."""

    occupation: str = "occupation_text"
    soc_code: str = "upper_soc_code"
    element: str = "data_element_text"
    level: str = "data_type_text"
    estimate_kind: str = "estimate_type_text"
    estimate_type: str = "estimate_type"
    unit: str = "unit_of_measure"
    additive_group: str = "additive_group"
    value: str = "value"
    delimiter: str = ","
    percent_type: str = "Percent"
    percent_unit: str = "Percentage"
    estimate_label: str = "Estimate"
    std_error_label: str = "Standard Error"

    @classmethod
    def from_mapping(cls, cfg: Mapping | None) -> "Schema":
        cfg = dict(cfg or {})
        if cfg.get("delimiter") in ("tab", "\\t"):
            cfg["delimiter"] = "\t"
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**cfg)


def _parse_percent(text: str, line: int, what: str) -> float | None:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN", "-"):
        return None
    try:
        v = float(text)
    except ValueError:
        raise RecordError(line, f"{what} {text!r} is not numeric") from None
    if not 0.0 <= v <= 100.0:
        raise RecordError(line, f"{what} {v} outside [0, 100]")
    return v / 100.0


def parse_survey(source: TextIO | str, schema: Schema | None = None, *,
                 lenient: bool = False) -> list[SurveyRecord]:
    """Read percentage estimates (and their standard errors) from an extract.

    Estimate rows and standard-error rows for the same level are merged into
    one record.  With ``lenient`` a bad row is skipped with a warning instead
    of raising :class:`RecordError`.
    """
    schema = schema or Schema()
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source, delimiter=schema.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        return []
    header = [h.strip() for h in header]
    required = [schema.occupation, schema.soc_code, schema.element, schema.level,
                schema.estimate_type, schema.unit, schema.additive_group, schema.value]
    missing_cols = [c for c in required if c not in header]
    if missing_cols:
        raise RecordError(1, f"missing columns {missing_cols}")
    col = {name: i for i, name in enumerate(header)}
    has_kind = schema.estimate_kind in col

    estimates: dict[tuple, dict] = {}
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) != len(header):
                raise RecordError(line, f"expected {len(header)} fields, got {len(row)}")
            get = lambda name: row[col[name]].strip()  # noqa: E731
            if get(schema.estimate_type) != schema.percent_type or get(schema.unit) != schema.percent_unit:
                continue
            occupation = get(schema.occupation)
            if occupation == ALL_WORKERS:
                continue
            soc = get(schema.soc_code)
            if not soc.isdigit():
                raise RecordError(line, f"SOC code {soc!r} is not a digit string")
            try:
                group = int(get(schema.additive_group))
            except ValueError:
                raise RecordError(line, f"additive group {get(schema.additive_group)!r} is not an integer") from None
            kind = get(schema.estimate_kind) if has_kind else schema.estimate_label
            if kind not in (schema.estimate_label, schema.std_error_label):
                continue
            is_se = kind == schema.std_error_label
            v = _parse_percent(get(schema.value), line, "standard error" if is_se else "value")
            key = (occupation, group, get(schema.element), get(schema.level))
            slot = estimates.setdefault(key, {"soc": soc, "line": line})
            if slot["soc"] != soc:
                raise RecordError(line, f"conflicting SOC codes for {occupation!r}")
            field_name = "std_error" if is_se else "value"
            if field_name in slot:
                raise RecordError(line, f"duplicate {field_name.replace('_', ' ')} row for {key}")
            slot[field_name] = v
        except RecordError as err:
            if not lenient:
                raise
            logger.warning("skipping %s", err)

    records = []
    for (occupation, group, element, level), slot in estimates.items():
        if "value" not in slot:
            # only a standard error row: the level exists but its estimate is missing
            slot["value"] = None
        records.append(SurveyRecord(occupation, slot["soc"], group, element, level,
                                    slot["value"], slot.get("std_error")))
    return records


def complete_groups(records: Iterable[SurveyRecord],
                    level_catalog: Mapping[int, Sequence[tuple[str, str]]]) -> list[SurveyRecord]:
    """Add a missing-valued record for every catalog level a group lacks.

    Output is ordered by group (occupation, then additive group, in order of
    first appearance) with members in catalog order.
    """
    groups: dict[tuple[str, int], dict[tuple[str, str], SurveyRecord]] = {}
    soc_of: dict[str, str] = {}
    for r in records:
        if r.additive_group not in level_catalog:
            raise CatalogError(f"additive group {r.additive_group} is missing from the level catalog")
        members = groups.setdefault(r.group_key, {})
        if r.level_key in members:
            raise ValueError(f"duplicate record {r.key}")
        if r.level_key not in set(level_catalog[r.additive_group]):
            raise CatalogError(f"level {r.level_key} is not in the catalog of additive group {r.additive_group}")
        members[r.level_key] = r
        soc_of.setdefault(r.occupation, r.soc_code)

    out = []
    for (occupation, ag), members in groups.items():
        for element, level in level_catalog[ag]:
            rec = members.get((element, level))
            if rec is None:
                rec = SurveyRecord(occupation, soc_of[occupation], ag, element, level,
                                   None, None, Origin.GENERATED_LEVEL)
            out.append(rec)
    return out


def group_records(records: Iterable[SurveyRecord]) -> list[OccupationalGroup]:
    groups: dict[tuple[str, int], list[SurveyRecord]] = {}
    for r in records:
        groups.setdefault(r.group_key, []).append(r)
    return [OccupationalGroup(k, v) for k, v in groups.items()]


def complete_n_minus_1(groups: Iterable[OccupationalGroup]) -> list[OccupationalGroup]:
    """Fill the single missing member of any group that lacks exactly one value."""
    out = []
    for g in groups:
        known_sum = g.known_sum
        if known_sum > 1.0 + SUM_TOLERANCE:
            raise ConstraintViolation(f"known values of group {g.key} sum to {known_sum!r} > 1")
        if g.n_missing != 1:
            out.append(g)
            continue
        fill = max(0.0, 1.0 - known_sum)
        members = [replace(m, value=fill, origin=Origin.N_MINUS_ONE) if m.value is None else m
                   for m in g.members]
        out.append(OccupationalGroup(g.key, members))
    return out


def flatten(groups: Iterable[OccupationalGroup]) -> list[SurveyRecord]:
    return [m for g in groups for m in g.members]


def _fmt(v: float | None) -> str:
    return "" if v is None else format(v, ".17g")


def write_records(records: Iterable[SurveyRecord], dest: TextIO) -> None:
    """Write the canonical records file; missing numbers are empty fields.

    Values keep full precision so that known values round-trip bit-exactly.
    """
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(CANONICAL_COLUMNS)
    for r in records:
        w.writerow([r.occupation, r.soc_code, r.additive_group, r.element, r.level,
                    _fmt(r.value), _fmt(r.std_error), r.origin.value])


def read_records(source: TextIO) -> list[SurveyRecord]:
    reader = csv.DictReader(source)
    if reader.fieldnames is None or tuple(reader.fieldnames) != CANONICAL_COLUMNS:
        raise ValueError(f"not a canonical records file (columns {reader.fieldnames})")
    out = []
    for row in reader:
        out.append(SurveyRecord(
            occupation=row["occupation"],
            soc_code=row["soc_code"],
            additive_group=int(row["additive_group"]),
            element=row["element"],
            level=row["level"],
            value=float(row["value"]) if row["value"] else None,
            std_error=float(row["std_error"]) if row["std_error"] else None,
            origin=Origin(row["origin"]),
        ))
    return out
