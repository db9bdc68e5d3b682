"""Ingest and standardize per-state traffic-stop exports.

Pipeline: ``parse_source`` (delimited text -> RawRow, malformed lines to an
error sink) -> ``normalize_record`` (per-state schema + reference tables ->
StopRecord) -> ``dedupe`` -> ``reclassify_hispanic`` -> ``write_records``.
Every rule that changes or drops a value bumps a counter on an ``Audit`` so
that row counts reconcile exactly:

    rows read == records written + error-sink rows + duplicates removed

State schemas are INI-style key-value files (see ``StateSchema.from_text``);
no code is executed from configuration.
"""

from __future__ import annotations

import configparser
import csv
import datetime as dt
import io
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Sequence

import pandas as pd

log = logging.getLogger(__name__)

RACES = ("White", "Black", "Hispanic", "Asian", "Other", "Unknown")
ANALYSIS_RACES = ("White", "Black", "Hispanic")
GENDERS = ("Male", "Female", "Unknown")
# most severe first
OUTCOMES = ("Arrest", "Summons", "Citation", "WrittenWarning", "VerbalWarning", "None", "Unknown")
SEARCH_TYPES = ("Consent", "ProbableCause", "IncidentToArrest", "Inventory", "Warrant", "ProtectiveFrisk", "K9", "Other")
VIOLATIONS = (
    "license",
    "license/registration",
    "license/paperwork",
    "registration/plates",
    "speeding",
    "seat belt",
    "stop sign/light",
    "equipment",
    "equipment/lights",
    "dui",
    "moving violation",
    "moving violation/safe movement",
    "moving violation/cell phone",
    "truck",
    "other",
)
DISTRICT_STATES = frozenset({"NC", "IL", "RI"})
AGE_MIN, AGE_MAX = 15, 100

STANDARD_COLUMNS = (
    "state",
    "stop_date",
    "stop_time",
    "location",
    "location_kind",
    "driver_race",
    "driver_gender",
    "driver_age",
    "violations",
    "stop_purpose",
    "search_conducted",
    "search_types",
    "contraband_found",
    "outcome",
)
LIST_FIELDS = ("violations", "search_types")
BOOL_FIELDS = ("search_conducted", "contraband_found")
# raw fields a schema may map besides the standard columns
AUX_FIELDS = (
    "stop_datetime",
    "driver_ethnicity",
    "driver_birth_date",
    "driver_birth_year",
)
LIST_SEPARATOR = "|"

_TRUE = frozenset({"true", "t", "yes", "y", "1"})
_FALSE = frozenset({"false", "f", "no", "n", "0"})
_MISSING = frozenset({"", "na", "n/a", "nan", "null", "?"})

_DEFAULT_RACE = {
    "w": "White",
    "white": "White",
    "caucasian": "White",
    "b": "Black",
    "black": "Black",
    "african american": "Black",
    "h": "Hispanic",
    "hispanic": "Hispanic",
    "latino": "Hispanic",
    "a": "Asian",
    "asian": "Asian",
    "pacific islander": "Asian",
    "south asian": "Asian",
    "asian/pacific islander": "Asian",
    "i": "Other",
    "native american": "Other",
    "american indian": "Other",
    "alaskan native": "Other",
    "other": "Other",
    "o": "Other",
    "u": "Unknown",
    "unknown": "Unknown",
}
_DEFAULT_GENDER = {"m": "Male", "male": "Male", "f": "Female", "female": "Female", "u": "Unknown", "unknown": "Unknown"}
_DEFAULT_OUTCOME = {
    "arrest": "Arrest",
    "custodial arrest": "Arrest",
    "summons": "Summons",
    "citation": "Citation",
    "ticket": "Citation",
    "written warning": "WrittenWarning",
    "warning": "WrittenWarning",
    "verbal warning": "VerbalWarning",
    "no action": "None",
    "none": "None",
}
_DEFAULT_SEARCH_TYPE = {
    "consent": "Consent",
    "probable cause": "ProbableCause",
    "incident to arrest": "IncidentToArrest",
    "inventory": "Inventory",
    "warrant": "Warrant",
    "protective frisk": "ProtectiveFrisk",
    "frisk": "ProtectiveFrisk",
    "k9": "K9",
    "k9 search": "K9",
    "drug dog alert": "K9",
    "any k9 used for search": "K9",
    "other": "Other",
}
_DEFAULT_ETHNICITY = {"h": True, "hispanic": True, "hispanic or latino": True, "latino": True, "n": False, "non-hispanic": False}


def _canonical_map(values: Iterable[str], extra: Mapping[str, str]) -> dict[str, str]:
    out = {v.lower(): v for v in values}
    out.update({k.lower(): v for k, v in extra.items()})
    return out


class SchemaError(ValueError):
    """Invalid schema or a schema that does not fit its source file."""


class SourceError(OSError):
    """Unreadable source file."""


class RecordError(ValueError):
    """A row that cannot be normalized; routed to the error sink."""


# -- types -----------------------------------------------------------------


@dataclass(frozen=True)
class RawRow:
    source_state: str
    columns: dict[str, str]
    line: int = 0


@dataclass(frozen=True)
class StopRecord:
    state: str
    stop_date: dt.date | None = None
    stop_time: int | None = None  # minute of day
    location: str | None = None
    location_kind: str = "county"
    driver_race: str = "Unknown"
    driver_gender: str = "Unknown"
    driver_age: int | None = None
    violations: tuple[str, ...] = ()
    stop_purpose: str | None = None
    search_conducted: bool | None = None
    search_types: tuple[str, ...] = ()
    contraband_found: bool | None = None
    outcome: str = "Unknown"
    # linkage fields (officer id, driver names, milepost, ...) used by dedupe
    # and surname matching; never written to standardized output
    extras: tuple[tuple[str, str], ...] = ()
    source_line: int = 0

    def extra(self, name: str) -> str | None:
        return dict(self.extras).get(name)

    def to_row(self) -> dict[str, str]:
        """Standardized text row, columns in STANDARD_COLUMNS order."""

        def fmt_bool(v):
            return "" if v is None else ("TRUE" if v else "FALSE")

        return {
            "state": self.state,
            "stop_date": self.stop_date.isoformat() if self.stop_date else "",
            "stop_time": f"{self.stop_time // 60:02d}:{self.stop_time % 60:02d}" if self.stop_time is not None else "",
            "location": self.location or "",
            "location_kind": self.location_kind,
            "driver_race": self.driver_race,
            "driver_gender": self.driver_gender,
            "driver_age": "" if self.driver_age is None else str(self.driver_age),
            "violations": LIST_SEPARATOR.join(self.violations),
            "stop_purpose": self.stop_purpose or "",
            "search_conducted": fmt_bool(self.search_conducted),
            "search_types": LIST_SEPARATOR.join(self.search_types),
            "contraband_found": fmt_bool(self.contraband_found),
            "outcome": self.outcome,
        }

    def standard_fields(self) -> tuple:
        """Field values that define equality in standardized output."""
        return tuple(getattr(self, c) for c in STANDARD_COLUMNS)


@dataclass(frozen=True)
class SurnameEntry:
    name: str
    pct_hispanic: float

    def __post_init__(self):
        if not 0.0 <= self.pct_hispanic <= 1.0:
            raise ValueError(f"pct_hispanic for {self.name} outside [0, 1]")


@dataclass(frozen=True)
class DedupKey:
    column_names: tuple[str, ...]

    def __post_init__(self):
        if not self.column_names:
            raise ValueError("dedup key needs at least one field")


@dataclass
class RowError:
    state: str
    line: int
    reason: str
    raw: str = ""


class Audit:
    """Per-rule counters plus the error sink."""

    def __init__(self):
        self.counts: Counter = Counter()
        self.errors: list[RowError] = []

    def bump(self, key: str, n: int = 1) -> None:
        self.counts[key] += n

    def error(self, state: str, line: int, reason: str, raw: str = "") -> None:
        self.errors.append(RowError(state, line, reason, raw))
        self.counts["error_sink"] += 1

    def merge(self, other: "Audit") -> None:
        self.counts.update(other.counts)
        self.errors.extend(other.errors)

    def conserved(self) -> bool:
        c = self.counts
        return c["rows_read"] == c["records_out"] + c["error_sink"] + c["duplicates_removed"]

    def to_dict(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "conservation_holds": self.conserved(),
            "errors": [e.__dict__ for e in self.errors],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# -- schema ----------------------------------------------------------------


@dataclass
class StateSchema:
    """How one state's export maps onto StopRecord fields.

    ``columns`` maps a standardized field to one or more raw column names.
    Boolean fields OR their columns together, list fields concatenate them,
    and other fields take the first non-empty column.
    """

    state: str
    columns: dict[str, tuple[str, ...]]
    delimiter: str = ","
    quotechar: str = '"'
    encoding: str = "utf-8"
    date_formats: tuple[str, ...] = ("%Y-%m-%d", "%m/%d/%Y")
    time_formats: tuple[str, ...] = ("%H:%M", "%H:%M:%S", "%I:%M %p")
    datetime_formats: tuple[str, ...] = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%m/%d/%Y %H:%M")
    location_kind: str | None = None
    midnight_is_missing: bool = False
    list_separator: str = LIST_SEPARATOR
    dedup_key: tuple[str, ...] = ()
    race_map: dict[str, str] = field(default_factory=dict)
    gender_map: dict[str, str] = field(default_factory=dict)
    outcome_map: dict[str, str] = field(default_factory=dict)
    search_type_map: dict[str, str] = field(default_factory=dict)
    violation_map: dict[str, str] = field(default_factory=dict)
    ethnicity_map: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self.state = self.state.upper()
        unknown = set(self.columns) - set(STANDARD_COLUMNS) - set(AUX_FIELDS) - self.extra_fields
        if unknown:
            raise SchemaError(f"{self.state}: unknown standardized fields {sorted(unknown)}")
        derived = {"stop_date", "stop_time"} if "stop_datetime" in self.columns else set()
        missing = [k for k in self.dedup_key if k not in self.columns and k not in derived]
        if missing:
            raise SchemaError(f"{self.state}: dedup key fields {missing} are not mapped to source columns")
        if self.location_kind is None:
            self.location_kind = "district" if self.state in DISTRICT_STATES else "county"
        self._race = _canonical_map(RACES, {**_DEFAULT_RACE, **self.race_map})
        self._gender = _canonical_map(GENDERS, {**_DEFAULT_GENDER, **self.gender_map})
        self._outcome = _canonical_map(OUTCOMES, {**_DEFAULT_OUTCOME, **self.outcome_map})
        self._search = _canonical_map(SEARCH_TYPES, {**_DEFAULT_SEARCH_TYPE, **self.search_type_map})
        self._violation = _canonical_map(VIOLATIONS, self.violation_map)
        self._ethnicity = {**_DEFAULT_ETHNICITY, **{k.lower(): v for k, v in self.ethnicity_map.items()}}

    @property
    def extra_fields(self) -> set[str]:
        return {k for k in self.columns if k.startswith("x_")}

    @property
    def required_columns(self) -> set[str]:
        return {c for cols in self.columns.values() for c in cols}

    def validate_header(self, header: Sequence[str]) -> None:
        if len(set(header)) != len(header):
            raise SchemaError(f"{self.state}: duplicate column names in header")
        missing = sorted(self.required_columns - set(header))
        if missing:
            raise SchemaError(f"{self.state}: schema references columns absent from the file: {missing}")

    @classmethod
    def from_text(cls, text: str) -> "StateSchema":
        """Parse the key-value schema format.

        Sections: ``[schema]`` (state, delimiter, date_formats, time_formats,
        datetime_formats, location_kind, midnight_is_missing,
        list_separator, dedup_key), ``[columns]`` (standardized field =
        comma-separated raw columns; linkage fields are prefixed ``x_``),
        and optional value maps ``[race]``, ``[gender]``, ``[outcome]``,
        ``[search_type]``, ``[violation]``, ``[ethnicity]`` (raw value =
        standardized value, matched case-insensitively).
        """
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise SchemaError(f"unparseable schema: {exc}") from exc
        if "schema" not in parser or "columns" not in parser:
            raise SchemaError("schema needs [schema] and [columns] sections")
        opts = parser["schema"]
        if "state" not in opts:
            raise SchemaError("[schema] needs a state")

        def split(value: str, sep: str = ",") -> tuple[str, ...]:
            return tuple(v.strip() for v in value.split(sep) if v.strip())

        kwargs: dict = {
            "state": opts["state"],
            "columns": {k: split(v) for k, v in parser["columns"].items()},
        }
        delim = opts.get("delimiter", ",")
        kwargs["delimiter"] = {"tab": "\t", "\\t": "\t", "comma": ",", "pipe": "|", "semicolon": ";"}.get(delim, delim)
        for key in ("date_formats", "time_formats", "datetime_formats"):
            if key in opts:
                kwargs[key] = split(opts[key], ";")
        for key in ("location_kind", "list_separator", "encoding", "quotechar"):
            if key in opts:
                kwargs[key] = opts[key]
        if "midnight_is_missing" in opts:
            kwargs["midnight_is_missing"] = opts.getboolean("midnight_is_missing")
        if "dedup_key" in opts:
            kwargs["dedup_key"] = split(opts["dedup_key"])
        for section in ("race", "gender", "outcome", "search_type", "violation"):
            if section in parser:
                kwargs[f"{section}_map"] = dict(parser[section].items())
        if "ethnicity" in parser:
            kwargs["ethnicity_map"] = {k: v.strip().lower() == "hispanic" for k, v in parser["ethnicity"].items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "StateSchema":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise SchemaError(f"cannot read schema {path}: {exc}") from exc


def standard_schema(state: str = "XX") -> StateSchema:
    """Schema that reads this package's own standardized output."""
    return StateSchema(
        state=state,
        columns={c: (c,) for c in STANDARD_COLUMNS},
        date_formats=("%Y-%m-%d",),
        time_formats=("%H:%M",),
    )


@dataclass
class RefTables:
    """Location and violation lookups, immutable after load.

    ``locations`` maps (state, raw value upper-cased) -> location id.  States
    without any entries keep the stripped raw value as their location id.
    """

    locations: dict[tuple[str, str], str] = field(default_factory=dict)
    violations: dict[tuple[str, str], str] = field(default_factory=dict)

    @classmethod
    def load(cls, locations: str | Path | None = None, violations: str | Path | None = None) -> "RefTables":
        """CSV files with columns ``state,raw,location`` and ``state,raw,code``."""
        loc, vio = {}, {}
        if locations:
            for row in pd.read_csv(locations, dtype=str, keep_default_na=False).itertuples(index=False):
                loc[(row.state.upper(), row.raw.strip().upper())] = row.location
        if violations:
            for row in pd.read_csv(violations, dtype=str, keep_default_na=False).itertuples(index=False):
                vio[(row.state.upper(), row.raw.strip().lower())] = row.code
        return cls(loc, vio)

    def __post_init__(self):
        self._location_states = {s for s, _ in self.locations}

    def location(self, state: str, raw: str) -> tuple[str | None, bool]:
        """(location id, mapped?) for a raw location value."""
        if state not in self._location_states:
            return raw, True
        hit = self.locations.get((state, raw.upper()))
        return hit, hit is not None


# -- parsing ---------------------------------------------------------------


def _open_text(file, encoding: str) -> IO[str]:
    if isinstance(file, (str, Path)):
        try:
            return open(file, newline="", encoding=encoding)
        except OSError as exc:
            raise SourceError(f"cannot read {file}: {exc}") from exc
    if isinstance(file, io.TextIOBase):
        return file
    return io.TextIOWrapper(file, encoding=encoding, newline="")


def read_header(file, schema: StateSchema) -> list[str]:
    with _open_text(file, schema.encoding) as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter, quotechar=schema.quotechar)
        return next(reader, [])


def parse_source(file, schema: StateSchema, audit: Audit | None = None) -> Iterator[RawRow]:
    """Yield one RawRow per data line of a delimited export.

    Lines with the wrong number of fields (or undecodable bytes) go to the
    audit's error sink with their line number.  The header is validated
    against the schema before any row is yielded.
    """
    audit = audit if audit is not None else Audit()
    fh = _open_text(file, schema.encoding)
    try:
        reader = csv.reader(fh, delimiter=schema.delimiter, quotechar=schema.quotechar, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            return
        except (csv.Error, UnicodeDecodeError) as exc:
            raise SourceError(f"{schema.state}: unreadable header: {exc}") from exc
        schema.validate_header(header)
        width = len(header)
        while True:
            start = reader.line_num + 1
            try:
                values = next(reader)
            except StopIteration:
                break
            except (csv.Error, UnicodeDecodeError) as exc:
                audit.bump("rows_read")
                audit.error(schema.state, start, f"malformed line: {exc}")
                continue
            if not values:
                continue
            audit.bump("rows_read")
            if len(values) != width:
                audit.error(
                    schema.state, start, f"expected {width} fields, found {len(values)}", schema.delimiter.join(values)
                )
                continue
            yield RawRow(schema.state, dict(zip(header, values)), start)
    finally:
        if isinstance(file, (str, Path)):
            fh.close()


# -- normalization ---------------------------------------------------------

_TWO_DIGIT_YEAR = re.compile(r"^\s*\d{1,2}[/.-]\d{1,2}[/.-]\d{2}(\s|$)")


def _parse_date(value: str, formats: Sequence[str]) -> dt.date | None:
    for f in formats:
        try:
            return dt.datetime.strptime(value, f).date()
        except ValueError:
            pass
    if _TWO_DIGIT_YEAR.match(value):
        raise RecordError(f"ambiguous two-digit year in date {value!r}")
    return None


def _parse_time(value: str, formats: Sequence[str]) -> int | None:
    for f in formats:
        try:
            t = dt.datetime.strptime(value, f)
            return t.hour * 60 + t.minute
        except ValueError:
            pass
    return None


def _parse_bool(value: str) -> bool | None:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    return None


def _values(row: RawRow, schema: StateSchema, name: str) -> list[str]:
    return [row.columns.get(c, "").strip() for c in schema.columns.get(name, ())]


def _first(row: RawRow, schema: StateSchema, name: str) -> str:
    for v in _values(row, schema, name):
        if v.lower() not in _MISSING:
            return v
    return ""


def _split_list(values: list[str], sep: str) -> list[str]:
    out = []
    for v in values:
        out.extend(p.strip() for p in v.split(sep) if p.strip().lower() not in _MISSING)
    return out


def _age_years(birth: dt.date, on: dt.date) -> int:
    return on.year - birth.year - ((on.month, on.day) < (birth.month, birth.day))


def enforce_rules(record: StopRecord, audit: Audit | None = None) -> StopRecord:
    """Record-level consistency rules (age window, contraband needs a search)."""
    audit = audit if audit is not None else Audit()
    changes = {}
    if record.driver_age is not None and not AGE_MIN <= record.driver_age < AGE_MAX:
        changes["driver_age"] = None
        audit.bump("age_out_of_range")
    if record.contraband_found and record.search_conducted is not True:
        changes["contraband_found"] = False
        audit.bump("contraband_without_search")
    return replace(record, **changes) if changes else record


def normalize_record(
    row: RawRow | StopRecord,
    schema: StateSchema,
    ref_tables: RefTables | None = None,
    audit: Audit | None = None,
) -> StopRecord:
    """Apply the field normalization rules to one raw row.

    Unmappable values become Unknown/absent and bump a ``unmapped_*``
    counter.  Only an ambiguous two-digit-year date raises RecordError.
    Passing an already-normalized StopRecord re-applies the record-level
    rules, which leave it unchanged.
    """
    audit = audit if audit is not None else Audit()
    if isinstance(row, StopRecord):
        return enforce_rules(row, audit)
    ref_tables = ref_tables or RefTables()
    state = row.source_state.upper()

    # date and time
    stop_date = stop_time = None
    raw_dt = _first(row, schema, "stop_datetime")
    if raw_dt:
        for f in schema.datetime_formats:
            try:
                parsed = dt.datetime.strptime(raw_dt, f)
                stop_date, stop_time = parsed.date(), parsed.hour * 60 + parsed.minute
                break
            except ValueError:
                pass
        else:
            if _TWO_DIGIT_YEAR.match(raw_dt):
                raise RecordError(f"ambiguous two-digit year in {raw_dt!r}")
            audit.bump("unmapped_stop_datetime")
    raw_date = _first(row, schema, "stop_date")
    if raw_date:
        stop_date = _parse_date(raw_date, schema.date_formats)
        if stop_date is None:
            audit.bump("unmapped_stop_date")
    raw_time = _first(row, schema, "stop_time")
    if raw_time:
        stop_time = _parse_time(raw_time, schema.time_formats)
        if stop_time is None:
            audit.bump("unmapped_stop_time")
    if schema.midnight_is_missing and stop_time == 0:
        stop_time = None
        audit.bump("midnight_time_missing")

    # location
    location = None
    raw_loc = _first(row, schema, "location")
    if raw_loc:
        location, mapped = ref_tables.location(state, raw_loc)
        if not mapped:
            audit.bump("unmapped_location")
    kind = _first(row, schema, "location_kind") or schema.location_kind

    # race / ethnicity
    raw_race = _first(row, schema, "driver_race")
    race = schema._race.get(raw_race.lower(), None) if raw_race else "Unknown"
    if race is None:
        race = "Unknown"
        audit.bump("unmapped_race")
    raw_eth = _first(row, schema, "driver_ethnicity")
    if raw_eth and schema._ethnicity.get(raw_eth.lower()) and race != "Hispanic":
        race = "Hispanic"
        audit.bump("hispanic_ethnicity_override")

    raw_gender = _first(row, schema, "driver_gender")
    gender = schema._gender.get(raw_gender.lower(), None) if raw_gender else "Unknown"
    if gender is None:
        gender = "Unknown"
        audit.bump("unmapped_gender")

    # age: explicit age, else birth date, else birth year
    age = None
    raw_age = _first(row, schema, "driver_age")
    if raw_age:
        try:
            age = int(float(raw_age))
        except ValueError:
            audit.bump("unmapped_driver_age")
    else:
        raw_birth = _first(row, schema, "driver_birth_date")
        raw_year = _first(row, schema, "driver_birth_year")
        if raw_birth and stop_date:
            birth = _parse_date(raw_birth, schema.date_formats)
            if birth is None:
                audit.bump("unmapped_driver_age")
            else:
                age = _age_years(birth, stop_date)
        elif raw_year and stop_date:
            try:
                age = stop_date.year - int(raw_year)
            except ValueError:
                audit.bump("unmapped_driver_age")

    # violations and purpose share the taxonomy
    def violation_code(raw: str) -> str | None:
        code = ref_tables.violations.get((state, raw.lower())) or schema._violation.get(raw.lower())
        if code is None:
            audit.bump("unmapped_violation")
        return code

    violations = []
    for v in _split_list(_values(row, schema, "violations"), schema.list_separator):
        code = violation_code(v)
        if code is not None and code not in violations:
            violations.append(code)
    raw_purpose = _first(row, schema, "stop_purpose")
    purpose = violation_code(raw_purpose) if raw_purpose else None

    # search and contraband: OR across source flags
    def any_flag(name: str) -> bool | None:
        flags = [_parse_bool(v) for v in _values(row, schema, name)]
        if any(f is True for f in flags):
            return True
        if any(f is False for f in flags):
            return False
        return None

    searched = any_flag("search_conducted")
    contraband = any_flag("contraband_found")
    search_types = []
    for v in _split_list(_values(row, schema, "search_types"), schema.list_separator):
        code = schema._search.get(v.lower())
        if code is None:
            audit.bump("unmapped_search_type")
            code = "Other"
        if code not in search_types:
            search_types.append(code)

    # outcome: most severe of those given
    outcomes = []
    for v in _split_list(_values(row, schema, "outcome"), schema.list_separator):
        code = schema._outcome.get(v.lower())
        if code is None:
            audit.bump("unmapped_outcome")
        else:
            outcomes.append(code)
    if len(set(outcomes)) > 1:
        audit.bump("outcome_multiple_resolved")
    outcome = min(outcomes, key=OUTCOMES.index) if outcomes else "Unknown"

    extras = tuple(sorted((k, _first(row, schema, k)) for k in schema.extra_fields))
    record = StopRecord(
        state=state,
        stop_date=stop_date,
        stop_time=stop_time,
        location=location,
        location_kind=kind,
        driver_race=race,
        driver_gender=gender,
        driver_age=age,
        violations=tuple(violations),
        stop_purpose=purpose,
        search_conducted=searched,
        search_types=tuple(search_types),
        contraband_found=contraband,
        outcome=outcome,
        extras=extras,
        source_line=row.line,
    )
    return enforce_rules(record, audit)


# -- dedup -----------------------------------------------------------------


def _key_value(record: StopRecord, name: str):
    if name.startswith("x_"):
        return record.extra(name) or None
    return getattr(record, name)


def _merge(group: list[StopRecord]) -> StopRecord:
    """Field-wise union in source order.

    Scalars take the first non-missing value; boolean flags are OR-ed (a
    flag set on any copy survives); lists are unioned in order; the outcome
    is the most severe recorded.
    """
    group = sorted(group, key=lambda r: r.source_line)
    first = group[0]
    merged = {}
    for f in fields(StopRecord):
        name = f.name
        values = [getattr(r, name) for r in group]
        if name in BOOL_FIELDS:
            if any(v is True for v in values):
                merged[name] = True
            elif any(v is False for v in values):
                merged[name] = False
            else:
                merged[name] = None
        elif name in LIST_FIELDS:
            merged[name] = tuple(dict.fromkeys(x for v in values for x in v))
        elif name == "outcome":
            merged[name] = min(values, key=OUTCOMES.index)
        elif name in ("driver_race", "driver_gender"):
            known = [v for v in values if v != "Unknown"]
            merged[name] = known[0] if known else "Unknown"
        elif name == "extras":
            extras: dict[str, str] = {}
            for v in values:
                for k, x in v:
                    if x and k not in extras:
                        extras[k] = x
            merged[name] = tuple(sorted(extras.items()))
        else:
            present = [v for v in values if v is not None]
            merged[name] = present[0] if present else getattr(first, name)
    return StopRecord(**merged)


def dedupe(records: Iterable[StopRecord], key: DedupKey | Sequence[str], audit: Audit | None = None) -> list[StopRecord]:
    """Collapse records that agree on every key field.

    Records with any key field missing are never merged.  Output keeps the
    source order of each group's first member.
    """
    audit = audit if audit is not None else Audit()
    names = key.column_names if isinstance(key, DedupKey) else tuple(key)
    if not names:
        raise ValueError("dedup key needs at least one field")
    groups: dict = {}
    order: list = []
    for i, rec in enumerate(records):
        k = tuple(_key_value(rec, n) for n in names)
        if any(v is None or v == "" for v in k):
            k = ("__unkeyed__", i)
        if k not in groups:
            groups[k] = []
            order.append(k)
        groups[k].append(rec)
    out = []
    for k in order:
        group = groups[k]
        if len(group) > 1:
            audit.bump("duplicates_removed", len(group) - 1)
            out.append(_merge(group))
        else:
            out.append(group[0])
    return out


# -- surname reclassification ---------------------------------------------

_SUFFIXES = frozenset({"JR", "SR", "II", "III", "IV", "V"})


def clean_surname(name: str) -> str:
    """Upper-case, drop punctuation and generational suffixes, keep the longest word."""
    words = re.sub(r"[^A-Z\s-]", "", name.upper()).replace("-", " ").split()
    words = [w for w in words if w not in _SUFFIXES]
    if not words:
        return ""
    return max(words, key=len)


def load_surnames(path: str | Path) -> dict[str, float]:
    """Census surname file: columns ``name`` and ``pcthispanic`` (percent).

    Suppressed cells (e.g. ``(S)``) are treated as missing.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame.columns = [c.strip().lower() for c in frame.columns]
    if not {"name", "pcthispanic"} <= set(frame.columns):
        raise SchemaError("surname file needs columns 'name' and 'pcthispanic'")
    pct = pd.to_numeric(frame["pcthispanic"], errors="coerce") / 100.0
    table = {}
    for name, p in zip(frame["name"].str.strip().str.upper(), pct):
        if pd.notna(p):
            table[name] = SurnameEntry(name, float(p)).pct_hispanic
    return table


def reclassify_hispanic(
    records: Iterable[StopRecord],
    surnames: Mapping[str, float] | Sequence[SurnameEntry] | None,
    states: Iterable[str],
    audit: Audit | None = None,
    threshold: float = 0.75,
    surname_field: str = "x_driver_last_name",
) -> list[StopRecord]:
    """Relabel White/Unknown drivers with a Hispanic-affiliated surname.

    Applies only in ``states``; a surname is Hispanic-affiliated when at
    least ``threshold`` of its bearers are Hispanic.
    """
    audit = audit if audit is not None else Audit()
    states = {s.upper() for s in states}
    if states and not surnames:
        raise SchemaError("surname table required for Hispanic reclassification")
    if surnames is not None and not isinstance(surnames, Mapping):
        surnames = {e.name.upper(): e.pct_hispanic for e in surnames}
    out = []
    for rec in records:
        if rec.state in states and rec.driver_race in ("White", "Unknown"):
            name = clean_surname(rec.extra(surname_field) or "")
            if name and surnames.get(name, 0.0) >= threshold:
                rec = replace(rec, driver_race="Hispanic")
                audit.bump("surname_reclassified")
        out.append(rec)
    return out


def filter_analysis_set(
    records: Iterable[StopRecord], years: tuple[int, int] = (2011, 2015), races: Sequence[str] = ANALYSIS_RACES
) -> list[StopRecord]:
    """Stops dated within ``years`` (inclusive) of the analysis races."""
    lo, hi = years
    return [r for r in records if r.stop_date is not None and lo <= r.stop_date.year <= hi and r.driver_race in races]


# -- output ----------------------------------------------------------------


def write_records(records: Iterable[StopRecord], path: str | Path | IO[str]) -> int:
    """Write standardized records (fixed STANDARD_COLUMNS order); returns row count."""
    own = isinstance(path, (str, Path))
    fh = open(path, "w", newline="", encoding="utf-8") if own else path
    try:
        writer = csv.DictWriter(fh, fieldnames=STANDARD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        n = 0
        for rec in records:
            writer.writerow(rec.to_row())
            n += 1
        return n
    finally:
        if own:
            fh.close()


def read_records(path, audit: Audit | None = None) -> list[StopRecord]:
    """Read standardized output back into StopRecords."""
    audit = audit if audit is not None else Audit()
    out = []
    for row in parse_source(path, standard_schema(), audit):
        state = row.columns["state"]
        out.append(normalize_record(RawRow(state, row.columns, row.line), standard_schema(state), None, audit))
    return out


def records_to_frame(records: Iterable[StopRecord]) -> pd.DataFrame:
    """Tabular view used by the analysis modules."""
    rows = []
    for r in records:
        rows.append(
            {
                "state": r.state,
                "stop_date": pd.Timestamp(r.stop_date) if r.stop_date else pd.NaT,
                "stop_time": r.stop_time,
                "location": r.location,
                "driver_race": r.driver_race,
                "driver_gender": r.driver_gender,
                "driver_age": r.driver_age,
                "violations": LIST_SEPARATOR.join(r.violations),
                "stop_purpose": r.stop_purpose,
                "search_conducted": r.search_conducted,
                "search_types": LIST_SEPARATOR.join(r.search_types),
                "contraband_found": r.contraband_found,
                "outcome": r.outcome,
            }
        )
    frame = pd.DataFrame(rows, columns=[c for c in STANDARD_COLUMNS if c != "location_kind"])
    frame["stop_date"] = pd.to_datetime(frame["stop_date"])
    for c in ("stop_time", "driver_age"):
        frame[c] = frame[c].astype("Int64")
    for c in BOOL_FIELDS:
        frame[c] = frame[c].astype("boolean")
    return frame


def read_standardized_frame(path: str | Path) -> pd.DataFrame:
    return records_to_frame(read_records(path))


# -- whole pipeline --------------------------------------------------------


@dataclass
class NormalizeResult:
    records: list[StopRecord]
    audit: Audit


def normalize_source(
    file,
    schema: StateSchema,
    ref_tables: RefTables | None = None,
    surnames: Mapping[str, float] | None = None,
    reclassify_states: Iterable[str] = (),
) -> NormalizeResult:
    """parse -> normalize -> dedupe -> reclassify for one state's export."""
    audit = Audit()
    records = []
    for row in parse_source(file, schema, audit):
        try:
            records.append(normalize_record(row, schema, ref_tables, audit))
        except RecordError as exc:
            audit.error(schema.state, row.line, str(exc), schema.delimiter.join(row.columns.values()))
    if schema.dedup_key:
        records = dedupe(records, DedupKey(schema.dedup_key), audit)
    states = [s for s in reclassify_states if s.upper() == schema.state]
    if states:
        records = reclassify_hispanic(records, surnames, states, audit)
    audit.bump("records_out", len(records))
    return NormalizeResult(records, audit)
