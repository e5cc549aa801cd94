"""Study-level records: loading, typing and validation.

A dataset is an ordered collection of studies, each carrying an effect
estimate on the SMD scale, its sampling variance, and a shared list of
mixed-type characteristics (numeric, categorical or free text). Values
may be missing; kinds may not disagree across studies.

File formats
------------
CSV: header row with reserved columns ``id``, ``effect`` and exactly one
of ``se`` / ``variance``; every other column is a characteristic. A
column header may annotate its kind as ``name:numeric`` (or
``:categorical`` / ``:text``); unannotated columns are numeric when every
non-missing cell parses as a number, otherwise categorical. Empty cells
are missing values.

JSON: ``{"schema": [{"name", "kind"}...], "studies": [{"id", "effect",
"variance"|"se", "characteristics": {name: value}}...]}``. Missing values
are ``null`` (or absent keys).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from ._util import write_json
from .errors import DataError

KINDS = ("numeric", "categorical", "text")

Value = float | str | None


@dataclass(frozen=True)
class CharacteristicSpec:
    """Schema entry: a characteristic's name and kind."""

    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown characteristic kind {self.kind!r}", field=self.name)


@dataclass(frozen=True)
class Characteristic:
    """One named value on one study; ``value`` is None when missing."""

    name: str
    kind: str
    value: Value = None


@dataclass(frozen=True)
class Study:
    """One meta-analysis study: identifier, effect (SMD), variance (SMD^2)."""

    id: str
    effect: float
    variance: float
    characteristics: tuple[Characteristic, ...] = ()

    def value(self, name: str) -> Value:
        for c in self.characteristics:
            if c.name == name:
                return c.value
        raise KeyError(name)


@dataclass(frozen=True)
class Dataset:
    """Ordered studies plus the shared characteristic schema."""

    studies: tuple[Study, ...]
    schema: tuple[CharacteristicSpec, ...]

    @property
    def m(self) -> int:
        return len(self.studies)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.studies)

    def index_of(self, study_id: str) -> int:
        try:
            return self.ids.index(study_id)
        except ValueError:
            raise DataError("unknown study id", study_id=study_id) from None


@dataclass
class ValidationReport:
    """Findings from validate_dataset; empty ``errors`` means all invariants hold."""

    errors: list[str] = field(default_factory=list)
    per_study: list[dict] = field(default_factory=list)
    missing_counts: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def _parse_number(raw: str) -> float | None:
    try:
        return float(raw)
    except ValueError:
        return None


def _split_header(header: str) -> tuple[str, str | None]:
    """Split an optional ``name:kind`` annotation; unknown suffixes stay in the name."""
    if ":" in header:
        name, _, suffix = header.rpartition(":")
        if suffix.strip().lower() in KINDS:
            return name.strip(), suffix.strip().lower()
    return header.strip(), None


def _positive_variance(value: float, *, row: int | None, study_id: str | None,
                       source_field: str) -> float:
    if not math.isfinite(value) or value <= 0.0:
        raise DataError(f"non-positive {source_field}", row=row,
                        study_id=study_id, field=source_field)
    return value


def _load_csv(path: Path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty CSV file")
    raw_header = [h.strip() for h in rows[0]]
    lowered = [h.lower() for h in raw_header]

    def column(name: str) -> int | None:
        return lowered.index(name) if name in lowered else None

    id_col, effect_col = column("id"), column("effect")
    se_col, var_col = column("se"), column("variance")
    if id_col is None or effect_col is None:
        missing = "id" if id_col is None else "effect"
        raise DataError("missing required column", field=missing)
    if (se_col is None) == (var_col is None):
        raise DataError("exactly one of 'se'/'variance' columns is required")

    reserved = {id_col, effect_col, se_col if se_col is not None else var_col}
    char_cols = [i for i in range(len(raw_header)) if i not in reserved]
    names_kinds = [_split_header(raw_header[i]) for i in char_cols]

    # fallback kind inference for unannotated columns: numeric iff every
    # non-missing cell parses as a number, otherwise categorical
    kinds: list[str] = []
    for (name, kind), col in zip(names_kinds, char_cols):
        if kind is None:
            cells = [r[col].strip() for r in rows[1:] if col < len(r) and r[col].strip()]
            kind = "numeric" if cells and all(_parse_number(c) is not None for c in cells) else "categorical"
        kinds.append(kind)
    schema = tuple(CharacteristicSpec(name, kind)
                   for (name, _), kind in zip(names_kinds, kinds))
    if len({s.name for s in schema}) != len(schema):
        raise DataError("duplicate characteristic column name")

    studies: list[Study] = []
    seen: set[str] = set()
    for rowno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) < len(raw_header):
            row = row + [""] * (len(raw_header) - len(row))
        sid = row[id_col].strip()
        if not sid:
            raise DataError("empty study id", row=rowno, field="id")
        if sid in seen:
            raise DataError("duplicate study id", row=rowno, study_id=sid)
        seen.add(sid)

        effect = _parse_number(row[effect_col].strip())
        if effect is None or not math.isfinite(effect):
            raise DataError("effect is not a finite number", row=rowno,
                            study_id=sid, field="effect")
        if se_col is not None:
            se = _parse_number(row[se_col].strip())
            if se is None:
                raise DataError("se is not a number", row=rowno, study_id=sid, field="se")
            variance = _positive_variance(se, row=rowno, study_id=sid, source_field="se") ** 2
        else:
            var = _parse_number(row[var_col].strip())
            if var is None:
                raise DataError("variance is not a number", row=rowno,
                                study_id=sid, field="variance")
            variance = _positive_variance(var, row=rowno, study_id=sid,
                                          source_field="variance")

        chars = []
        for spec, col in zip(schema, char_cols):
            raw = row[col].strip() if col < len(row) else ""
            if not raw:
                chars.append(Characteristic(spec.name, spec.kind, None))
            elif spec.kind == "numeric":
                num = _parse_number(raw)
                if num is None or not math.isfinite(num):
                    raise DataError("numeric characteristic does not parse",
                                    row=rowno, study_id=sid, field=spec.name)
                chars.append(Characteristic(spec.name, spec.kind, num))
            else:
                chars.append(Characteristic(spec.name, spec.kind, raw))
        studies.append(Study(sid, effect, variance, tuple(chars)))

    return Dataset(tuple(studies), schema)


def _load_json(path: Path) -> Dataset:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"JSON parse failure: {exc}") from exc
    if not isinstance(doc, dict) or "schema" not in doc or "studies" not in doc:
        raise DataError("JSON document must contain 'schema' and 'studies'")

    schema = tuple(CharacteristicSpec(str(e["name"]), str(e["kind"])) for e in doc["schema"])
    if len({s.name for s in schema}) != len(schema):
        raise DataError("duplicate characteristic name in schema")

    studies: list[Study] = []
    seen: set[str] = set()
    for i, entry in enumerate(doc["studies"]):
        sid = str(entry.get("id", "")).strip()
        if not sid:
            raise DataError("missing study id", row=i)
        if sid in seen:
            raise DataError("duplicate study id", row=i, study_id=sid)
        seen.add(sid)
        try:
            effect = float(entry["effect"])
        except (KeyError, TypeError, ValueError):
            raise DataError("effect missing or not a number", row=i,
                            study_id=sid, field="effect") from None
        if not math.isfinite(effect):
            raise DataError("effect is not finite", row=i, study_id=sid, field="effect")

        has_se, has_var = "se" in entry, "variance" in entry
        if has_se == has_var:
            raise DataError("exactly one of 'se'/'variance' is required",
                            row=i, study_id=sid)
        if has_se:
            se = _positive_variance(float(entry["se"]), row=i, study_id=sid,
                                    source_field="se")
            variance = se ** 2
        else:
            variance = _positive_variance(float(entry["variance"]), row=i,
                                          study_id=sid, source_field="variance")

        given: Mapping[str, Value] = entry.get("characteristics", {}) or {}
        unknown = set(given) - {s.name for s in schema}
        if unknown:
            raise DataError(f"characteristics not in schema: {sorted(unknown)}",
                            row=i, study_id=sid)
        chars = []
        for spec in schema:
            value = given.get(spec.name)
            if value is None:
                chars.append(Characteristic(spec.name, spec.kind, None))
            elif spec.kind == "numeric":
                try:
                    num = float(value)
                except (TypeError, ValueError):
                    raise DataError("numeric characteristic does not parse",
                                    row=i, study_id=sid, field=spec.name) from None
                if not math.isfinite(num):
                    raise DataError("numeric characteristic is not finite",
                                    row=i, study_id=sid, field=spec.name)
                chars.append(Characteristic(spec.name, spec.kind, num))
            else:
                chars.append(Characteristic(spec.name, spec.kind, str(value)))
        studies.append(Study(sid, effect, variance, tuple(chars)))

    return Dataset(tuple(studies), schema)


def load_dataset(path: str | Path, format: str | None = None) -> Dataset:
    """Load a dataset from a CSV or JSON file; study order equals file order.

    ``format`` is "csv" or "json"; inferred from the suffix when omitted.
    Standard errors are raised with row/field locations; the standard-error
    column is converted to variance by squaring.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format == "csv":
        return _load_csv(path)
    if format == "json":
        return _load_json(path)
    raise DataError(f"unknown dataset format {format!r}")


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Check every dataset invariant and count missing values per characteristic.

    The report collects findings instead of raising, so partially invalid
    datasets (built programmatically or loaded leniently) can be inspected.
    """
    report = ValidationReport()
    report.missing_counts = {spec.name: 0 for spec in ds.schema}

    if ds.m < 3:
        report.errors.append(f"m < 3: dataset has {ds.m} studies, at least 3 required")

    seen: dict[str, int] = {}
    for i, s in enumerate(ds.studies):
        if s.id in seen:
            report.errors.append(f"duplicate study id {s.id!r} (rows {seen[s.id]} and {i})")
        else:
            seen[s.id] = i

    expected = {spec.name: spec.kind for spec in ds.schema}
    for i, s in enumerate(ds.studies):
        finding = {"id": s.id, "conforms": True, "missing": [], "mismatches": []}
        if not math.isfinite(s.effect):
            report.errors.append(f"study {s.id!r}: non-finite effect")
            finding["conforms"] = False
        if not math.isfinite(s.variance) or s.variance <= 0:
            report.errors.append(f"study {s.id!r}: non-positive variance")
            finding["conforms"] = False

        names = [c.name for c in s.characteristics]
        if names != [spec.name for spec in ds.schema]:
            report.errors.append(f"study {s.id!r}: characteristics do not match schema order")
            finding["conforms"] = False
        for c in s.characteristics:
            kind = expected.get(c.name)
            if kind is None:
                report.errors.append(f"study {s.id!r}: characteristic {c.name!r} not in schema")
                finding["conforms"] = False
                continue
            if c.kind != kind:
                msg = f"study {s.id!r}: characteristic {c.name!r} kind {c.kind!r} != schema {kind!r}"
                report.errors.append(msg)
                finding["mismatches"].append(c.name)
                finding["conforms"] = False
            if c.value is None:
                finding["missing"].append(c.name)
                if c.name in report.missing_counts:
                    report.missing_counts[c.name] += 1
            elif kind == "numeric":
                if not isinstance(c.value, (int, float)) or isinstance(c.value, bool):
                    msg = f"study {s.id!r}: characteristic {c.name!r} should be numeric, got {type(c.value).__name__}"
                    report.errors.append(msg)
                    finding["mismatches"].append(c.name)
                    finding["conforms"] = False
                elif not math.isfinite(c.value):
                    report.errors.append(f"study {s.id!r}: characteristic {c.name!r} is not finite")
                    finding["mismatches"].append(c.name)
                    finding["conforms"] = False
            elif not isinstance(c.value, str):
                msg = f"study {s.id!r}: characteristic {c.name!r} should be {kind}, got {type(c.value).__name__}"
                report.errors.append(msg)
                finding["mismatches"].append(c.name)
                finding["conforms"] = False
        report.per_study.append(finding)

    return report


def dataset_to_dict(ds: Dataset) -> dict:
    """Canonical JSON form (variance stored, missing values explicit nulls)."""
    return {
        "schema": [{"name": s.name, "kind": s.kind} for s in ds.schema],
        "studies": [
            {
                "id": s.id,
                "effect": s.effect,
                "variance": s.variance,
                "characteristics": {c.name: c.value for c in s.characteristics},
            }
            for s in ds.studies
        ],
    }


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the canonical JSON form; load_dataset(path, "json") round-trips it."""
    write_json(path, dataset_to_dict(ds))


def effects_variances(ds: Dataset, indices: Iterable[int] | None = None):
    """Convenience: (effects, variances) arrays for all or selected studies."""
    import numpy as np

    studies = ds.studies if indices is None else [ds.studies[i] for i in indices]
    return (np.array([s.effect for s in studies], dtype=float),
            np.array([s.variance for s in studies], dtype=float))
