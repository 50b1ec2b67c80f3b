"""Reading cohorts, schemas, assignments and simulation configs from disk.

Cohorts are UTF-8 CSV files with an ``id`` column plus one column per
attribute.  Attribute types live in a YAML sidecar::

    attributes:
      - {name: gender, kind: binary, levels: ["1", "2"]}
      - {name: height, kind: numeric, unit: cm, range: [100, 250]}

Row numbers in error messages count the header as row 1.
"""

from __future__ import annotations

import csv

import yaml

from .allocation import StrategyConfig
from .errors import DataError, DomainError
from .exact_models import ComparabilityThreshold
from .imbalance_metrics import BINARY, CONTROL, NUMERIC, ORDINAL, TREATMENT, Allocation, Attribute, Cohort, Unit
from .simulation import FactorSpec, PopulationSpec


def _read_yaml(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: invalid YAML: {exc}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None


def parse_schema(doc) -> tuple:
    """Schema from a parsed YAML document; returns ``(attributes, ranges)``.

    ``ranges`` maps attribute names to declared ``(low, high)`` bounds.
    """
    entries = doc.get("attributes") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        raise DataError("schema must list at least one attribute")
    attrs, bounds = [], {}
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry or "kind" not in entry:
            raise DataError(f"schema entry {k + 1} needs a name and a kind")
        levels = entry.get("levels")
        if levels is not None:
            levels = tuple(str(v) for v in levels)
        try:
            attr = Attribute(
                str(entry["name"]),
                str(entry["kind"]),
                levels=levels,
                unit=entry.get("unit"),
                weight=float(entry.get("weight", 1.0)),
            )
        except DomainError as exc:
            raise DataError(f"schema entry {k + 1}: {exc}") from None
        if attr.name == "id":
            raise DataError("attribute name 'id' is reserved")
        if "range" in entry:
            lo, hi = entry["range"]
            bounds[attr.name] = (float(lo), float(hi))
        attrs.append(attr)
    return tuple(attrs), bounds


def load_schema(path) -> tuple:
    return parse_schema(_read_yaml(path))


def parse_value(attr: Attribute, raw: str, bounds=None, row=None):
    """Convert one CSV cell, raising :class:`DataError` with its location."""
    text = raw.strip()
    try:
        if attr.kind == BINARY and attr.levels is None and text in ("0", "1"):
            value = int(text)
        elif attr.kind in (NUMERIC, ORDINAL) and not (attr.levels and text in attr.levels):
            value = attr.normalize(float(text))
        else:
            value = attr.normalize(text)
    except (ValueError, DomainError):
        raise DataError(f"cannot read {raw!r} as {attr.kind}", row=row, column=attr.name) from None
    if bounds and attr.name in bounds:
        lo, hi = bounds[attr.name]
        if not lo <= value <= hi:
            raise DataError(f"{value} outside declared range [{lo}, {hi}]", row=row, column=attr.name)
    return value


def load_cohort(path, schema_path) -> Cohort:
    """Validated cohort from a CSV file and its YAML schema."""
    schema, bounds = load_schema(schema_path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise DataError(f"{path}: not valid UTF-8") from None
    if not rows:
        raise DataError(f"{path}: missing header row", row=1)
    header = [h.strip() for h in rows[0]]
    if "id" not in header:
        raise DataError("missing column", row=1, column="id")
    for attr in schema:
        if attr.name not in header:
            raise DataError("missing column", row=1, column=attr.name)
    known = {"id"} | {a.name for a in schema}
    for h in header:
        if h not in known:
            raise DataError("column not in schema", row=1, column=h)
    if len(set(header)) != len(header):
        raise DataError("duplicate column names", row=1)
    pos = {h: k for k, h in enumerate(header)}
    units, seen = [], {}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(row)}", row=r)
        uid = row[pos["id"]].strip()
        if not uid:
            raise DataError("empty id", row=r, column="id")
        if uid in seen:
            raise DataError(f"duplicate id {uid!r} (first at row {seen[uid]})", row=r, column="id")
        seen[uid] = r
        units.append(Unit(uid, tuple(parse_value(a, row[pos[a.name]], bounds, r) for a in schema)))
    return Cohort(schema, units)


def parse_record(line: str, schema, bounds=None, row=None) -> Unit:
    """One headerless record ``id,value1,...`` in schema order."""
    fields = next(csv.reader([line]))
    if len(fields) != len(schema) + 1:
        raise DataError(f"expected {len(schema) + 1} fields, found {len(fields)}", row=row)
    uid = fields[0].strip()
    if not uid:
        raise DataError("empty id", row=row, column="id")
    return Unit(uid, tuple(parse_value(a, v, bounds, row) for a, v in zip(schema, fields[1:])))


def write_assignment(alloc: Allocation, ids, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["id", "arm"])
    for uid in ids:
        w.writerow([uid, alloc.arm(uid)])


def load_assignment(path) -> Allocation:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if not rows or [h.strip() for h in rows[0]] != ["id", "arm"]:
        raise DataError("assignment header must be 'id,arm'", row=1)
    out = {}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError("expected 2 fields", row=r)
        uid, arm = row[0].strip(), row[1].strip()
        if arm not in (TREATMENT, CONTROL):
            raise DataError(f"arm must be T or C, got {arm!r}", row=r, column="arm")
        if uid in out:
            raise DataError(f"duplicate id {uid!r}", row=r, column="id")
        out[uid] = arm
    return Allocation(out)


# -- simulation config ----------------------------------------------------------


def parse_threshold(name, entry) -> ComparabilityThreshold:
    if not isinstance(entry, dict):
        raise DataError(f"threshold for {name!r} must be a mapping with i or l")
    try:
        if "i" in entry:
            return ComparabilityThreshold.range_fraction(int(entry["i"]), entry.get("k"))
        if "l" in entry:
            return ComparabilityThreshold.sigma_multiple(float(entry["l"]), entry.get("k"))
    except DomainError as exc:
        raise DataError(f"threshold for {name!r}: {exc}") from None
    raise DataError(f"threshold for {name!r} needs i or l")


def parse_strategy(entry) -> StrategyConfig:
    if isinstance(entry, str):
        entry = {"kind": entry}
    if not isinstance(entry, dict) or "kind" not in entry:
        raise DataError("strategy needs a kind")
    try:
        return StrategyConfig(
            entry["kind"],
            weights={str(k): float(v) for k, v in (entry.get("weights") or {}).items()},
            biased_coin=float(entry.get("biased_coin", 1.0)),
            size_weight=float(entry.get("size_weight", 1.0)),
            budget=int(entry.get("budget", 1000)),
        )
    except DomainError as exc:
        raise DataError(f"strategy: {exc}") from None


def parse_population(entry) -> PopulationSpec:
    if not isinstance(entry, dict) or "n" not in entry or "factors" not in entry:
        raise DataError("population needs n and factors")
    try:
        factors = tuple(
            FactorSpec(
                str(f["name"]),
                f.get("kind", "binary"),
                p=float(f.get("p", 0.5)),
                mean=float(f.get("mean", 0.0)),
                sd=float(f.get("sd", 1.0)),
            )
            for f in entry["factors"]
        )
        return PopulationSpec(int(entry["n"]), factors, entry.get("correlation"))
    except (DomainError, KeyError, TypeError) as exc:
        raise DataError(f"population: {exc}") from None


def load_simulation_config(path) -> dict:
    """Parse a simulation config into ready-to-use objects.

    Returns a dict with ``population``, ``strategies`` (list), ``thresholds``,
    ``replications``, ``seed`` and optional ``compare`` (observed factor and
    margin bounds).
    """
    doc = _read_yaml(path)
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a mapping")
    out = {"population": parse_population(doc.get("population"))}
    strategies = doc.get("strategies", doc.get("strategy", "complete-random"))
    if not isinstance(strategies, list):
        strategies = [strategies]
    out["strategies"] = [parse_strategy(s) for s in strategies]
    out["thresholds"] = {k: parse_threshold(k, v) for k, v in (doc.get("thresholds") or {}).items()}
    out["replications"] = doc.get("replications")
    out["seed"] = doc.get("seed")
    cmp = doc.get("compare")
    if cmp is not None:
        if not isinstance(cmp, dict) or "observed" not in cmp:
            raise DataError("compare section needs an observed factor")
        out["compare"] = {"observed": str(cmp["observed"]), "margins": cmp.get("margins")}
    return out
