"""Units, cohorts, distances between units and imbalance between arms."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError
from .exact_models import RANGE_FRACTION, SIGMA_MULTIPLE, ComparabilityThreshold

BINARY = "binary"
CATEGORICAL = "categorical"
ORDINAL = "ordinal"
NUMERIC = "numeric"
KINDS = (BINARY, CATEGORICAL, ORDINAL, NUMERIC)
DISCRETE = (BINARY, CATEGORICAL)

TREATMENT = "T"
CONTROL = "C"

DEFAULT_MAX_INTERACTION_ORDER = 3


@dataclass(frozen=True)
class Attribute:
    """One column of a cohort schema.

    ``levels`` is optional.  For binary attributes it names the absent and
    present state (in that order); for categorical attributes it restricts
    the allowed values; for ordinal attributes it lists labels from lowest to
    highest.
    """

    name: str
    kind: str
    levels: Optional[tuple] = None
    unit: Optional[str] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
            if len(set(self.levels)) != len(self.levels):
                raise DomainError(f"attribute {self.name!r}: duplicate levels")
            if self.kind == BINARY and len(self.levels) != 2:
                raise DomainError(f"attribute {self.name!r}: binary needs exactly two levels")
        if not self.weight >= 0:
            raise DomainError(f"attribute {self.name!r}: weight must be nonnegative")

    @property
    def is_discrete(self) -> bool:
        return self.kind in DISCRETE

    def level_labels(self) -> tuple:
        """Labels of the cells this attribute contributes to interactions."""
        if self.kind == BINARY:
            return tuple(str(v) for v in self.levels) if self.levels else ("0", "1")
        if self.kind == CATEGORICAL and self.levels:
            return tuple(str(v) for v in self.levels)
        raise DomainError(f"attribute {self.name!r} has no declared levels")

    def normalize(self, value):
        """Canonical in-memory form of a value for this attribute."""
        if self.kind == BINARY:
            if self.levels is not None and value in self.levels:
                return self.levels.index(value)
            if value in (0, 1) and not isinstance(value, str):
                return int(value)
            raise DomainError(f"attribute {self.name!r}: {value!r} is not a binary value")
        if self.kind == CATEGORICAL:
            if self.levels is not None and value not in self.levels:
                raise DomainError(f"attribute {self.name!r}: unknown level {value!r}")
            return value
        if self.kind == ORDINAL and self.levels is not None and value in self.levels:
            return float(self.levels.index(value))
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise DomainError(f"attribute {self.name!r}: {value!r} is not numeric") from None
        if not math.isfinite(out):
            raise DomainError(f"attribute {self.name!r}: non-finite value")
        return out


@dataclass(frozen=True)
class Unit:
    """An experimental unit: an opaque id and one value per schema attribute."""

    id: Hashable
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class Cohort:
    """Units sharing one schema; values are normalized on construction."""

    schema: tuple
    units: tuple

    def __post_init__(self):
        schema = tuple(self.schema)
        names = [a.name for a in schema]
        if len(set(names)) != len(names):
            raise DomainError("duplicate attribute names in schema")
        seen = set()
        units = []
        for u in self.units:
            if u.id in seen:
                raise DomainError(f"duplicate unit id {u.id!r}")
            seen.add(u.id)
            if len(u.values) != len(schema):
                raise DomainError(f"unit {u.id!r} has {len(u.values)} values, schema has {len(schema)}")
            units.append(Unit(u.id, tuple(a.normalize(v) for a, v in zip(schema, u.values))))
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "units", tuple(units))

    def __len__(self):
        return len(self.units)

    def __iter__(self):
        return iter(self.units)

    @property
    def ids(self) -> list:
        return [u.id for u in self.units]

    def index(self, name: str) -> int:
        for j, a in enumerate(self.schema):
            if a.name == name:
                return j
        raise DomainError(f"no attribute named {name!r}")

    def attribute(self, name: str) -> Attribute:
        return self.schema[self.index(name)]

    def column(self, name: str) -> list:
        j = self.index(name)
        return [u.values[j] for u in self.units]

    def ranges(self) -> dict:
        """Observed range (max - min) of every ordinal and numeric attribute."""
        out = {}
        for j, a in enumerate(self.schema):
            if a.kind in (ORDINAL, NUMERIC) and self.units:
                col = [u.values[j] for u in self.units]
                out[a.name] = max(col) - min(col)
        return out

    def levels_of(self, attr: Attribute) -> tuple:
        """Declared levels, or for undeclared categorical levels those observed."""
        if attr.kind == BINARY:
            return (0, 1)
        if attr.levels is not None:
            return attr.levels
        j = self.index(attr.name)
        return tuple(sorted({u.values[j] for u in self.units}, key=str))


@dataclass(frozen=True)
class Allocation:
    """Assignment of unit ids to arm ``"T"`` or ``"C"``."""

    assignment: Mapping

    def __post_init__(self):
        bad = {a for a in self.assignment.values() if a not in (TREATMENT, CONTROL)}
        if bad:
            raise DomainError(f"unknown arm labels {sorted(bad)}")
        object.__setattr__(self, "assignment", dict(self.assignment))

    @classmethod
    def from_mask(cls, ids: Sequence, in_treatment) -> "Allocation":
        return cls({i: TREATMENT if t else CONTROL for i, t in zip(ids, in_treatment)})

    def arm(self, unit_id) -> str:
        return self.assignment[unit_id]

    @property
    def treatment(self) -> list:
        return [i for i, a in self.assignment.items() if a == TREATMENT]

    @property
    def control(self) -> list:
        return [i for i, a in self.assignment.items() if a == CONTROL]

    def sizes(self) -> tuple:
        return len(self.treatment), len(self.control)

    def swapped(self) -> "Allocation":
        flip = {TREATMENT: CONTROL, CONTROL: TREATMENT}
        return Allocation({i: flip[a] for i, a in self.assignment.items()})

    def mask(self, ids: Sequence) -> np.ndarray:
        """Boolean treatment mask over ``ids``; every id must be assigned."""
        try:
            return np.array([self.assignment[i] == TREATMENT for i in ids], dtype=bool)
        except KeyError as exc:
            raise DomainError(f"unit {exc.args[0]!r} is not assigned to an arm") from None


# -- distances ----------------------------------------------------------------


def hamming_distance(a: Sequence, b: Sequence) -> int:
    """Number of positions at which two equal-length vectors differ."""
    if len(a) != len(b):
        raise DomainError(f"length mismatch: {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a, b))


def mixed_distance(
    a: Unit,
    b: Unit,
    schema: Sequence[Attribute],
    weights: Optional[Sequence[float]] = None,
    ranges: Optional[Mapping[str, float]] = None,
) -> float:
    """Gower-style dissimilarity of two units, in [0, 1].

    Binary and categorical attributes contribute a mismatch indicator; ordinal
    and numeric ones contribute ``|a - b| / range`` where ``range`` is taken
    from ``ranges`` (usually :meth:`Cohort.ranges`).  Attributes with zero
    range contribute 0.  The result is the weighted mean of the contributions;
    ``weights`` defaults to each attribute's own weight.
    """
    if len(a.values) != len(schema) or len(b.values) != len(schema):
        raise DomainError("units do not match the schema")
    if weights is None:
        weights = [attr.weight for attr in schema]
    if len(weights) != len(schema):
        raise DomainError(f"expected {len(schema)} weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise DomainError("weights must be nonnegative")
    total = math.fsum(weights)
    if total <= 0:
        raise DomainError("total weight must be positive")
    acc = []
    for attr, w, x, y in zip(schema, weights, a.values, b.values):
        if attr.is_discrete:
            acc.append(w * (x != y))
            continue
        if ranges is None or attr.name not in ranges:
            raise DomainError(f"no range given for attribute {attr.name!r}")
        r = ranges[attr.name]
        acc.append(0.0 if r == 0 else w * min(1.0, abs(x - y) / r))
    return math.fsum(acc) / total


# -- imbalance ------------------------------------------------------------------


@dataclass(frozen=True)
class FactorImbalance:
    """Signed imbalance of one attribute (treatment minus control).

    ``statistic`` is the count difference for binary factors, the largest
    per-level count difference for categorical ones, the midrank-sum
    difference for ordinal ones and the mean difference Q for numeric ones.
    ``standardized`` is Q divided by the pooled cohort standard deviation
    (numeric only).
    """

    name: str
    kind: str
    statistic: float
    standardized: Optional[float] = None
    scale: Optional[float] = None
    levels: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CellImbalance:
    factors: tuple
    levels: tuple
    difference: int

    @property
    def key(self) -> str:
        return f"{'*'.join(self.factors)}={'*'.join(self.levels)}"


@dataclass(frozen=True)
class ImbalanceReport:
    n_treatment: int
    n_control: int
    factors: tuple
    interaction_order: int
    interactions: tuple

    def factor(self, name: str) -> FactorImbalance:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    def cell(self, factors: Sequence[str], levels: Sequence[str]) -> CellImbalance:
        pairs = sorted(zip(factors, (str(v) for v in levels)))
        key = (tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))
        for c in self.interactions:
            if sorted(zip(c.factors, c.levels)) == pairs:
                return c
        raise KeyError(key)

    @property
    def interaction_count(self) -> int:
        """Number of distinct factor subsets of the reported order."""
        return len({c.factors for c in self.interactions})

    def to_flat(self) -> dict:
        """Flat ``key -> value`` view, stable in key order."""
        out = {
            "n_T": self.n_treatment,
            "n_C": self.n_control,
            "interaction_order": self.interaction_order,
        }
        for f in self.factors:
            out[f"factor.{f.name}.kind"] = f.kind
            out[f"factor.{f.name}.statistic"] = f.statistic
            if f.standardized is not None:
                out[f"factor.{f.name}.standardized"] = f.standardized
            for level, diff in f.levels.items():
                out[f"factor.{f.name}.level.{level}"] = diff
        for c in self.interactions:
            out[f"interaction.{c.key}"] = c.difference
        return out


def _number(x):
    """Integers stay integers; everything else becomes a float."""
    x = float(x)
    return int(x) if x.is_integer() else x


def pooled_sd(values: np.ndarray) -> float:
    """Cohort standard deviation over both arms (ddof=1; 0 for one value)."""
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def signed_imbalance(kind: str, column: np.ndarray, in_treatment: np.ndarray):
    """Treatment-minus-control imbalance of one non-categorical column.

    Returns ``(statistic, standardized, scale)`` as described on
    :class:`FactorImbalance`.  Ordinal columns are converted to midranks over
    the whole cohort first.
    """
    t = in_treatment
    if kind == BINARY:
        return int(column[t].sum() - column[~t].sum()), None, None
    if kind == ORDINAL:
        ranks = rankdata(column, method="average")
        return _number(ranks[t].sum() - ranks[~t].sum()), None, None
    if kind == NUMERIC:
        if not t.any() or t.all():
            raise DomainError("mean difference needs both arms non-empty")
        q = float(column[t].mean() - column[~t].mean())
        sd = pooled_sd(column)
        std = q / sd if sd > 0 else 0.0
        return q, std, sd
    raise DomainError(f"no scalar imbalance for kind {kind!r}")


def imbalance_report(
    cohort: Cohort,
    alloc: Allocation,
    interaction_order: int = 1,
    max_order: int = DEFAULT_MAX_INTERACTION_ORDER,
) -> ImbalanceReport:
    """Per-factor and per-interaction-cell imbalance of an allocation.

    Every schema attribute appears once in ``factors``.  ``interactions``
    holds, for each ``interaction_order``-subset of the binary/categorical
    attributes and each joint level cell, the treatment-minus-control count
    difference; order 1 gives the marginal level counts.
    """
    if int(interaction_order) != interaction_order or interaction_order < 1:
        raise DomainError(f"interaction order must be a positive integer, got {interaction_order}")
    if interaction_order > max_order:
        raise DomainError(f"interaction order {interaction_order} exceeds cap {max_order}")
    discrete = [a for a in cohort.schema if a.is_discrete]
    if interaction_order > max(1, len(discrete)):
        raise DomainError(f"interaction order {interaction_order} exceeds {len(discrete)} discrete factors")

    t = alloc.mask(cohort.ids)
    factors = []
    for j, attr in enumerate(cohort.schema):
        col = [u.values[j] for u in cohort.units]
        if attr.kind == CATEGORICAL:
            levels = {}
            for level in cohort.levels_of(attr):
                hit = np.array([v == level for v in col], dtype=bool)
                levels[str(level)] = int((hit & t).sum() - (hit & ~t).sum())
            stat = max(levels.values(), key=abs) if levels else 0
            factors.append(FactorImbalance(attr.name, attr.kind, stat, levels=levels))
        else:
            stat, std, sd = signed_imbalance(attr.kind, np.asarray(col, dtype=float), t)
            if attr.kind == BINARY:
                stat = int(stat)
            factors.append(FactorImbalance(attr.name, attr.kind, stat, std, sd))

    cells = []
    for combo in itertools.combinations(discrete, interaction_order):
        idx = [cohort.index(a.name) for a in combo]
        level_sets = [cohort.levels_of(a) for a in combo]
        labels = [_labels(a, ls) for a, ls in zip(combo, level_sets)]
        for pick in itertools.product(*[range(len(ls)) for ls in level_sets]):
            target = [ls[p] for ls, p in zip(level_sets, pick)]
            diff = 0
            for u, in_t in zip(cohort.units, t):
                if all(u.values[j] == v for j, v in zip(idx, target)):
                    diff += 1 if in_t else -1
            cells.append(
                CellImbalance(
                    tuple(a.name for a in combo),
                    tuple(lab[p] for lab, p in zip(labels, pick)),
                    diff,
                )
            )
    return ImbalanceReport(int(t.sum()), int((~t).sum()), tuple(factors), int(interaction_order), tuple(cells))


def _labels(attr: Attribute, levels: tuple) -> tuple:
    if attr.kind == BINARY:
        return attr.level_labels()
    return tuple(str(v) for v in levels)


@dataclass(frozen=True)
class ComparabilityVerdict:
    comparable: bool
    verdicts: dict
    first_violation: Optional[str] = None

    def __bool__(self):
        return self.comparable


def within_threshold(kind: str, statistic: float, standardized, n: int, threshold: ComparabilityThreshold) -> bool:
    """Whether one imbalance statistic satisfies its threshold.

    ``n`` is the arm size that sets the range: counts range over ``n``, rank
    sums over ``n**2``.  Numeric factors take sigma-multiple thresholds on
    the standardized difference; all other kinds take range fractions.
    """
    if kind == NUMERIC:
        if threshold.kind != SIGMA_MULTIPLE:
            raise DomainError("numeric factors need a sigma-multiple threshold")
        return abs(standardized) <= threshold.l
    if threshold.kind != RANGE_FRACTION:
        raise DomainError(f"{kind} factors need a range-fraction threshold")
    span = n * n if kind == ORDINAL else n
    return abs(statistic) * threshold.i <= span


def is_comparable(
    report: ImbalanceReport,
    thresholds: Mapping[str, ComparabilityThreshold],
    interaction_threshold: Optional[ComparabilityThreshold] = None,
) -> ComparabilityVerdict:
    """Check every factor (and optionally every interaction cell) against its threshold.

    The arm size entering range-fraction bounds is the smaller arm.  When
    ``interaction_threshold`` is given, each reported cell is checked as a
    count difference against it.
    """
    n = min(report.n_treatment, report.n_control)
    verdicts = {}
    first = None
    for f in report.factors:
        if f.name not in thresholds:
            raise DomainError(f"no threshold for factor {f.name!r}")
        ok = within_threshold(f.kind, f.statistic, f.standardized, n, thresholds[f.name])
        verdicts[f.name] = ok
        if not ok and first is None:
            first = f.name
    if interaction_threshold is not None:
        for c in report.interactions:
            ok = within_threshold(BINARY, c.difference, None, n, interaction_threshold)
            verdicts[f"interaction:{c.key}"] = ok
            if not ok and first is None:
                first = f"interaction:{c.key}"
    return ComparabilityVerdict(first is None, verdicts, first)
