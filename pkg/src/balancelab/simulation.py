"""Synthetic populations and a replication harness for allocation strategies.

Replication ``r`` of a run seeded with ``seed`` draws from its own generator,
derived from ``SeedSequence([seed, r])``.  Results therefore do not depend on
the order in which replications run or on how many worker processes share
them, and aggregation uses exactly rounded sums.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import yaml
from scipy.stats import rankdata

from .allocation import (
    COMPLETE_RANDOM,
    SYSTEMATIC,
    StrategyConfig,
    allocate,
    local_search,
    objective_columns,
    random_split_mask,
)
from .errors import DomainError
from .exact_models import ComparabilityThreshold
from .imbalance_metrics import (
    BINARY,
    NUMERIC,
    ORDINAL,
    Attribute,
    Cohort,
    Unit,
    signed_imbalance,
    within_threshold,
)

BENIGN = "benign"
NEUTRAL = "neutral"
MALIGN = "malign"

FACTOR_KINDS = (BINARY, NUMERIC, ORDINAL)


@dataclass(frozen=True)
class FactorSpec:
    """One generated factor.

    Binary factors are present with probability ``p``; numeric ones are
    ``N(mean, sd)``; ordinal ones are the ranks ``1..2n`` of their latent
    variable.
    """

    name: str
    kind: str = BINARY
    p: float = 0.5
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise DomainError(f"factor {self.name!r}: kind must be one of {FACTOR_KINDS}")
        if not 0 <= self.p <= 1:
            raise DomainError(f"factor {self.name!r}: prevalence must lie in [0, 1]")
        if not self.sd > 0:
            raise DomainError(f"factor {self.name!r}: sd must be positive")


@dataclass(frozen=True)
class PopulationSpec:
    """Generative description of a cohort of ``2n`` units.

    Every factor is driven by one latent standard normal; ``correlation`` (if
    given) is the latent correlation matrix, otherwise factors are
    independent.  Binary factors threshold their latent at the upper
    ``p`` quantile.
    """

    n: int
    factors: tuple
    correlation: Optional[tuple] = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")
        factors = tuple(self.factors)
        if not factors:
            raise DomainError("population needs at least one factor")
        names = [f.name for f in factors]
        if len(set(names)) != len(names):
            raise DomainError("duplicate factor names")
        object.__setattr__(self, "factors", factors)
        if self.correlation is not None:
            r = np.asarray(self.correlation, dtype=float)
            m = len(factors)
            if r.shape != (m, m):
                raise DomainError(f"correlation matrix must be {m}x{m}")
            if not np.allclose(r, r.T, atol=1e-12) or not np.allclose(np.diag(r), 1.0, atol=1e-12):
                raise DomainError("correlation matrix must be symmetric with unit diagonal")
            if np.linalg.eigvalsh(r).min() < -1e-10:
                raise DomainError("correlation matrix is not positive semidefinite")
            object.__setattr__(self, "correlation", tuple(tuple(row) for row in r))

    @property
    def size(self) -> int:
        return 2 * self.n

    def names(self) -> list:
        return [f.name for f in self.factors]

    def index(self, name: str) -> int:
        try:
            return self.names().index(name)
        except ValueError:
            raise DomainError(f"no factor named {name!r}") from None

    def schema(self) -> tuple:
        return tuple(Attribute(f.name, f.kind) for f in self.factors)

    def loading(self) -> Optional[np.ndarray]:
        """Matrix ``L`` with ``L @ L.T`` equal to the correlation matrix.

        Built from the eigendecomposition so singular (e.g. comonotone)
        matrices are allowed.
        """
        if self.correlation is None:
            return None
        vals, vecs = np.linalg.eigh(np.asarray(self.correlation))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def population_matrix(spec: PopulationSpec, rng, loading=None) -> np.ndarray:
    """Draw a ``2n x m`` matrix of factor values (one column per factor)."""
    size = spec.size
    z = rng.standard_normal((size, len(spec.factors)))
    if spec.correlation is not None:
        L = spec.loading() if loading is None else loading
        z = z @ L.T
    out = np.empty_like(z)
    for j, f in enumerate(spec.factors):
        if f.kind == BINARY:
            cut = _upper_quantile(f.p)
            out[:, j] = z[:, j] > cut
        elif f.kind == NUMERIC:
            out[:, j] = f.mean + f.sd * z[:, j]
        else:
            out[np.argsort(z[:, j], kind="stable"), j] = np.arange(1, size + 1)
    return out


def _upper_quantile(p: float) -> float:
    if p <= 0:
        return math.inf
    if p >= 1:
        return -math.inf
    return NormalDist().inv_cdf(1 - p)


def to_cohort(spec: PopulationSpec, matrix: np.ndarray) -> Cohort:
    units = []
    for i, row in enumerate(matrix):
        units.append(Unit(i, tuple(int(v) if f.kind == BINARY else float(v) for f, v in zip(spec.factors, row))))
    return Cohort(spec.schema(), units)


def generate_population(spec: PopulationSpec, rng) -> Cohort:
    """Draw a cohort of ``2n`` units with ids ``0..2n-1``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return to_cohort(spec, population_matrix(spec, rng))


def replication_streams(seed: int, r: int, count: int = 2) -> list:
    """Independent generators for replication ``r``: population first, then allocations."""
    if seed < 0:
        raise DomainError("seed must be nonnegative")
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, r]).spawn(count)]


# -- allocation on generated matrices ---------------------------------------------


def _allocate_matrix(spec: PopulationSpec, matrix: np.ndarray, strategy: StrategyConfig, rng) -> np.ndarray:
    """Treatment mask for one replication; fast paths for random and systematic."""
    if strategy.kind == COMPLETE_RANDOM:
        return random_split_mask(spec.size, rng)
    if strategy.kind == SYSTEMATIC:
        weights = strategy.weights or {f.name: 1.0 for f in spec.factors}
        cols = []
        for name, w in weights.items():
            f = spec.factors[spec.index(name)]
            cols.extend(objective_columns(f.kind, matrix[:, spec.index(name)], w, spec.n))
        X = np.column_stack(cols)
        mask, _, _ = local_search(X, random_split_mask(spec.size, rng), strategy.budget)
        return mask
    cohort = to_cohort(spec, matrix)
    return allocate(cohort, strategy, rng).mask(cohort.ids)


def _factor_stats(spec: PopulationSpec, matrix: np.ndarray, mask: np.ndarray):
    stats = []
    for j, f in enumerate(spec.factors):
        stats.append(signed_imbalance(f.kind, matrix[:, j], mask))
    return stats


# -- replications ------------------------------------------------------------------


@dataclass(frozen=True)
class FactorSummary:
    name: str
    q_hat: float
    se: float
    mean_abs: float
    mean_signed: float


@dataclass(frozen=True)
class SimulationResult:
    """Empirical comparability of one strategy over ``replications`` runs."""

    strategy: str
    replications: int
    seed: int
    factors: tuple
    joint_q_hat: float
    joint_se: float
    mean_sizes: tuple = (0.0, 0.0)

    def factor(self, name: str) -> FactorSummary:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "replications": self.replications,
            "seed": self.seed,
            "mean_arm_sizes": {"T": self.mean_sizes[0], "C": self.mean_sizes[1]},
            "joint": {"q_hat": self.joint_q_hat, "se": self.joint_se},
            "factors": {
                f.name: {"q_hat": f.q_hat, "se": f.se, "mean_abs": f.mean_abs, "mean_signed": f.mean_signed}
                for f in self.factors
            },
        }

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def csv_rows(self) -> list:
        rows = [
            [self.strategy, f.name, self.replications, self.seed, repr(f.q_hat), repr(f.se), repr(f.mean_abs), repr(f.mean_signed)]
            for f in self.factors
        ]
        rows.append([self.strategy, "*joint*", self.replications, self.seed, repr(self.joint_q_hat), repr(self.joint_se), "", ""])
        return rows

    CSV_HEADER = ("strategy", "factor", "replications", "seed", "q_hat", "se", "mean_abs", "mean_signed")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        w.writerows(self.csv_rows())
        return buf.getvalue()


def monte_carlo_se(q_hat: float, replications: int) -> float:
    return math.sqrt(q_hat * (1 - q_hat) / replications)


def _replicate(args) -> np.ndarray:
    """Per-replication records for a block of indices.

    Each row holds, per factor, the comparable flag, the signed statistic;
    then the joint flag and the two arm sizes.
    """
    spec, strategy, thresholds, seed, start, stop, swap = args
    loading = spec.loading()
    m = len(spec.factors)
    out = np.empty((stop - start, 2 * m + 3))
    for row, r in enumerate(range(start, stop)):
        pop_rng, alloc_rng = replication_streams(seed, r)
        matrix = population_matrix(spec, pop_rng, loading)
        mask = _allocate_matrix(spec, matrix, strategy, alloc_rng)
        if swap:
            mask = ~mask
        n_t, n_c = int(mask.sum()), int((~mask).sum())
        n = min(n_t, n_c)
        joint = True
        for j, (f, (stat, std, _)) in enumerate(zip(spec.factors, _factor_stats(spec, matrix, mask))):
            ok = within_threshold(f.kind, stat, std, n, thresholds[f.name])
            joint &= ok
            out[row, j] = ok
            out[row, m + j] = stat
        out[row, 2 * m] = joint
        out[row, 2 * m + 1] = n_t
        out[row, 2 * m + 2] = n_c
    return out


def _blocks(total: int, jobs: int) -> list:
    size = max(1, math.ceil(total / (4 * jobs)))
    return [(s, min(total, s + size)) for s in range(0, total, size)]


def _run_blocks(fn, payloads: list, jobs: int) -> list:
    if jobs <= 1 or len(payloads) == 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads))


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def run_replications(
    spec: PopulationSpec,
    strategy: StrategyConfig,
    thresholds: Mapping[str, ComparabilityThreshold],
    replications: int,
    seed: int,
    jobs: int = 1,
    swap_arms: bool = False,
) -> SimulationResult:
    """Estimate per-factor and joint comparability rates of ``strategy``.

    Each replication draws a fresh population and a fresh allocation and
    checks every factor against its threshold.  ``swap_arms`` relabels T and
    C in every replication (signed means negate, rates are unchanged).
    """
    if int(replications) != replications or replications < 1:
        raise DomainError(f"replication count must be a positive integer, got {replications}")
    missing = [f for f in spec.names() if f not in thresholds]
    if missing:
        raise DomainError(f"no threshold for factors {missing}")
    payloads = [(spec, strategy, dict(thresholds), seed, a, b, swap_arms) for a, b in _blocks(replications, jobs)]
    records = np.vstack(_run_blocks(_replicate, payloads, jobs))
    m = len(spec.factors)
    factors = []
    for j, name in enumerate(spec.names()):
        q = int(records[:, j].sum()) / replications
        stats = records[:, m + j]
        factors.append(FactorSummary(name, q, monte_carlo_se(q, replications), _mean(np.abs(stats)), _mean(stats)))
    joint = int(records[:, 2 * m].sum()) / replications
    sizes = (_mean(records[:, 2 * m + 1]), _mean(records[:, 2 * m + 2]))
    return SimulationResult(strategy.kind, int(replications), int(seed), tuple(factors), joint, monte_carlo_se(joint, replications), sizes)


# -- comparing strategies under dependence ----------------------------------------


@dataclass(frozen=True)
class FactorContrast:
    """Mean absolute imbalance of one factor under systematic (S) and random (R) allocation."""

    name: str
    observed: bool
    mean_systematic: float
    mean_random: float
    mean_difference: float
    se_difference: float
    classification: Optional[str] = None
    margin_random: Optional[float] = None
    margin_systematic: Optional[float] = None


@dataclass(frozen=True)
class StrategyComparison:
    replications: int
    seed: int
    observed: str
    factors: tuple

    def factor(self, name: str) -> FactorContrast:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def classification(self) -> str:
        """Structure label of the first unobserved factor."""
        return next(f.classification for f in self.factors if not f.observed)

    def to_dict(self) -> dict:
        out = {"replications": self.replications, "seed": self.seed, "observed": self.observed, "factors": {}}
        for f in self.factors:
            entry = {
                "observed": f.observed,
                "d_S": f.mean_systematic,
                "d_R": f.mean_random,
                "d_S_minus_d_R": f.mean_difference,
                "se": f.se_difference,
            }
            if f.classification is not None:
                entry["structure"] = f.classification
            if f.margin_random is not None:
                entry["margin_R"] = f.margin_random
                entry["margin_S"] = f.margin_systematic
            out["factors"][f.name] = entry
        return out

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    CSV_HEADER = ("factor", "observed", "replications", "seed", "d_S", "d_R", "difference", "se", "structure")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for f in self.factors:
            w.writerow(
                [
                    f.name,
                    int(f.observed),
                    self.replications,
                    self.seed,
                    repr(f.mean_systematic),
                    repr(f.mean_random),
                    repr(f.mean_difference),
                    repr(f.se_difference),
                    f.classification or "",
                ]
            )
        return buf.getvalue()


def classify(mean_difference: float, se: float, band: float = 3.0) -> str:
    """Benign if d_S < d_R beyond ``band`` SEs, malign if above, else neutral."""
    if mean_difference < -band * se:
        return BENIGN
    if mean_difference > band * se:
        return MALIGN
    return NEUTRAL


def _abs_imbalance(matrix: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """|treatment sum - control sum| per column (ordinal columns hold ranks)."""
    return np.abs(matrix[mask].sum(axis=0) - matrix[~mask].sum(axis=0))


def _contrast(args) -> np.ndarray:
    source, observed_cols, systematic, seed, start, stop = args
    out = []
    if isinstance(source, PopulationSpec):
        loading = source.loading()
    for r in range(start, stop):
        pop_rng, rand_rng, sys_rng = replication_streams(seed, r, 3)
        if isinstance(source, PopulationSpec):
            matrix = population_matrix(source, pop_rng, loading)
            kinds = [f.kind for f in source.factors]
        else:
            matrix, kinds = source
        n = len(matrix) // 2
        rand_mask = random_split_mask(len(matrix), rand_rng)
        cols = []
        for j, w in observed_cols:
            cols.extend(objective_columns(kinds[j], matrix[:, j], w, n))
        sys_mask, _, _ = local_search(np.column_stack(cols), random_split_mask(len(matrix), sys_rng), systematic.budget)
        out.append(np.concatenate([_abs_imbalance(matrix, sys_mask), _abs_imbalance(matrix, rand_mask)]))
    return np.array(out)


def _cohort_matrix(cohort: Cohort) -> tuple:
    kinds = [a.kind for a in cohort.schema]
    if any(k not in FACTOR_KINDS for k in kinds):
        raise DomainError("comparison supports binary, ordinal and numeric attributes")
    cols = []
    for a in cohort.schema:
        x = np.asarray(cohort.column(a.name), dtype=float)
        if a.kind == ORDINAL:
            x = rankdata(x, method="average")
        cols.append(x)
    return np.column_stack(cols), kinds


def compare_strategies(
    population: Union[PopulationSpec, Cohort],
    observed: str,
    replications: int,
    seed: int,
    systematic: Optional[StrategyConfig] = None,
    thresholds: Optional[Mapping[str, float]] = None,
    band: float = 3.0,
    jobs: int = 1,
) -> StrategyComparison:
    """Contrast systematic balancing of ``observed`` with complete randomization.

    Each replication draws one population (or reuses a fixed cohort), splits
    it once at random and once by local search on the observed factor, and
    records the absolute arm-sum difference ``d`` of every factor.  Each
    unobserved factor is classified by the paired mean of
    ``d_S - d_R``: benign below ``-band`` SEs, malign above ``+band`` SEs,
    neutral otherwise.  ``thresholds`` optionally gives a comparability
    bound ``c`` per factor, in the same units as ``d``; margins ``c - d`` are
    then reported for both strategies.
    """
    if int(replications) != replications or replications < 1:
        raise DomainError(f"replication count must be a positive integer, got {replications}")
    systematic = systematic or StrategyConfig(SYSTEMATIC, weights={observed: 1.0})
    if systematic.kind != SYSTEMATIC:
        raise DomainError("the balancing strategy must be systematic")
    if isinstance(population, PopulationSpec):
        names = population.names()
        source = population
    else:
        names = [a.name for a in population.schema]
        source = _cohort_matrix(population)
        if len(population) % 2:
            raise DomainError("equal split needs an even cohort")
    if observed not in names:
        raise DomainError(f"no factor named {observed!r}")
    if len(names) < 2:
        raise DomainError("need at least one unobserved factor")
    weights = systematic.weights or {observed: 1.0}
    leaked = [f for f, w in weights.items() if f != observed and w != 0]
    if leaked:
        raise DomainError(f"systematic objective references unobserved factors {leaked}")
    observed_cols = [(names.index(observed), weights.get(observed, 1.0))]

    payloads = [(source, observed_cols, systematic, seed, a, b) for a, b in _blocks(replications, jobs)]
    records = np.vstack(_run_blocks(_contrast, payloads, jobs))
    m = len(names)
    factors = []
    for j, name in enumerate(names):
        d_s, d_r = records[:, j], records[:, m + j]
        diff = d_s - d_r
        mean_diff = _mean(diff)
        if replications > 1:
            var = math.fsum((diff - mean_diff) ** 2) / (replications - 1)
            se = math.sqrt(var / replications)
        else:
            se = 0.0
        is_obs = name == observed
        c = (thresholds or {}).get(name)
        factors.append(
            FactorContrast(
                name,
                is_obs,
                _mean(d_s),
                _mean(d_r),
                mean_diff,
                se,
                None if is_obs else classify(mean_diff, se, band),
                None if c is None else c - _mean(d_r),
                None if c is None else c - _mean(d_s),
            )
        )
    return StrategyComparison(int(replications), int(seed), observed, tuple(factors))
