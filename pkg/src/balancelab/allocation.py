"""Allocation strategies: complete randomization, matched pairs, minimization
and systematic balanced splitting.

Every strategy is a pure function of the cohort order, its configuration and
the random generator handed in.  Ties are broken by cohort position (lowest
first) without consuming randomness, except for minimization ties, which are
settled by a fair coin.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError
from .imbalance_metrics import (
    BINARY,
    CATEGORICAL,
    CONTROL,
    NUMERIC,
    ORDINAL,
    TREATMENT,
    Allocation,
    Cohort,
    mixed_distance,
    pooled_sd,
)

COMPLETE_RANDOM = "complete-random"
MATCHED_PAIRS = "matched-pairs"
MINIMIZATION = "minimization"
SYSTEMATIC = "systematic"
STRATEGIES = (COMPLETE_RANDOM, MATCHED_PAIRS, MINIMIZATION, SYSTEMATIC)

EXHAUSTIVE_LIMIT = 12


@dataclass(frozen=True)
class StrategyConfig:
    """Configuration of one allocation strategy.

    ``weights`` maps balancing factor names to nonnegative weights; when
    empty every eligible attribute is used with its schema weight.
    ``biased_coin`` is the probability of following the minimizing arm
    (1 means deterministic minimization).  ``size_weight`` adds total arm
    size as an implicit minimization factor.  ``budget`` caps the number of
    improving swaps in systematic splitting.
    """

    kind: str
    weights: Mapping[str, float] = field(default_factory=dict)
    biased_coin: float = 1.0
    size_weight: float = 1.0
    budget: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise DomainError(f"unknown strategy {self.kind!r}; expected one of {', '.join(STRATEGIES)}")
        if not 0.5 <= self.biased_coin <= 1:
            raise DomainError(f"biased-coin probability must lie in [1/2, 1], got {self.biased_coin}")
        if any(w < 0 for w in self.weights.values()):
            raise DomainError("factor weights must be nonnegative")
        if self.size_weight < 0:
            raise DomainError("size weight must be nonnegative")
        if int(self.budget) != self.budget or self.budget < 0:
            raise DomainError(f"budget must be a nonnegative integer, got {self.budget}")
        object.__setattr__(self, "weights", dict(self.weights))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _half(size: int) -> int:
    if size % 2:
        raise DomainError(f"equal split needs an even cohort, got {size} units")
    return size // 2


def _factor_weights(cohort: Cohort, weights: Mapping[str, float], eligible) -> dict:
    if weights:
        for name in weights:
            attr = cohort.attribute(name)
            if attr.kind not in eligible:
                raise DomainError(f"factor {name!r} of kind {attr.kind} cannot be balanced here")
        return dict(weights)
    return {a.name: a.weight for a in cohort.schema if a.kind in eligible}


# -- complete randomization ---------------------------------------------------


def random_split_mask(size: int, rng) -> np.ndarray:
    """Uniform equal split of ``size`` positions: a random permutation, first half to T."""
    n = _half(size)
    mask = np.zeros(size, dtype=bool)
    mask[_rng(rng).permutation(size)[:n]] = True
    return mask


def complete_randomization(cohort: Cohort, rng) -> Allocation:
    """Each of the C(2n, n) equal splits with the same probability."""
    return Allocation.from_mask(cohort.ids, random_split_mask(len(cohort), rng))


# -- matched pairs -------------------------------------------------------------


def distance_matrix(cohort: Cohort, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Pairwise :func:`mixed_distance` with ranges taken from the cohort."""
    ranges = cohort.ranges()
    units = cohort.units
    out = np.zeros((len(units), len(units)))
    for a, b in itertools.combinations(range(len(units)), 2):
        out[a, b] = out[b, a] = mixed_distance(units[a], units[b], cohort.schema, weights, ranges)
    return out


def greedy_pairing(dist: np.ndarray) -> list:
    """Pair the lowest unpaired position with its nearest unpaired neighbour."""
    _half(len(dist))
    free = list(range(len(dist)))
    pairs = []
    while free:
        a = free.pop(0)
        # min() keeps the first of equal distances, i.e. the lowest position
        b = min(free, key=lambda j: dist[a, j])
        free.remove(b)
        pairs.append((a, b))
    return pairs


def exhaustive_pairing(dist: np.ndarray) -> tuple:
    """Minimum-total-distance perfect matching by enumeration (small cohorts).

    Returns ``(total, pairs)``.
    """
    size = len(dist)
    _half(size)
    if size > EXHAUSTIVE_LIMIT:
        raise DomainError(f"exhaustive pairing limited to {EXHAUSTIVE_LIMIT} units")

    def best(free):
        if not free:
            return 0.0, []
        a, rest = free[0], free[1:]
        top = (math.inf, [])
        for k, b in enumerate(rest):
            sub, pairs = best(rest[:k] + rest[k + 1 :])
            total = dist[a, b] + sub
            if total < top[0]:
                top = (total, [(a, b)] + pairs)
        return top

    return best(tuple(range(size)))


def pairing_cost(dist: np.ndarray, pairs) -> float:
    return math.fsum(dist[a, b] for a, b in pairs)


def matched_pair_allocation(cohort: Cohort, rng, weights: Optional[Sequence[float]] = None) -> tuple:
    """Greedy nearest-neighbour pairs, one member of each to T by a fair coin.

    Returns ``(allocation, pairs)`` with pairs given as unit-id tuples in the
    order they were formed.
    """
    rng = _rng(rng)
    pairs = greedy_pairing(distance_matrix(cohort, weights))
    mask = np.zeros(len(cohort), dtype=bool)
    for a, b in pairs:
        mask[a if rng.random() < 0.5 else b] = True
    ids = cohort.ids
    return Allocation.from_mask(ids, mask), [(ids[a], ids[b]) for a, b in pairs]


# -- minimization ---------------------------------------------------------------


class MinimizationState:
    """Running per-factor-level arm counts for sequential minimization.

    ``levels`` maps each balancing factor to its declared levels.  Counts
    are kept as ``[treatment, control]`` pairs.
    """

    def __init__(self, levels: Mapping[str, Sequence]):
        self.levels = {f: tuple(ls) for f, ls in levels.items()}
        self.counts = {f: {lv: [0, 0] for lv in ls} for f, ls in self.levels.items()}
        self.sizes = [0, 0]

    @classmethod
    def for_cohort(cls, cohort: Cohort, factors: Optional[Sequence[str]] = None) -> "MinimizationState":
        """State over the cohort's binary/categorical attributes (or ``factors``)."""
        attrs = [cohort.attribute(f) for f in factors] if factors else [a for a in cohort.schema if a.is_discrete]
        for a in attrs:
            if not a.is_discrete:
                raise DomainError(f"minimization needs discrete factors; {a.name!r} is {a.kind}")
        return cls({a.name: cohort.levels_of(a) for a in attrs})

    def _cell(self, factor, level):
        if factor not in self.counts:
            raise DomainError(f"unknown factor {factor!r}")
        if level not in self.counts[factor]:
            raise DomainError(f"factor {factor!r}: undeclared level {level!r}")
        return self.counts[factor][level]

    def imbalance_if(self, profile: Mapping, arm: str, weights: Mapping[str, float], size_weight: float) -> float:
        """Weighted absolute marginal imbalance after adding ``profile`` to ``arm``."""
        side = 0 if arm == TREATMENT else 1
        total = 0.0
        for factor, level in profile.items():
            cell = list(self._cell(factor, level))
            cell[side] += 1
            total += weights.get(factor, 1.0) * abs(cell[0] - cell[1])
        sizes = list(self.sizes)
        sizes[side] += 1
        return total + size_weight * abs(sizes[0] - sizes[1])

    def add(self, profile: Mapping, arm: str) -> None:
        side = 0 if arm == TREATMENT else 1
        cells = [self._cell(f, lv) for f, lv in profile.items()]
        for cell in cells:
            cell[side] += 1
        self.sizes[side] += 1

    def difference(self, factor, level) -> int:
        t, c = self._cell(factor, level)
        return t - c


def profile_of(unit, cohort: Cohort, factors: Sequence[str]) -> dict:
    """Factor-level mapping of a cohort unit for the given factors."""
    return {f: unit.values[cohort.index(f)] for f in factors}


def minimization_allocate(state: MinimizationState, profile: Mapping, config: StrategyConfig, rng) -> str:
    """Assign the next unit and update ``state``.

    For each arm the weighted sum of absolute count differences over the
    unit's factor levels (plus the size term) is computed as if the unit
    joined that arm.  The smaller sum wins with probability
    ``config.biased_coin``; exact ties go to a fair coin.
    """
    rng = _rng(rng)
    for factor in state.levels:
        if factor not in profile:
            raise DomainError(f"unit lacks balancing factor {factor!r}")
    profile = {f: profile[f] for f in state.levels}
    weights = config.weights or {}
    missing = set(weights) - set(state.levels)
    if missing:
        raise DomainError(f"weights for undeclared factors {sorted(missing)}")
    g_t = state.imbalance_if(profile, TREATMENT, weights, config.size_weight)
    g_c = state.imbalance_if(profile, CONTROL, weights, config.size_weight)
    if g_t == g_c:
        arm = TREATMENT if rng.random() < 0.5 else CONTROL
    else:
        best, other = (TREATMENT, CONTROL) if g_t < g_c else (CONTROL, TREATMENT)
        if config.biased_coin >= 1 or rng.random() < config.biased_coin:
            arm = best
        else:
            arm = other
    state.add(profile, arm)
    return arm


def minimization_sequence(cohort: Cohort, config: StrategyConfig, rng) -> tuple:
    """Feed the cohort through minimization in order; returns ``(allocation, state)``.

    Arm sizes are not forced equal; the size term in the imbalance keeps them
    close.
    """
    rng = _rng(rng)
    factors = list(config.weights) or None
    state = MinimizationState.for_cohort(cohort, factors)
    arms = {}
    for unit in cohort.units:
        arms[unit.id] = minimization_allocate(state, profile_of(unit, cohort, list(state.levels)), config, rng)
    return Allocation(arms), state


# -- systematic splitting --------------------------------------------------------


def objective_columns(kind: str, x, weight: float, n: int, levels=None) -> list:
    """Objective columns contributed by one attribute with values ``x``.

    Binary columns count the trait, ordinal columns hold midranks over
    ``n**2``, numeric columns hold ``x / (n * sd)`` and categorical
    attributes give one half-weighted indicator per level.
    """
    if kind == BINARY:
        return [weight * np.asarray(x, dtype=float)]
    if kind == ORDINAL:
        return [weight * rankdata(x, method="average") / n**2]
    if kind == NUMERIC:
        x = np.asarray(x, dtype=float)
        sd = pooled_sd(x)
        return [weight * x / (n * sd) if sd > 0 else np.zeros(len(x))]
    if kind == CATEGORICAL:
        return [0.5 * weight * np.array([v == level for v in x], dtype=float) for level in levels]
    raise DomainError(f"unknown attribute kind {kind!r}")


def objective_matrix(cohort: Cohort, weights: Mapping[str, float]) -> np.ndarray:
    """Columns whose signed arm-sum differences give the weighted imbalances.

    The objective of a split is ``sum(|X[T].sum(0) - X[C].sum(0)|)``, which
    equals the weighted sum of ``|D|`` (binary), ``|rank-sum diff| / n^2``
    (ordinal, midranks), ``|Q| / sd`` (numeric) and half the summed absolute
    level-count differences (categorical).
    """
    size = len(cohort)
    n = _half(size)
    cols = []
    for name, w in weights.items():
        attr = cohort.attribute(name)
        levels = cohort.levels_of(attr) if attr.kind == CATEGORICAL else None
        cols.extend(objective_columns(attr.kind, cohort.column(name), w, n, levels))
    if not cols:
        return np.zeros((size, 0))
    return np.column_stack(cols)


def split_objective(X: np.ndarray, mask: np.ndarray) -> float:
    s = X[mask].sum(axis=0) - X[~mask].sum(axis=0)
    return float(np.abs(s).sum())


def local_search(X: np.ndarray, mask: np.ndarray, budget: int, tol: float = 1e-12) -> tuple:
    """Best-improvement single-swap local search from ``mask``.

    Each step evaluates every exchange of one T position with one C position
    and takes the strictly best one; among equal candidates the pair with the
    lowest (T position, C position) wins.  Stops at a local optimum or after
    ``budget`` swaps.  Returns ``(mask, objective, swaps)``.
    """
    mask = mask.copy()
    s = X[mask].sum(axis=0) - X[~mask].sum(axis=0)
    current = float(np.abs(s).sum())
    swaps = 0
    while swaps < budget:
        t_idx = np.flatnonzero(mask)
        c_idx = np.flatnonzero(~mask)
        moved = s[None, None, :] + 2.0 * (X[c_idx][None, :, :] - X[t_idx][:, None, :])
        obj = np.abs(moved).sum(axis=2)
        best = obj.min()
        if not best < current - tol:
            break
        # first flat index among near-equal minima = lowest (t, c) pair
        flat = int(np.flatnonzero(obj.ravel() <= best + tol)[0])
        a, b = divmod(flat, len(c_idx))
        t, c = t_idx[a], c_idx[b]
        mask[t], mask[c] = False, True
        s = moved[a, b]
        current = float(np.abs(s).sum())
        swaps += 1
    return mask, current, swaps


def exhaustive_split(X: np.ndarray) -> tuple:
    """Best equal split by enumerating all C(2n, n) of them; ``(mask, objective)``."""
    size = len(X)
    n = _half(size)
    if size > EXHAUSTIVE_LIMIT:
        raise DomainError(f"exhaustive search limited to {EXHAUSTIVE_LIMIT} units")
    best_mask, best = None, math.inf
    for arm in itertools.combinations(range(size), n):
        mask = np.zeros(size, dtype=bool)
        mask[list(arm)] = True
        value = split_objective(X, mask)
        if value < best - 1e-12:
            best_mask, best = mask, value
    return best_mask, best


def systematic_split(cohort: Cohort, weights: Mapping[str, float], budget: int, rng) -> Allocation:
    """Seeded random equal split improved by single-swap local search.

    ``weights`` selects the objective factors; an empty mapping balances
    every attribute with its schema weight.
    """
    if any(w < 0 for w in weights.values()):
        raise DomainError("objective weights must be nonnegative")
    weights = _factor_weights(cohort, weights, (BINARY, CATEGORICAL, ORDINAL, NUMERIC))
    X = objective_matrix(cohort, weights)
    mask, _, _ = local_search(X, random_split_mask(len(cohort), rng), budget)
    return Allocation.from_mask(cohort.ids, mask)


def allocate(cohort: Cohort, config: StrategyConfig, rng=None) -> Allocation:
    """Run the strategy named by ``config`` (seeded from ``config.seed`` unless ``rng`` is given)."""
    rng = _rng(config.seed if rng is None else rng)
    if config.kind == COMPLETE_RANDOM:
        return complete_randomization(cohort, rng)
    if config.kind == MATCHED_PAIRS:
        weights = None
        if config.weights:
            weights = [config.weights.get(a.name, 0.0) for a in cohort.schema]
        return matched_pair_allocation(cohort, rng, weights)[0]
    if config.kind == MINIMIZATION:
        return minimization_sequence(cohort, config, rng)[0]
    return systematic_split(cohort, config.weights, config.budget, rng)
