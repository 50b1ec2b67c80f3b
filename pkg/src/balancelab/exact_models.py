"""Exact imbalance distributions, comparability probabilities and sample sizes.

Three nuisance-factor models are covered, each describing two arms of ``n``
units formed by a chance mechanism:

* binary: a trait present with probability ``p``; the imbalance is the
  difference ``D = S1 - S2`` of trait counts, each arm count binomial(n, p).
* rank: the ``2n`` units carry distinct ranks ``1..2n``; the imbalance is the
  rank-sum difference ``D = 2*S1 - n(2n+1)``.
* continuous: a normal ability ``N(mu, sigma)``; the absolute imbalance is
  ``D ~ N(0, sqrt(2n) sigma)`` and the relative one ``Q = D/n``.

All sample-size functions round up to the next integer and never return less
than one unit per arm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from numbers import Rational
from typing import Iterable, Optional

import numpy as np

from .errors import DomainError

RANGE_FRACTION = "range-fraction"
SIGMA_MULTIPLE = "sigma-multiple"


def _exact(x) -> Fraction:
    """Exact rational for ``x``; floats are read through their shortest repr
    so that ``0.2`` becomes ``1/5`` rather than its binary expansion."""
    if isinstance(x, Rational):
        return Fraction(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            raise DomainError(f"non-finite value {x!r}")
        return Fraction(repr(x))
    return Fraction(str(x))


def _check_probability(p) -> None:
    if not 0 <= p <= 1:
        raise DomainError(f"probability must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class BinaryModel:
    """Two arms of ``n`` units each, trait prevalence ``p``."""

    n: int
    p: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")
        _check_probability(self.p)

    @property
    def sd(self) -> float:
        """Standard deviation of ``D``: sqrt(2 n p (1-p))."""
        p = float(self.p)
        return math.sqrt(2 * self.n * p * (1 - p))


@dataclass(frozen=True)
class RankModel:
    """Two arms of ``n`` units holding the distinct ranks ``1..2n``."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")

    @property
    def rank_total(self) -> int:
        return self.n * (2 * self.n + 1)

    @property
    def sd(self) -> float:
        """Standard deviation of ``D``: n * sqrt((2n+1)/3)."""
        return self.n * math.sqrt((2 * self.n + 1) / 3)


@dataclass(frozen=True)
class ContinuousModel:
    """Two arms of ``n`` units with normal ability; quantities in units of sigma."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")


@dataclass(frozen=True)
class ComparabilityThreshold:
    """Acceptance criterion for one imbalance statistic.

    ``range-fraction`` accepts ``|D| <= range/i`` where the range is ``n`` for
    counts and ``n**2`` for rank sums.  ``sigma-multiple`` accepts a mean
    difference of at most ``l`` standard deviations of the attribute.  ``k``
    (optional) is the number of standard deviations of the imbalance
    statistic the threshold should cover and is only used for sample sizes.
    """

    kind: str
    i: Optional[int] = None
    l: Optional[float] = None
    k: Optional[float] = None

    def __post_init__(self):
        if self.kind == RANGE_FRACTION:
            if self.i is None or self.l is not None:
                raise DomainError("range-fraction threshold takes i and not l")
            if int(self.i) != self.i or self.i < 1:
                raise DomainError(f"i must be a positive integer, got {self.i}")
        elif self.kind == SIGMA_MULTIPLE:
            if self.l is None or self.i is not None:
                raise DomainError("sigma-multiple threshold takes l and not i")
            if not self.l > 0:
                raise DomainError(f"l must be positive, got {self.l}")
        else:
            raise DomainError(f"unknown threshold kind {self.kind!r}")
        if self.k is not None and not self.k > 0:
            raise DomainError(f"k must be positive, got {self.k}")

    @classmethod
    def range_fraction(cls, i: int, k: Optional[float] = None) -> "ComparabilityThreshold":
        return cls(RANGE_FRACTION, i=i, k=k)

    @classmethod
    def sigma_multiple(cls, l: float, k: Optional[float] = None) -> "ComparabilityThreshold":
        return cls(SIGMA_MULTIPLE, l=l, k=k)


# -- binary model -----------------------------------------------------------


def _log_binom_pmf(n: int, p: float) -> np.ndarray:
    # log C(n, y) from the exact integer keeps every term within a few ulps.
    y = np.arange(n + 1)
    log_comb = np.array([math.log(math.comb(n, k)) for k in range(n + 1)])
    return log_comb + y * math.log(p) + (n - y) * math.log1p(-p)


def binary_imbalance_pmf(model: BinaryModel, d: int) -> float:
    """P(D = d) for the difference of two independent binomial(n, p) counts.

    Sums ``C(n,y) C(n,y-d) p^(2y-d) (1-p)^(2n-2y+d)`` over
    ``max(0,d) <= y <= min(n,n+d)`` with every term formed in log space.
    A degenerate prevalence (0 or 1) puts all mass on ``d = 0``.
    """
    n, p = model.n, float(model.p)
    if int(d) != d or not -n <= d <= n:
        raise DomainError(f"d must be an integer in [-{n}, {n}], got {d}")
    d = int(d)
    if p == 0.0 or p == 1.0:
        return 1.0 if d == 0 else 0.0
    lb = _log_binom_pmf(n, p)
    y = np.arange(max(0, d), min(n, n + d) + 1)
    terms = lb[y] + lb[y - d]
    top = terms.max()
    return float(math.exp(top) * np.exp(terms - top).sum())


def binary_imbalance_distribution(model: BinaryModel) -> np.ndarray:
    """Array of P(D = d) for ``d = -n..n`` (index ``d + n``)."""
    return np.array([binary_imbalance_pmf(model, d) for d in range(-model.n, model.n + 1)])


def binary_comparability_prob(i: int, model: BinaryModel) -> float:
    """Probability ``q(i, n, p)`` that ``|D| <= n/i``.

    The bound is real-valued: an integer ``d`` qualifies iff ``|d| * i <= n``.
    """
    n = model.n
    if int(i) != i or not 1 <= i <= n:
        raise DomainError(f"i must be an integer in [1, {n}], got {i}")
    pmf = binary_imbalance_distribution(model)
    d = np.arange(-n, n + 1)
    return float(pmf[np.abs(d) * int(i) <= n].sum())


def binary_sample_size(i: int, k: float, p: float) -> int:
    """Per-arm size ``ceil(2 p (1-p) i^2 k^2)``, at least 1.

    Beyond this size ``n/i`` covers ``k`` standard deviations of ``D``.
    Evaluated in exact rational arithmetic, so ``p = 0.2`` gives exactly 288
    for ``i=10, k=3``.
    """
    if int(i) != i or i < 1:
        raise DomainError(f"i must be a positive integer, got {i}")
    if not k > 0:
        raise DomainError(f"k must be positive, got {k}")
    _check_probability(p)
    pq, kq = _exact(p), _exact(k)
    return max(1, math.ceil(2 * pq * (1 - pq) * int(i) ** 2 * kq**2))


def joint_comparability(qs: Iterable[float]) -> float:
    """Probability that independent factors are all comparable: ``prod(qs)``.

    An empty collection is vacuously balanced and gives 1.
    """
    out = 1.0
    for q in qs:
        _check_probability(q)
        out *= q
    return out


def joint_noncomparability(qs: Iterable[float]) -> float:
    """Probability that at least one independent factor is not comparable."""
    return 1.0 - joint_comparability(qs)


# -- rank model -------------------------------------------------------------


@lru_cache(maxsize=None)
def rank_sum_counts(n: int) -> tuple:
    """Number of ``n``-subsets of ``{1..2n}`` per rank sum.

    Entry ``u`` counts subsets whose rank sum is ``n(n+1)/2 + u`` for
    ``u = 0..n^2``.  The counts are the coefficients of the Gaussian binomial
    ``[2n choose n]_q``, built from the product
    ``prod_j (1 - q^(n+j)) / (1 - q^j)`` in exact integer arithmetic.
    """
    if n < 0:
        raise DomainError(f"n must be nonnegative, got {n}")
    size = n * n + 1
    c = [0] * size
    c[0] = 1
    for j in range(1, n + 1):
        step = n + j
        for u in range(size - 1, step - 1, -1):
            c[u] -= c[u - step]
        for u in range(j, size):
            c[u] += c[u - j]
    return tuple(c)


def rank_imbalance_pmf(model: RankModel, d: int) -> float:
    """P(D = d) when arm T is a uniformly random ``n``-subset of ranks.

    ``D = 2*S1 - n(2n+1)`` always has the parity of ``n``; other values of
    ``d`` have probability 0.
    """
    n = model.n
    if int(d) != d or abs(d) > n * n:
        raise DomainError(f"d must be an integer in [-{n * n}, {n * n}], got {d}")
    twice_u = int(d) + n * n
    if twice_u % 2:
        return 0.0
    return rank_sum_counts(n)[twice_u // 2] / math.comb(2 * n, n)


def rank_imbalance_distribution(model: RankModel) -> dict:
    """Mapping ``d -> P(D = d)`` over the reachable imbalances."""
    n = model.n
    total = math.comb(2 * n, n)
    return {2 * u - n * n: c / total for u, c in enumerate(rank_sum_counts(n))}


def rank_comparability_prob(i: int, model: RankModel) -> float:
    """Probability that ``|D| <= n^2/i`` for the rank-sum imbalance."""
    n = model.n
    if int(i) != i or not 1 <= i <= n * n:
        raise DomainError(f"i must be an integer in [1, {n * n}], got {i}")
    i = int(i)
    # sum exact counts first so the only rounding happens in the final division
    hits = sum(c for u, c in enumerate(rank_sum_counts(n)) if abs(2 * u - n * n) * i <= n * n)
    return hits / math.comb(2 * n, n)


def rank_sample_size(i: int, k: float) -> int:
    """Per-arm size ``ceil(ik (ik + sqrt((ik)^2 + 3)) / 3)``, at least 1.

    This is where ``n^2/i`` meets ``k`` standard deviations of the rank-sum
    imbalance.  The floating-point root is corrected with the exact condition
    ``3 n^2 >= (ik)^2 (2n + 1)`` so the result is the smallest qualifying n.
    """
    if int(i) != i or i < 1:
        raise DomainError(f"i must be a positive integer, got {i}")
    if not k > 0:
        raise DomainError(f"k must be positive, got {k}")
    ik = int(i) * _exact(k)
    x = float(ik)
    n = max(1, math.ceil(x * (x + math.sqrt(x * x + 3)) / 3))

    def ok(m):
        return 3 * m * m >= ik * ik * (2 * m + 1)

    while n > 1 and ok(n - 1):
        n -= 1
    while not ok(n):
        n += 1
    return n


# -- continuous model ---------------------------------------------------------


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the C library's complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def continuous_comparability_prob(l: float, model: ContinuousModel, absolute: bool = False) -> float:
    """Probability that two arms differ by at most ``l`` ability SDs.

    By default the relative imbalance ``Q = D/n ~ N(0, sqrt(2/n))`` is used,
    giving ``2 Phi(l sqrt(n/2)) - 1``.  With ``absolute=True`` the total
    ``D ~ N(0, sqrt(2n))`` is used instead: ``2 Phi(l / sqrt(2n)) - 1``.
    """
    if not l > 0:
        raise DomainError(f"l must be positive, got {l}")
    n = model.n
    z = l / math.sqrt(2 * n) if absolute else l * math.sqrt(n / 2)
    # erf form keeps precision near 1 better than 2*cdf - 1
    return math.erf(z / math.sqrt(2.0))


def continuous_sample_size(l: float, k: float) -> int:
    """Per-arm size ``ceil(2 k^2 / l^2)``, at least 1."""
    if not l > 0:
        raise DomainError(f"l must be positive, got {l}")
    if not k > 0:
        raise DomainError(f"k must be positive, got {k}")
    lq, kq = _exact(l), _exact(k)
    return max(1, math.ceil(2 * kq**2 / lq**2))


def sign_test_pvalue(n: int) -> float:
    """One-sided sign-test p-value when all ``n`` paired comparisons agree."""
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    return 2.0 ** -int(n)
