"""Acceptance criteria, one test per criterion.

Each test gathers its sub-checks, prints a PASS/FAIL line and fails with the
list of failing sub-checks.  The conftest prints the per-criterion summary.
"""

import io
import itertools
import math

import numpy as np

from balancelab.allocation import (
    distance_matrix,
    exhaustive_pairing,
    exhaustive_split,
    greedy_pairing,
    local_search,
    objective_matrix,
    pairing_cost,
    random_split_mask,
    split_objective,
    systematic_split,
)
from balancelab.allocation import StrategyConfig
from balancelab.cli import dispatch
from balancelab.exact_models import (
    BinaryModel,
    ComparabilityThreshold,
    RankModel,
    binary_comparability_prob,
    binary_imbalance_distribution,
    binary_sample_size,
    continuous_sample_size,
    joint_comparability,
    rank_comparability_prob,
    rank_imbalance_distribution,
    rank_sample_size,
)
from balancelab.imbalance_metrics import Allocation, imbalance_report
from balancelab.simulation import BENIGN, NEUTRAL, FactorSpec, PopulationSpec, compare_strategies, run_replications

from .cohorts import FOUR_POINTS, four_points, old_young_cohort, random_cohort
from .test_exact_models import brute_binary_pmf


class Checks:
    def __init__(self, number):
        self.number = number
        self.failed = []
        self.count = 0

    def check(self, ok, label):
        self.count += 1
        if not ok:
            self.failed.append(label)

    def printed(self, value, printed: str, label):
        """``value`` rounds to ``printed`` within half a unit in its last digit."""
        decimals = len(printed.partition(".")[2])
        self.check(abs(value - float(printed)) <= 0.5 * 10.0**-decimals + 1e-15, f"{label}: {value!r} vs {printed}")

    def finish(self):
        status = "FAIL" if self.failed else "PASS"
        print(f"criterion {self.number}: {status} ({self.count - len(self.failed)}/{self.count} checks)")
        assert not self.failed, "; ".join(self.failed)


def half_unit_ok(value, printed):
    decimals = len(printed.partition(".")[2])
    return abs(value - float(printed)) <= 0.5 * 10.0**-decimals


def test_criterion_01_binary_comparability_table():
    c = Checks(1)
    table = [(5, 0.5, "0.66"), (10, 0.5, "0.74"), (25, 0.5, "0.88"), (50, 0.5, "0.96"), (5, 0.1, "0.898"), (50, 0.1, "0.999"), (5, 0.01, "0.998")]
    for n, p, printed in table:
        c.printed(binary_comparability_prob(5, BinaryModel(n, p)), printed, f"q(5,{n},{p})")
    c.finish()


def test_criterion_02_binary_sample_sizes():
    c = Checks(2)
    ps = [0.5, 0.2, 0.1, 0.01]
    expected = {(10, 3): [450, 288, 162, 18], (5, 3): [113, 72, 41, 5], (10, 2): [200, 128, 72, 8]}
    for (i, k), sizes in expected.items():
        got = [binary_sample_size(i, k, p) for p in ps]
        c.check(got == sizes, f"n({i},{k}) = {got}, expected {sizes}")
    c.finish()


# printed grid rows: p, n, q, q^2, q^5, q^10
MULTI_FACTOR = [
    (0.5, 5, "0.66", "0.43", "0.12", "0.015"),
    (0.5, 10, "0.74", "0.54", "0.217", "0.047"),
    (0.5, 25, "0.88", "0.78", "0.53", "0.28"),
    (0.5, 50, "0.96", "0.93", "0.84", "0.699"),
    (0.1, 5, "0.898", "0.807", "0.58", "0.34"),
    (0.1, 10, "0.94", "0.88", "0.74", "0.54"),
    (0.1, 25, "0.98999", "0.98", "0.95", "0.90"),
    (0.1, 50, "0.999", "0.9989", "0.997", "0.995"),
    (0.01, 5, "0.998", "0.996", "0.99", "0.98"),
    (0.01, 10, "0.9998", "0.9996", "0.999", "0.9979"),
    (0.01, 25, "0.9999998", "0.9999995", "0.999999", "0.999998"),
    (0.01, 50, "1", "1", "1", "1"),
]


def test_criterion_03_multi_factor_table():
    c = Checks(3)
    for p, n, *printed in MULTI_FACTOR:
        q = binary_comparability_prob(5, BinaryModel(n, p))
        for m, text in zip((1, 2, 5, 10), printed):
            c.printed(joint_comparability([q] * m), text, f"q(5,{n},{p})^{m}")
    # the single-factor table prints 0.9997 for the same cell; the exact value
    # is 0.999794, which matches the multi-factor table's 0.9998 only
    q = binary_comparability_prob(5, BinaryModel(10, 0.01))
    c.check(abs(q - 0.999794) < 5e-7, f"q(5,10,1/100) = {q!r}")
    c.check(not half_unit_ok(q, "0.9997"), "q(5,10,1/100) unexpectedly matches 0.9997")
    c.finish()


RANK_TABLE = {
    3: [0.58, 0.78, 0.96, 0.996, 1.0],
    5: [0.45, 0.56, 0.78, 0.92, 0.99],
    10: [0.16, 0.32, 0.45, 0.61, 0.78],
}


def rank_crossing(i, k):
    """Smallest n with n**2 / i >= k * sd(D), by direct search."""
    n = 1
    while n * n / i < k * math.sqrt(n * n * (2 * n + 1) / 3):
        n += 1
    return n


def test_criterion_04_rank_model():
    c = Checks(4)
    for i, row in RANK_TABLE.items():
        for n, printed in zip((5, 10, 25, 50, 100), row):
            q = rank_comparability_prob(i, RankModel(n))
            c.check(abs(q - printed) <= 0.005, f"q_rank({i},{n}) = {q:.4f} vs {printed}")
    c.check(rank_sample_size(10, 3) == 601, f"n_rank(10,3) = {rank_sample_size(10, 3)}")
    c.check(rank_sample_size(5, 3) == 151, f"n_rank(5,3) = {rank_sample_size(5, 3)}")
    for i, k in itertools.product((5, 10), (2, 3)):
        c.check(rank_sample_size(i, k) == rank_crossing(i, k), f"crossing point ({i},{k})")
    # the printed 267 sits below the crossing point 268 (267.17 before rounding up)
    got = rank_sample_size(10, 2)
    c.check(got == 267, f"n_rank(10,2) = {got}, expected 267")
    c.finish()


def test_criterion_05_continuous_sample_sizes():
    c = Checks(5)
    ls = [5, 2, 1, 0.5, 0.25, 0.125]
    rows = {3: [1, 5, 18, 72, 288, 1152], 1: [1, 1, 2, 8, 32, 128], 2: [1, 2, 8, 32, 128, 512], 5: [2, 13, 50, 200, 800, 3200]}
    for k, sizes in rows.items():
        got = [continuous_sample_size(l, k) for l in ls]
        c.check(got == sizes, f"k={k}: {got} vs {sizes}")
        formula = [max(1, math.ceil(2 * k * k / (l * l))) for l in ls]
        c.check(got == formula, f"k={k}: {got} vs ceil(2k^2/l^2) {formula}")
    c.finish()


def rank_split_enumeration(n):
    counts = {}
    total = n * (2 * n + 1)
    for arm in itertools.combinations(range(1, 2 * n + 1), n):
        d = 2 * sum(arm) - total
        counts[d] = counts.get(d, 0) + 1
    size = math.comb(2 * n, n)
    return {d: v / size for d, v in counts.items()}


def test_criterion_06_oracle_equivalence():
    c = Checks(6)
    for n, p in itertools.product(range(1, 9), (0.1, 0.5, 0.9)):
        dist = binary_imbalance_distribution(BinaryModel(n, p))
        brute = brute_binary_pmf(n, p)
        err = max(abs(dist[d + n] - float(brute[d])) for d in range(-n, n + 1))
        c.check(err <= 1e-12, f"binary pmf n={n} p={p} error {err:.2e}")
    for n in range(1, 7):
        got = rank_imbalance_distribution(RankModel(n))
        want = rank_split_enumeration(n)
        c.check(got.keys() == want.keys() and all(got[d] == want[d] for d in want), f"rank pmf n={n}")
    rng = np.random.default_rng(2024)
    for trial in range(40):
        cohort = random_cohort(rng, 4 + 2 * (trial % 5))
        X = objective_matrix(cohort, {a.name: 1.0 for a in cohort.schema})
        _, best = exhaustive_split(X)
        alloc = systematic_split(cohort, {}, 1000, rng)
        value = split_objective(X, alloc.mask(cohort.ids))
        c.check(value >= best - 1e-12, f"systematic below oracle, trial {trial}")
        dist = distance_matrix(cohort)
        oracle, _ = exhaustive_pairing(dist)
        c.check(pairing_cost(dist, greedy_pairing(dist)) >= oracle - 1e-12, f"pairing below oracle, trial {trial}")
    cohort = four_points()
    for weights in ({"x": 1.0}, {"x": 1.0, "y": 1.0}):
        X = objective_matrix(cohort, weights)
        _, best = exhaustive_split(X)
        for seed in range(5):
            mask, value, _ = local_search(X, random_split_mask(4, seed), 100)
            c.check(math.isclose(value, best, abs_tol=1e-12), f"four points {sorted(weights)} seed {seed}")
    dist = distance_matrix(cohort)
    c.check(math.isclose(pairing_cost(dist, greedy_pairing(dist)), exhaustive_pairing(dist)[0]), "four-point pairing")
    c.finish()


def test_criterion_07_monte_carlo_calibration():
    c = Checks(7)
    random = StrategyConfig("complete-random")
    th = ComparabilityThreshold.range_fraction(5)
    reps = 100_000
    q = binary_comparability_prob(5, BinaryModel(25, 0.5))
    res = run_replications(PopulationSpec(25, (FactorSpec("x", p=0.5),)), random, {"x": th}, reps, seed=20240)
    band = 3 * math.sqrt(q * (1 - q) / reps)
    q_hat = res.factor("x").q_hat
    c.check(abs(q_hat - q) <= band, f"single factor q_hat {q_hat} vs {q:.4f} +/- {band:.4f}")
    c.check(abs(q_hat - 0.88) <= 0.004, f"single factor q_hat {q_hat} vs printed 0.88 +/- 0.004")
    spec = PopulationSpec(25, tuple(FactorSpec(f"x{j}", p=0.5) for j in range(5)))
    res = run_replications(spec, random, {f"x{j}": th for j in range(5)}, reps, seed=20241)
    q5 = q**5
    c.check(abs(res.joint_q_hat - q5) <= 3 * res.joint_se, f"joint {res.joint_q_hat} vs {q5:.4f} +/- {3 * res.joint_se:.4f}")
    # 0.88 is q rounded to two digits; its fifth power is 0.7 SE off q^5, so
    # the simulated rate is held to q^5 and q^5 to the printed 0.53
    c.printed(q5, "0.53", "q^5")
    c.finish()


def test_criterion_08_pathological_instance():
    c = Checks(8)
    cohort = four_points()
    y = dict(zip(cohort.ids, cohort.column("y")))
    for seed in range(5):
        alloc = systematic_split(cohort, {"x": 1.0}, 100, seed)
        d_y = abs(sum(y[i] for i in alloc.treatment) - sum(y[i] for i in alloc.control))
        c.check(d_y == 4, f"x-only split y imbalance {d_y}")
    ys = [b for _, b in FOUR_POINTS]
    splits = [abs(2 * sum(ys[k] for k in arm) - sum(ys)) for arm in itertools.combinations(range(4), 2)]
    c.check(len(splits) == 6 and max(splits) == 4, "4 is the largest y imbalance")
    c.check(sum(splits) / len(splits) == 2, f"mean random y imbalance {sum(splits) / len(splits)}")
    for rho, expected in ((0.0, NEUTRAL), (0.8, BENIGN)):
        spec = PopulationSpec(20, (FactorSpec("x"), FactorSpec("y")), correlation=((1, rho), (rho, 1)))
        res = compare_strategies(spec, "x", 10_000, seed=808)
        got = res.factor("y").classification
        c.check(got == expected, f"rho={rho}: {got}, expected {expected}")
    c.finish()


def test_criterion_09_interaction_check():
    c = Checks(9)
    cohort = old_young_cohort()
    alloc = Allocation({"old man": "T", "young woman": "T", "old woman": "C", "young man": "C"})
    report = imbalance_report(cohort, alloc, 2)
    c.check(report.factor("age").statistic == 0, "age marginal")
    c.check(report.factor("gender").statistic == 0, "gender marginal")
    cell = report.cell(("age", "gender"), ("young", "female"))
    c.check(abs(cell.difference) == 1, f"young-woman cell {cell.difference}")
    c.finish()


SIM_CONFIG = """\
population:
  n: 14
  factors:
    - {name: x, kind: binary, p: 0.4}
    - {name: h, kind: numeric, mean: 170, sd: 10}
    - {name: r, kind: ordinal}
  correlation: [[1, 0.3, 0], [0.3, 1, 0.2], [0, 0.2, 1]]
strategies:
  - complete-random
  - matched-pairs
  - {kind: minimization, weights: {x: 1}, biased_coin: 0.8}
  - {kind: systematic, weights: {x: 1, h: 1}}
thresholds:
  x: {i: 5}
  h: {l: 0.5}
  r: {i: 4}
replications: 300
seed: 99
"""

COMPARE_CONFIG = """\
population:
  n: 10
  factors:
    - {name: x}
    - {name: y}
  correlation: [[1, 0.6], [0.6, 1]]
compare:
  observed: x
  margins: {x: 2, y: 2}
replications: 400
seed: 7
"""


def test_criterion_10_simulate_determinism(tmp_path):
    c = Checks(10)
    for name, text in (("sim.yaml", SIM_CONFIG), ("cmp.yaml", COMPARE_CONFIG)):
        path = tmp_path / name
        path.write_text(text)
        for fmt in ("csv", "text"):
            outputs = []
            for jobs in (1, 2, 4):
                out, err = io.StringIO(), io.StringIO()
                code = dispatch(["simulate", "--config", str(path), "--jobs", str(jobs), "--format", fmt, "--seed", "31"], stdout=out, stderr=err)
                c.check(code == 0, f"{name} jobs={jobs} exit {code}: {err.getvalue()}")
                outputs.append(out.getvalue().encode())
            c.check(len(set(outputs)) == 1 and outputs[0], f"{name} {fmt} output differs across --jobs")
    c.finish()
