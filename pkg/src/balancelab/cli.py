"""Command-line interface: ``balancelab <command> ...``.

Exit status is 0 on success, 2 for usage errors, 3 for data or schema errors
and 4 for numeric domain errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from fractions import Fraction

import numpy as np

from . import exact_models as em
from .allocation import STRATEGIES, MinimizationState, StrategyConfig, allocate, matched_pair_allocation, minimization_allocate
from .errors import DataError, DomainError
from .imbalance_metrics import imbalance_report
from .io import load_assignment, load_cohort, load_schema, load_simulation_config, parse_record, write_assignment
from .simulation import compare_strategies, run_replications

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DOMAIN = 4

SEED_ENV = "BALANCELAB_SEED"


class UsageError(Exception):
    pass


def number(text: str):
    """Parse ``3``, ``0.5`` or ``1/8``; fractions stay exact."""
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    return int(value) if value.denominator == 1 else value


def probability(text: str) -> float:
    return float(number(text))


def format_probability(x: float, precision=None) -> str:
    """Two significant digits of the smaller tail, like the published tables.

    0.881 prints as 0.88, 0.0148 as 0.015 and 0.99979 as 0.99979.  An
    explicit ``precision`` fixes the number of decimals instead.
    """
    if precision is not None:
        return f"{x:.{precision}f}"
    tail = min(x, 1.0 - x)
    if tail <= 0:
        return f"{x:.2f}"
    decimals = min(12, max(2, 1 - math.floor(math.log10(tail))))
    return f"{x:.{decimals}f}"


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be a decimal integer") from None
        if not 0 <= value < 2**64:
            raise UsageError(f"{SEED_ENV} must fit in 64 bits")
        return value
    return 0


def seed_arg(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be a decimal integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def weights_arg(text: str) -> dict:
    """``name=weight,name=weight``."""
    out = {}
    for item in filter(None, text.split(",")):
        name, _, w = item.partition("=")
        try:
            out[name.strip()] = float(w) if w else 1.0
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad weight in {item!r}") from None
    return out


def _csv(rows, out) -> None:
    csv.writer(out, lineterminator="\n").writerows(rows)


# -- commands ----------------------------------------------------------------------


def cmd_prob(args, out):
    if args.model == "binary":
        _need(args, "i", "n", "p")
        value = em.binary_comparability_prob(args.i, em.BinaryModel(args.n, args.p))
    elif args.model == "rank":
        _need(args, "i", "n")
        value = em.rank_comparability_prob(args.i, em.RankModel(args.n))
    else:
        _need(args, "l", "n")
        value = em.continuous_comparability_prob(float(args.l), em.ContinuousModel(args.n), absolute=args.absolute)
    print(format_probability(value, args.precision), file=out)


def cmd_samplesize(args, out):
    if args.model == "binary":
        _need(args, "i", "k", "p")
        value = em.binary_sample_size(args.i, args.k, args.p_exact)
    elif args.model == "rank":
        _need(args, "i", "k")
        value = em.rank_sample_size(args.i, args.k)
    else:
        _need(args, "l", "k")
        value = em.continuous_sample_size(args.l, args.k)
    print(value, file=out)


def cmd_pmf(args, out):
    rows = [("d", "probability")]
    if args.model == "binary":
        _need(args, "n", "p")
        model = em.BinaryModel(args.n, args.p)
        dist = em.binary_imbalance_distribution(model)
        rows += [(d, repr(float(v))) for d, v in zip(range(-args.n, args.n + 1), dist)]
    else:
        _need(args, "n")
        dist = em.rank_imbalance_distribution(em.RankModel(args.n))
        rows += [(d, repr(v)) for d, v in sorted(dist.items())]
    _csv(rows, out)


def cmd_joint(args, out):
    qs = args.q * args.m
    value = em.joint_comparability(qs)
    if args.complement:
        value = 1.0 - value
    print(format_probability(value, args.precision), file=out)


def cmd_figure(args, out):
    if args.n_max < 1:
        raise DomainError("--n-max must be at least 1")
    ps = args.p or [0.5, 0.2, 0.1, 0.01]
    rows = [["n", f"n/{args.i}"] + [f"{args.k}*sd(p={p})" for p in ps]]
    for n in range(1, args.n_max + 1):
        row = [n, repr(n / args.i)]
        row += [repr(float(args.k) * math.sqrt(2 * p * (1 - p) * n)) for p in ps]
        rows.append(row)
    _csv(rows, out)


def cmd_simulate(args, out):
    cfg = load_simulation_config(args.config)
    reps = args.reps if args.reps is not None else cfg["replications"]
    if reps is None:
        raise UsageError("replication count missing: pass --reps or set replications in the config")
    seed = args.seed if args.seed is not None else cfg["seed"]
    if seed is None:
        seed = _seed(args)
    spec = cfg["population"]
    if "compare" in cfg:
        systematic = next((s for s in cfg["strategies"] if s.kind == "systematic"), None)
        res = compare_strategies(
            spec,
            cfg["compare"]["observed"],
            int(reps),
            int(seed),
            systematic=systematic,
            thresholds=cfg["compare"]["margins"],
            jobs=args.jobs,
        )
        out.write(res.to_csv() if args.format == "csv" else res.to_text())
        return
    results = [run_replications(spec, s, cfg["thresholds"], int(reps), int(seed), jobs=args.jobs) for s in cfg["strategies"]]
    if args.format == "csv":
        from .simulation import SimulationResult

        rows = [SimulationResult.CSV_HEADER]
        for res in results:
            rows += res.csv_rows()
        _csv(rows, out)
    else:
        for res in results:
            out.write("---\n" + res.to_text())


def _report_rows(report):
    return [("key", "value")] + [(k, v if not isinstance(v, float) else repr(v)) for k, v in report.to_flat().items()]


def cmd_allocate_batch(args, out, err):
    cohort = load_cohort(args.cohort, args.schema)
    config = StrategyConfig(
        args.strategy,
        weights=args.weights or {},
        biased_coin=args.p_b,
        size_weight=args.size_weight,
        budget=args.budget,
        seed=_seed(args),
    )
    alloc = allocate(cohort, config)
    write_assignment(alloc, cohort.ids, out)
    report = imbalance_report(cohort, alloc, args.order)
    buf = io.StringIO()
    _csv(_report_rows(report), buf)
    err.write(buf.getvalue())
    if args.report_out:
        with open(args.report_out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())


def cmd_allocate_sequential(args, out, inp):
    if args.strategy != "minimization":
        raise UsageError("sequential allocation supports --strategy minimization only")
    schema, bounds = load_schema(args.schema)
    factors = list(args.weights) if args.weights else [a.name for a in schema if a.is_discrete]
    levels = {}
    for name in factors:
        attr = next((a for a in schema if a.name == name), None)
        if attr is None or not attr.is_discrete:
            raise DataError(f"balancing factor {name!r} must be a binary or categorical attribute")
        if attr.kind == "binary":
            levels[name] = (0, 1)
        elif attr.levels:
            levels[name] = attr.levels
        else:
            raise DataError(f"categorical factor {name!r} needs declared levels")
    config = StrategyConfig("minimization", weights=args.weights or {}, biased_coin=args.p_b, size_weight=args.size_weight)
    state = MinimizationState(levels)
    rng = np.random.default_rng(_seed(args))
    index = {a.name: j for j, a in enumerate(schema)}
    seen = set()
    for row, line in enumerate(inp, start=1):
        line = line.rstrip("\r\n")
        unit = parse_record(line, schema, bounds, row)
        if unit.id in seen:
            raise DataError(f"duplicate id {unit.id!r}", row=row, column="id")
        seen.add(unit.id)
        profile = {f: unit.values[index[f]] for f in factors}
        out.write(minimization_allocate(state, profile, config, rng) + "\n")
        out.flush()


def cmd_report(args, out):
    cohort = load_cohort(args.cohort, args.schema)
    alloc = load_assignment(args.assignment)
    extra = set(alloc.assignment) - set(cohort.ids)
    if extra:
        raise DataError(f"assignment lists unknown ids {sorted(extra)[:5]}")
    _csv(_report_rows(imbalance_report(cohort, alloc, args.order)), out)


def _need(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} {args.model}: missing {', '.join(missing)}")


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balancelab", description="Comparability of randomized and balanced allocations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prob", help="probability that randomized arms are comparable")
    p.add_argument("model", choices=["binary", "rank", "continuous"])
    p.add_argument("--i", type=int)
    p.add_argument("--l", type=number)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=probability)
    p.add_argument("--absolute", action="store_true", help="continuous model: bound the total, not the mean difference")
    p.add_argument("--precision", type=int)

    p = sub.add_parser("samplesize", help="per-arm size at which the threshold covers k SDs")
    p.add_argument("model", choices=["binary", "rank", "continuous"])
    p.add_argument("--i", type=int)
    p.add_argument("--l", type=number)
    p.add_argument("--k", type=number)
    p.add_argument("--p", type=probability)

    p = sub.add_parser("pmf", help="full imbalance distribution as CSV")
    p.add_argument("model", choices=["binary", "rank"])
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=probability)

    p = sub.add_parser("joint", help="joint comparability of independent factors")
    p.add_argument("--q", type=probability, nargs="+", required=True)
    p.add_argument("--m", type=int, default=1, help="repeat the q list m times")
    p.add_argument("--complement", action="store_true", help="print 1 - product instead")
    p.add_argument("--precision", type=int)

    p = sub.add_parser("figure", help="n/i line and k*sd(D) curves as CSV")
    p.add_argument("--p", type=probability, nargs="+")
    p.add_argument("--i", type=int, default=10)
    p.add_argument("--k", type=number, default=3)
    p.add_argument("--n-max", type=int, default=1000)

    p = sub.add_parser("simulate", help="Monte Carlo replication campaign from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=seed_arg)
    p.add_argument("--reps", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=["csv", "text"], default="csv")

    p = sub.add_parser("allocate", help="allocate units to arms")
    mode = p.add_subparsers(dest="mode", required=True)
    for name in ("batch", "sequential"):
        q = mode.add_parser(name)
        if name == "batch":
            q.add_argument("--cohort", required=True)
            q.add_argument("--order", type=int, default=1, help="interaction order of the logged report")
            q.add_argument("--report-out")
            q.add_argument("--budget", type=int, default=1000)
        q.add_argument("--schema", required=True)
        q.add_argument("--strategy", choices=STRATEGIES, required=True)
        q.add_argument("--seed", type=seed_arg)
        q.add_argument("--weights", type=weights_arg)
        q.add_argument("--p-b", type=probability, default=1.0, help="biased-coin probability for minimization")
        q.add_argument("--size-weight", type=float, default=1.0)

    p = sub.add_parser("report", help="imbalance report for a cohort and assignment")
    p.add_argument("--cohort", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--order", type=int, default=1)
    return parser


def dispatch(argv, stdin=None, stdout=None, stderr=None) -> int:
    """Run one command; returns the exit status."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        old_out, old_err = sys.stdout, sys.stderr
        sys.stdout, sys.stderr = stdout, stderr
        try:
            args = parser.parse_args(argv)
        finally:
            sys.stdout, sys.stderr = old_out, old_err
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if getattr(args, "p", None) is not None and not isinstance(args.p, list):
        args.p_exact = Fraction(args.p).limit_denominator(10**12)
    try:
        if args.command == "prob":
            cmd_prob(args, stdout)
        elif args.command == "samplesize":
            cmd_samplesize(args, stdout)
        elif args.command == "pmf":
            cmd_pmf(args, stdout)
        elif args.command == "joint":
            cmd_joint(args, stdout)
        elif args.command == "figure":
            cmd_figure(args, stdout)
        elif args.command == "simulate":
            cmd_simulate(args, stdout)
        elif args.command == "allocate" and args.mode == "batch":
            cmd_allocate_batch(args, stdout, stderr)
        elif args.command == "allocate":
            cmd_allocate_sequential(args, stdout, stdin)
        elif args.command == "report":
            cmd_report(args, stdout)
    except UsageError as exc:
        parser.print_usage(stderr)
        print(f"balancelab: error: {exc}", file=stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"balancelab: data error: {exc}", file=stderr)
        return EXIT_DATA
    except DomainError as exc:
        print(f"balancelab: domain error: {exc}", file=stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
