import io
import subprocess
import sys

import pytest

from balancelab.cli import dispatch, format_probability

from .test_io import SCHEMA, TABLE

SIM = """\
population:
  n: 12
  factors:
    - {name: x, kind: binary, p: 0.5}
    - {name: h, kind: numeric, mean: 170, sd: 10}
    - {name: r, kind: ordinal}
strategies:
  - complete-random
  - {kind: minimization, weights: {x: 1}}
  - {kind: systematic, weights: {x: 1, h: 1}}
thresholds:
  x: {i: 5}
  h: {l: 0.5}
  r: {i: 3}
replications: 60
seed: 4
"""


def run(*argv, stdin=""):
    out, err = io.StringIO(), io.StringIO()
    code = dispatch(list(argv), stdin=io.StringIO(stdin), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def data(tmp_path):
    (tmp_path / "schema.yaml").write_text(SCHEMA)
    (tmp_path / "cohort.csv").write_text(TABLE)
    (tmp_path / "sim.yaml").write_text(SIM)
    return tmp_path


def test_documented_examples():
    assert run("prob", "binary", "--i", "5", "--n", "25", "--p", "0.5") == (0, "0.88\n", "")
    assert run("samplesize", "continuous", "--l", "1", "--k", "3")[1] == "18\n"
    assert run("samplesize", "continuous", "--l", "1/8", "--k", "3")[1] == "1152\n"


def test_joint_printing():
    # a literal 0.66 is a rounded q; its tenth power rounds to 0.016
    assert run("joint", "--q", "0.66", "--m", "10")[1] == "0.016\n"
    assert run("joint", "--q", "0.65625", "--m", "10")[1] == "0.015\n"
    assert run("joint", "--q", "0.9", "0.8")[1] == "0.72\n"


def test_precision_flag():
    assert run("prob", "binary", "--i", "5", "--n", "25", "--p", "1/2", "--precision", "6")[1] == "0.881080\n"


@pytest.mark.parametrize(
    "x,text",
    [(0.8810795, "0.88"), (0.0148147, "0.015"), (0.99979371, "0.99979"), (0.898113, "0.90"), (1.0, "1.00"), (0.5, "0.50")],
)
def test_format_probability(x, text):
    assert format_probability(x) == text


def test_pmf_csv():
    code, out, _ = run("pmf", "binary", "--n", "2", "--p", "0.5")
    lines = out.splitlines()
    assert lines[0] == "d,probability"
    assert len(lines) == 6
    code, out, _ = run("pmf", "rank", "--n", "3")
    assert out.splitlines()[1].startswith("-9,")


def test_figure_csv():
    code, out, _ = run("figure", "--p", "0.5", "--i", "10", "--k", "3", "--n-max", "450")
    rows = [r.split(",") for r in out.splitlines()[1:]]
    assert len(rows) == 450
    n, line, curve = rows[-1]
    assert float(line) == pytest.approx(45.0)
    assert float(curve) == pytest.approx(45.0)


@pytest.mark.parametrize(
    "argv,code",
    [
        (["bogus"], 2),
        (["prob", "binary", "--wat"], 2),
        (["prob", "binary", "--i", "5"], 2),
        ([], 2),
        (["prob", "binary", "--i", "5", "--n", "0", "--p", "0.5"], 4),
        (["prob", "binary", "--i", "5", "--n", "5", "--p", "1.5"], 4),
        (["samplesize", "continuous", "--l", "0", "--k", "3"], 4),
        (["report", "--cohort", "x.csv", "--schema", "x.yaml", "--assignment", "a.csv"], 3),
    ],
)
def test_exit_codes(argv, code):
    got, out, err = run(*argv)
    assert got == code
    assert err


def test_usage_on_stderr():
    code, out, err = run("nope")
    assert out == ""
    assert "usage" in err


def test_bad_value_exit_3(data):
    (data / "bad.csv").write_text("id,gender,height,marital,age,income,academic\nT1,1,17O,1,34,50000,1\n")
    code, _, err = run("allocate", "batch", "--cohort", str(data / "bad.csv"), "--schema", str(data / "schema.yaml"), "--strategy", "complete-random")
    assert code == 3
    assert "row 2" in err and "height" in err


@pytest.mark.parametrize("strategy", ["complete-random", "matched-pairs", "minimization", "systematic"])
def test_allocate_report_round_trip(data, strategy):
    argv = ["allocate", "batch", "--cohort", str(data / "cohort.csv"), "--schema", str(data / "schema.yaml")]
    argv += ["--strategy", strategy, "--seed", "7", "--order", "2", "--report-out", str(data / "logged.csv")]
    code, out, err = run(*argv)
    assert code == 0
    assert out.splitlines()[0] == "id,arm"
    assert sorted(line.split(",")[1] for line in out.splitlines()[1:]) == ["C", "C", "T", "T"]
    assert err == (data / "logged.csv").read_text()
    (data / "asg.csv").write_text(out)
    code, report, _ = run("report", "--cohort", str(data / "cohort.csv"), "--schema", str(data / "schema.yaml"), "--assignment", str(data / "asg.csv"), "--order", "2")
    assert code == 0
    assert report == err
    assert run(*argv)[1] == out


def test_seed_from_environment(data, monkeypatch):
    argv = ["allocate", "batch", "--cohort", str(data / "cohort.csv"), "--schema", str(data / "schema.yaml"), "--strategy", "complete-random"]
    outs = set()
    for seed in range(8):
        monkeypatch.setenv("BALANCELAB_SEED", str(seed))
        a = run(*argv)[1]
        assert a == run(*argv, "--seed", str(seed))[1]
        outs.add(a)
    assert len(outs) > 1
    monkeypatch.setenv("BALANCELAB_SEED", "3")
    assert run(*argv, "--seed", "5")[1] == run(*argv[:-2], "--strategy", "complete-random", "--seed", "5")[1]
    monkeypatch.setenv("BALANCELAB_SEED", "abc")
    assert run(*argv)[0] == 2


def test_sequential_one_line_per_record(data):
    records = "".join(f"u{k},{1 + k % 2},170,{k % 3},40,1000,{k % 2}\n" for k in range(9))
    code, out, _ = run("allocate", "sequential", "--schema", str(data / "schema.yaml"), "--strategy", "minimization", "--seed", "1", stdin=records)
    assert code == 0
    arms = out.splitlines()
    assert len(arms) == 9
    assert set(arms) <= {"T", "C"}
    assert abs(arms.count("T") - arms.count("C")) <= 1


def test_sequential_flushes_each_line(data):
    proc = subprocess.Popen(
        [sys.executable, "-m", "balancelab", "allocate", "sequential", "--schema", str(data / "schema.yaml"), "--strategy", "minimization", "--seed", "2"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        text=True,
    )
    for k in range(3):
        proc.stdin.write(f"u{k},1,170,0,40,1000,1\n")
        proc.stdin.flush()
        assert proc.stdout.readline().strip() in ("T", "C")
    proc.stdin.close()
    assert proc.wait(timeout=30) == 0


def test_sequential_rejects_other_strategies(data):
    code, _, _ = run("allocate", "sequential", "--schema", str(data / "schema.yaml"), "--strategy", "systematic", stdin="")
    assert code == 2


def test_simulate_formats(data):
    code, out, _ = run("simulate", "--config", str(data / "sim.yaml"))
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "strategy,factor,replications,seed,q_hat,se,mean_abs,mean_signed"
    assert len(lines) == 1 + 3 * 4
    code, text, _ = run("simulate", "--config", str(data / "sim.yaml"), "--format", "text", "--reps", "10", "--seed", "1")
    assert code == 0
    assert "replications: 10" in text


def test_simulate_jobs_invariant(data):
    base = run("simulate", "--config", str(data / "sim.yaml"))[1]
    assert run("simulate", "--config", str(data / "sim.yaml"), "--jobs", "3")[1] == base
    assert run("simulate", "--config", str(data / "sim.yaml"), "--seed", "5")[1] != base
