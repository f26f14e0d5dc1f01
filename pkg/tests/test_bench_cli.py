import io
import json
import math

import numpy as np
import pytest

from dpcc import bench, cli
from dpcc.errors import DegenerateBase, OutOfRange
from dpcc.mechanisms import piq
from dpcc.noise import calibrate
from dpcc.problem import PrivacyParams, QuerySpec, solve_base
from dpcc.reform import FeasibilitySpec, solve_recourse

from conftest import random_small_program, two_var_toy

PRIV = PrivacyParams(epsilon=1.0, alpha=0.1)


def _cfg(case_paths, **kw):
    base = dict(case=case_paths["case3"], runs=2, oos_samples=200, mechanisms=("analytic", "scenario"))
    base.update(kw)
    return bench.BenchConfig(**base)


class TestViolation:
    def test_no_recourse_no_violation(self):
        prog = two_var_toy()
        z, _ = solve_base(prog)
        rec = solve_recourse(prog, QuerySpec.identity([0]), calibrate(PRIV, dim=1), FeasibilitySpec(0.1))
        frozen = type(rec)(z, np.zeros_like(rec.Z), rec.query, rec.noise, rec.feas, rec.var, 0.0, 0.0)
        assert bench.empirical_violation(frozen, prog, 5000, seed=1) == 0.0

    def test_reproducible(self):
        prog = two_var_toy()
        rec = piq(prog, [0], PRIV).recourse
        a = bench.empirical_violation(rec, prog, 2000, seed=7)
        assert a == bench.empirical_violation(rec, prog, 2000, seed=7)

    def test_matches_laplace_tail(self):
        # the bound row binds; its violation is the one-sided Laplace tail beyond f * std
        eta = 0.1
        prog = two_var_toy()
        rec = solve_recourse(prog, QuerySpec.identity([0]), calibrate(PRIV, dim=1), FeasibilitySpec(eta))
        f = math.sqrt(2.0 / (9.0 * eta))
        expected = 0.5 * math.exp(-f * math.sqrt(2.0))
        n = 10**4
        got = bench.empirical_violation(rec, prog, n, seed=3)
        assert abs(got - expected) <= 3 * math.sqrt(eta * (1 - eta) / n)


class TestLoss:
    def test_zero_for_base_point(self):
        prog = random_small_program(np.random.default_rng(4), quad=False)
        z, _ = solve_base(prog)
        rec = solve_recourse(prog, QuerySpec.identity([0]), calibrate(PRIV, dim=1), FeasibilitySpec(0.1))
        frozen = type(rec)(z, np.zeros_like(rec.Z), rec.query, rec.noise, rec.feas, rec.var, 0.0, float(prog.cost(z)))
        assert bench.optimality_loss(frozen, prog) == pytest.approx(0.0, abs=1e-9)

    def test_nonnegative(self):
        prog = two_var_toy()
        rec = piq(prog, [0], PRIV).recourse
        assert bench.optimality_loss(rec, prog) >= -1e-6

    def test_degenerate(self):
        prog = two_var_toy()
        rec = piq(prog, [0], PRIV).recourse
        with pytest.raises(DegenerateBase):
            bench.optimality_loss(rec, prog, base_cost=0.0)


class TestConfig:
    def test_roundtrip(self, case_paths):
        cfg = _cfg(case_paths, query_kind="sum", groups=2)
        assert bench.BenchConfig.from_json(json.dumps(cfg.to_dict())) == cfg

    @pytest.mark.parametrize(
        "bad", [dict(fraction=0.0), dict(runs=0), dict(oos_samples=0), dict(mechanisms=("magic",)), dict(phi=2.0)]
    )
    def test_rejects(self, case_paths, bad):
        with pytest.raises(OutOfRange):
            _cfg(case_paths, **bad)

    def test_unknown_key(self, case_paths):
        with pytest.raises(OutOfRange):
            bench.BenchConfig.from_dict({"case": case_paths["case3"], "colour": 1})

    def test_distribution(self, case_paths):
        assert _cfg(case_paths).distribution == "laplace"
        assert _cfg(case_paths, delta=1e-5).distribution == "gaussian"


class TestSelectQuery:
    def test_fraction_floor(self, case_paths):
        rng = np.random.default_rng(0)
        q = bench.select_query(_cfg(case_paths, fraction=0.3), 10, rng)
        assert q.p == 3
        assert bench.select_query(_cfg(case_paths, fraction=0.3), 2, rng).p == 1

    def test_groups_disjoint(self, case_paths):
        q = bench.select_query(_cfg(case_paths, query_kind="sum", groups=3, fraction=0.5), 20, np.random.default_rng(1))
        flat = [i for g in q.groups for i in g]
        assert q.p == 3 and len(flat) == 10 == len(set(flat))

    def test_too_many_groups(self, case_paths):
        with pytest.raises(OutOfRange):
            bench.select_query(_cfg(case_paths, query_kind="sum", groups=5), 3, np.random.default_rng(0))


class TestRunBench:
    def test_csv_reproducible(self, case_paths):
        cfg = _cfg(case_paths)
        a = bench.write_csv(bench.run_bench(cfg))
        b = bench.write_csv(bench.run_bench(cfg))
        assert a == b
        assert a.splitlines()[0] == ",".join(bench.CSV_HEADER)

    def test_means_of_runs(self, case_paths):
        rows = bench.run_bench(_cfg(case_paths, runs=3))
        for row in rows:
            assert row.violation_mean == pytest.approx(np.mean(row.violations), abs=1e-12)
            assert row.loss_mean == pytest.approx(np.mean(row.losses), abs=1e-12)
            assert row.violation_std == pytest.approx(np.std(row.violations, ddof=1), abs=1e-12)

    def test_labels(self, case_paths):
        rows = bench.run_bench(_cfg(case_paths, runs=1, query_kind="sum", groups=1, fraction=0.5))
        assert [r.mechanism for r in rows] == ["PSQ-a", "PSQ-s"]

    def test_op_column(self, case_paths):
        rows = bench.run_bench(_cfg(case_paths, runs=1, oos_samples=20, mechanisms=("op",)))
        assert rows[0].mechanism == "OP" and rows[0].failed == 0
        assert 0.0 <= rows[0].violation_mean <= 100.0

    def test_csv_format(self, case_paths):
        rows = bench.run_bench(_cfg(case_paths, runs=2))
        lines = bench.write_csv(rows).splitlines()
        scopes = [ln.split(",")[0] for ln in lines[1:]]
        assert scopes.count("run") == 4 and scopes.count("all") == 2
        assert bench.fmt(1 / 3) == "0.333333"
        short = bench.write_csv(rows, per_run=False).splitlines()
        assert len(short) == 3

    def test_write_to_handle(self, case_paths):
        rows = bench.run_bench(_cfg(case_paths, runs=1))
        buf = io.StringIO()
        bench.write_csv(rows, buf)
        assert buf.getvalue() == bench.write_csv(rows)


def _run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestCLI:
    def test_check(self, case_paths, capsys):
        code, out, _ = _run(["check", "--case", case_paths["case3"], "--query", "identity:0"], capsys)
        assert code == 0 and "implementable: true" in out

    def test_missing_case(self, capsys):
        code, _, err = _run(["check"], capsys)
        assert code == 2
        assert json.loads(err.strip().splitlines()[-1])["error"] == "usage"

    def test_unknown_command(self, capsys):
        assert _run(["frobnicate"], capsys)[0] == 2

    def test_bad_privacy(self, case_paths, capsys):
        code, _, err = _run(["release", "--case", case_paths["case3"], "--query", "identity:0", "--epsilon", "0"], capsys)
        assert code == 1
        assert json.loads(err.strip())["error"] == "invalid_privacy"

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = _run(["solve", "--case", str(tmp_path / "none.m")], capsys)
        assert code == 1 and "error" in json.loads(err.strip())

    def test_solve(self, case_paths, capsys):
        code, out, _ = _run(["solve", "--case", case_paths["case3"]], capsys)
        rec = json.loads(out)
        assert code == 0 and rec["status"] == "optimal"
        assert sum(rec["supplies"]) == pytest.approx(3.15, abs=1e-6)

    def test_release_record(self, case_paths, capsys):
        argv = ["release", "--case", case_paths["case3"], "--query", "identity:1", "--seed", "5"]
        code, out, _ = _run(argv, capsys)
        rec = json.loads(out)
        assert code == 0 and rec["mechanism"] == "piq" and rec["query"] == [[1]]
        assert _run(argv, capsys)[1] == out

    def test_release_kind_mismatch(self, case_paths, capsys):
        code, _, err = _run(["release", "--case", case_paths["case3"], "--query", "identity:1", "--mechanism", "psq"], capsys)
        assert code == 1 and json.loads(err)["error"] == "out_of_range"

    def test_pareto_rows(self, case_paths, capsys):
        code, out, _ = _run(["pareto", "--case", case_paths["case3"], "--query", "identity:0"], capsys)
        lines = out.strip().splitlines()
        assert code == 0 and len(lines) == 12
        assert lines[0] == ",".join(bench.FRONTIER_HEADER)

    def test_bench_config_file(self, case_paths, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"case": case_paths["case3"], "runs": 1, "oos_samples": 50, "mechanisms": ["analytic"]}))
        out = tmp_path / "out.csv"
        code, _, _ = _run(["bench", "--case", case_paths["case3"], "--config", str(cfg), "--out", str(out)], capsys)
        assert code == 0
        assert out.read_text().splitlines()[-1].startswith("all,")

    def test_parse_query(self):
        assert cli.parse_query("identity:0.3") == {"query_kind": "identity", "fraction": 0.3}
        assert cli.parse_query("identity:0,2") == {"query_kind": "identity", "indices": (0, 2)}
        assert cli.parse_query("sum:4") == {"query_kind": "sum", "groups": 4}
        assert cli.parse_query("sum:0,1/2") == {"query_kind": "sum", "group_indices": ((0, 1), (2,))}
        with pytest.raises(OutOfRange):
            cli.parse_query("max:1")

    def test_parse_phi(self):
        assert cli.parse_phi("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert cli.parse_phi("0.1,0.9") == [0.1, 0.9]
        with pytest.raises(OutOfRange):
            cli.parse_phi("0:1:0")
