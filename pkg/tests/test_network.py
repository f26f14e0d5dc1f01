import json
import logging

import numpy as np
import pytest

from dpcc import fixture_path
from dpcc.errors import ConnectivityError, ParseError
from dpcc.network import (
    build_program,
    case_from_dict,
    case_to_dict,
    case_to_json,
    flows,
    incidence,
    laplacian,
    load_case,
    parse_case,
    random_instance,
    sensitivity_probe,
)
from dpcc.problem import solve_base, validate_program
from dpcc.solver import Status

HAND = """
function mpc = hand3
mpc.baseMVA = 100;
mpc.bus = [
  7  3  50  0;
  8  1  20  0;
  9  1  30  0;
];
mpc.gen = [
  7  0 0 0 0 1 100 1  150  10;
  9  0 0 0 0 1 100 1   80   0;
];
mpc.branch = [
  7  8  0  0.5   0  40  0 0 0 0 1;
  8  9  0  0.25  0   0  0 0 0 0 1;
  9  7  0  0.2   0   0  0 0 0 0 1;
];
mpc.gencost = [
  2  0  0  3  0.01  12  0;
  2  0  0  3  0.02  20  0;
];
"""

CASES = ["case3.m", "case5.m", "case14.m", "case57.m"]


def triangle(beta=(1.0, 1.0, 1.0), **kw):
    data = dict(
        n_nodes=3,
        from_node=[0, 1, 2],
        to_node=[1, 2, 0],
        beta=list(beta),
        p_min=[0, 0, 0],
        p_max=[5, 5, 5],
        f_min=[-np.inf] * 3,
        f_max=[np.inf] * 3,
        c1=[1.0, 2.0, 3.0],
        c2=[0.0, 0.0, 0.0],
        demand=[0.5, 0.4, 0.3],
    )
    data.update(kw)
    return case_from_dict(data)


class TestParse:
    def test_hand_fixture(self):
        c = parse_case(HAND, name="hand3")
        assert c.n_nodes == 3 and c.n_edges == 3
        assert c.bus_ids == (7, 8, 9)
        np.testing.assert_allclose(c.demand, [0.5, 0.2, 0.3])
        np.testing.assert_allclose(c.p_max, [1.5, 0.0, 0.8])
        np.testing.assert_allclose(c.p_min, [0.1, 0.0, 0.0])
        np.testing.assert_allclose(c.beta, [2.0, 4.0, 5.0])
        np.testing.assert_allclose(c.f_max, [0.4, np.inf, np.inf])
        np.testing.assert_allclose(c.c1, [1200.0, 0.0, 2000.0])
        np.testing.assert_allclose(c.c2, [100.0, 0.0, 200.0])
        np.testing.assert_array_equal(c.supply_nodes, [0, 2])

    def test_zero_reactance(self):
        bad = HAND.replace("8  9  0  0.25", "8  9  0  0")
        with pytest.raises(ParseError) as info:
            parse_case(bad)
        line = 1 + bad[: bad.index("8  9  0  0")].count("\n")
        assert info.value.field == "x" and info.value.line == line

    def test_unknown_bus(self):
        with pytest.raises(ParseError, match="unknown bus"):
            parse_case(HAND.replace("9  7  0  0.2", "9  4  0  0.2"))

    def test_missing_table(self):
        with pytest.raises(ParseError, match="mpc.branch"):
            parse_case("mpc.bus = [1 3 0 0;];\nmpc.gen = [1 0 0 0 0 1 100 1 10 0;];")

    def test_non_numeric(self):
        with pytest.raises(ParseError, match="non-numeric"):
            parse_case(HAND.replace("0.01  12", "0.01  abc"))

    def test_disconnected(self):
        with pytest.raises(ConnectivityError):
            triangle().with_values(n_nodes=4, p_min=[0] * 4, p_max=[1] * 4, c1=[1] * 4, c2=[0] * 4, demand=[0] * 4)

    def test_json_roundtrip(self, tmp_path):
        c = load_case(fixture_path("case5.m"))
        text = case_to_json(c)
        back = parse_case(text, "json")
        assert case_to_json(back) == text
        path = tmp_path / "c.json"
        path.write_text(text)
        assert case_to_dict(load_case(str(path))) == case_to_dict(c)

    def test_bad_json(self):
        with pytest.raises(ParseError):
            parse_case("{not json", "json")
        with pytest.raises(ParseError, match="missing case field"):
            parse_case(json.dumps({"n_nodes": 1}), "json")

    def test_relabeling(self):
        # swapping the order of bus rows permutes node data and nothing else
        lines = HAND.split("\n")
        i = lines.index("  7  3  50  0;")
        lines[i], lines[i + 2] = lines[i + 2], lines[i]
        a, b = parse_case(HAND), parse_case("\n".join(lines))
        perm = [b.bus_ids.index(k) for k in a.bus_ids]
        for f in ("demand", "p_max", "p_min", "c1", "c2"):
            np.testing.assert_allclose(getattr(b, f)[perm], getattr(a, f))
        np.testing.assert_allclose(a.beta, b.beta)
        np.testing.assert_allclose(np.sort(laplacian(a).toarray().ravel()), np.sort(laplacian(b).toarray().ravel()))

    @pytest.mark.parametrize("name", CASES)
    def test_bundled(self, name):
        c = load_case(fixture_path(name))
        assert c.n_nodes == int(name[4:-2])
        assert validate_program(build_program(c).program).valid


class TestLaplacian:
    def test_triangle(self):
        np.testing.assert_array_equal(laplacian(triangle()).toarray(), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    @pytest.mark.parametrize("name", CASES)
    def test_rows_and_rank(self, name):
        c = load_case(fixture_path(name))
        B = laplacian(c).toarray()
        np.testing.assert_allclose(B @ np.ones(c.n_nodes), 0.0, atol=1e-9)
        assert np.linalg.matrix_rank(B) == c.n_nodes - 1

    @pytest.mark.parametrize("name", CASES)
    def test_flow_reconstruction(self, name):
        c = load_case(fixture_path(name))
        theta = np.random.default_rng(0).normal(size=c.n_nodes)
        f = flows(c, theta)
        net = np.zeros(c.n_nodes)
        np.add.at(net, c.from_node, f)
        np.add.at(net, c.to_node, -f)
        np.testing.assert_allclose(laplacian(c) @ theta, net, atol=1e-9)
        np.testing.assert_allclose(incidence(c).sum(axis=1), 0.0)


class TestProgram:
    @pytest.mark.parametrize("name", CASES)
    def test_balance(self, name):
        alloc = build_program(random_instance(load_case(fixture_path(name)), 0))
        z, sol = solve_base(alloc.program)
        assert sol.status is Status.OPTIMAL
        assert alloc.supplies(z).sum() == pytest.approx(alloc.case.demand.sum(), abs=1e-7)
        assert z[alloc.theta_vars[alloc.reference]] == pytest.approx(0.0, abs=1e-9)

    def test_cheapest_node_takes_all(self):
        alloc = build_program(triangle(c1=[3.0, 1.0, 2.0]))
        z, sol = solve_base(alloc.program)
        # vertex oracle: with ample limits the only cost-minimal vertex loads node 1
        best = min(range(3), key=lambda k: [3.0, 1.0, 2.0][k])
        expect = np.zeros(3)
        expect[best] = 1.2
        np.testing.assert_allclose(alloc.supplies(z), expect, atol=1e-7)

    def test_infeasible_demand(self):
        alloc = build_program(triangle(demand=[6.0, 6.0, 6.0]))
        _, sol = solve_base(alloc.program)
        assert sol.status is Status.INFEASIBLE

    def test_flow_limits_respected(self, case3):
        alloc = build_program(case3)
        z, _ = solve_base(alloc.program)
        f = flows(case3, z[alloc.theta_vars])
        assert np.all(np.abs(f) <= np.where(np.isfinite(case3.f_max), case3.f_max, np.inf) + 1e-8)


class TestRandomInstance:
    def test_ranges_and_determinism(self, case3):
        a, b = random_instance(case3, 5), random_instance(case3, 5)
        assert case_to_dict(a) == case_to_dict(b)
        assert np.all((a.c1 >= 1) & (a.c1 <= 3))
        assert np.all((a.c2 >= 0.1) & (a.c2 <= 0.3))
        assert np.all((a.demand >= 0.5) & (a.demand <= 1))
        np.testing.assert_array_equal(a.beta, case3.beta)

    def test_demand_mean(self):
        top = load_case(fixture_path("case57.m"))
        d = np.concatenate([random_instance(top, s).demand for s in range(176)])
        assert d.size >= 10**4
        se = np.sqrt(1 / 48 / d.size)
        assert abs(d.mean() - 0.75) <= 3 * se


class TestProbe:
    def test_zero_alpha(self, case3):
        assert sensitivity_probe(case3, 0.0, trials=5).max_change <= 1e-9

    def test_interior_optimum(self):
        # quadratic costs and loose limits: no redispatch beyond alpha
        c = triangle(c2=[1.0, 1.5, 2.0])
        res = sensitivity_probe(c, 0.1, trials=100, seed=1)
        assert res.max_change <= 0.1 + 1e-6 and not res.exceedances

    def test_exceedance_reported(self, caplog):
        c = load_case(fixture_path("case5.m"))
        with caplog.at_level(logging.WARNING, logger="dpcc.network"):
            res = sensitivity_probe(c, 0.1, trials=10, seed=0)
        assert res.exceedances
        assert len(caplog.records) == len(res.exceedances)
        assert all(e["change"] > 0.1 + 1e-6 for e in res.exceedances)
