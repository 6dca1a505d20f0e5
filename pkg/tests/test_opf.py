import dataclasses
import json

import numpy as np
import pytest

from bfmopf.caseio import load_case
from bfmopf.netmodel import INF, Bus, Network
from bfmopf.opf import (
    Objective, OPFError, OPFOptions, OPFSolveError, RelaxedSolution, build_opf_cr, check_exactness,
    relaxed_residuals, solution_to_json, solve_loadability, solve_opf_cr,
)
from bfmopf.oracle import relaxed_residuals_loop, sweep_power_flow

from conftest import load_bus, make_net, random_graph, random_radial

# two buses, z = 0.01 + 0.05i, load 0.5 + 0.2i pu; values from an mpmath sweep
TWO_BUS_LOSS_PU = 0.00299209038894109
TWO_BUS_L = 0.299209038894109
TWO_BUS_S01 = 0.502992090388941 + 0.214960451944705j
TWO_BUS_VMAG = 0.984490759986540


def two_bus():
    return make_net([(0, 1)], loads={1: (0.5, 0.2)}, rx=[(0.01, 0.05)])


def test_variable_count():
    prob = build_opf_cr(two_bus())
    assert prob.n_vars == 15
    assert prob.var_names[:3] == ["P[0]", "Q[0]", "l[0]"]
    assert build_opf_cr(two_bus(), "loadability").n_vars == 16


def test_leaf_balance_row():
    net = make_net([(0, 1), (1, 2)], loads={1: (0.1, 0.0), 2: (0.2, 0.1)})
    prob = build_opf_cr(net)
    row = prob.row_names.index("p_balance[2]")
    coeffs = {prob.var_names[j]: prob.A[row, j] for j in range(prob.n_vars) if prob.A[row, j] != 0}
    # p_2 = -(P_12 - r l_12) + g_2 v_2, with g_2 = 0 and p_2 = pg - pc
    assert coeffs == {"P[1]": -1.0, "l[1]": 0.01, "pg[2]": -1.0, "pc[2]": 1.0}
    assert prob.b[row] == 0.0


def test_two_bus_matches_sweep():
    net = two_bus()
    sol = solve_opf_cr(net)
    assert check_exactness(sol).exact
    assert sol.loss_mw / net.base_mva == pytest.approx(TWO_BUS_LOSS_PU, abs=1e-9)
    assert sol.l[0] == pytest.approx(TWO_BUS_L, abs=1e-8)
    assert sol.S[0] == pytest.approx(TWO_BUS_S01, abs=1e-8)
    assert np.sqrt(sol.v[1]) == pytest.approx(TWO_BUS_VMAG, abs=1e-9)
    sweep = sweep_power_flow(net, [0, -0.5 - 0.2j])
    assert sweep.converged
    assert sol.loss_mw / net.base_mva == pytest.approx((net.z[0] * abs(sweep.I[0]) ** 2).real, abs=1e-6)


def test_ieee14_loss():
    sol = solve_opf_cr(load_case("case14"))
    assert check_exactness(sol).exact
    assert sol.objective == pytest.approx(0.545, rel=0.05)


def test_inflated_current_flagged():
    sol = solve_opf_cr(load_case("case14"))
    bad = dataclasses.replace(sol, l=sol.l.copy(), raw_gap=None)
    bad.l[4] += 0.1
    rep = check_exactness(bad)
    assert not rep.exact and rep.offending == [4]
    assert rep.max_gap > 0.01


def test_zero_gap_boundary_is_exact():
    net = two_bus()
    one = np.ones(1)
    sol = RelaxedSolution(net, 3 * one, 4 * one, one.copy(), np.array([25.0, 20.0]), np.zeros(2), np.zeros(2),
                          np.zeros(2), np.zeros(2), 3.0, 4.0)
    assert sol.soc_gap[0] == 0.0
    for tol in (1e-300, 1e-12, 1e-6):
        assert check_exactness(sol, tol).exact


def test_objective_kinds():
    net = two_bus()
    cost = solve_opf_cr(net, Objective("gen_cost", c=(20.0, 0.0)))
    assert cost.objective == pytest.approx(20.0 * (0.5 + TWO_BUS_LOSS_PU), abs=1e-7)
    mix = solve_opf_cr(net, Objective("cvr_mix", c=(1.0, 0.0), alpha=(0.0, 2.0)))
    expected = 0.01 * TWO_BUS_L + (0.5 + TWO_BUS_LOSS_PU) + 2.0 * TWO_BUS_VMAG**2
    assert mix.objective == pytest.approx(expected, abs=1e-7)
    with pytest.raises(OPFError):
        Objective("cvr_mix", alpha=(-1.0, 0.0))
    with pytest.raises(OPFError):
        Objective("profit")


def test_loadability_binding_lower_voltage():
    net = two_bus()
    v1 = solve_opf_cr(net).v[1]
    bus = net.buses[1]
    tight = Network((net.buses[0], dataclasses.replace(bus, v_min=v1)), net.lines, net.base_mva)
    lam, sol = solve_loadability(tight)
    assert lam == pytest.approx(1.0, abs=1e-6)
    assert check_exactness(sol).exact


def test_loadability_binding_current_limit():
    net = two_bus()
    l0 = solve_opf_cr(net).l[0]
    line = dataclasses.replace(net.lines[0], i_max=float(np.sqrt(l0)))
    lam, sol = solve_loadability(Network(net.buses, (line,), net.base_mva))
    assert lam == pytest.approx(1.0, abs=1e-6)
    assert check_exactness(sol).exact


def test_loadability_zero_base_load():
    with pytest.raises(OPFError, match="nonzero base load"):
        build_opf_cr(make_net([(0, 1)]), "loadability")


def test_build_rejects_crossed_bounds():
    net = two_bus()
    bad = dataclasses.replace(net.buses[1], pg_min=1.0, pg_max=2.0)
    object.__setattr__(bad, "pg_min", 3.0)
    with pytest.raises(OPFError, match="infeasible bounds"):
        build_opf_cr(Network((net.buses[0], bad), net.lines, 100.0))


def test_infeasible_reports_binding_rows():
    net = two_bus()
    high = Network((net.buses[0], dataclasses.replace(net.buses[1], v_min=1.1)), net.lines, 100.0)
    with pytest.raises(OPFSolveError) as info:
        solve_opf_cr(high)
    assert info.value.status == "primal_infeasible"
    assert info.value.diagnostics


def _loop_check(sol, tol):
    res = relaxed_residuals_loop(sol.net, sol.P, sol.Q, sol.l, sol.v, sol.p, sol.q)
    assert res["p_balance"] <= tol and res["q_balance"] <= tol and res["voltage_drop"] <= tol
    return res


@pytest.mark.parametrize("case", ["case14", "case_ieee30", "case57", "case39"])
def test_equations_hold_independent_check(case):
    sol = solve_opf_cr(load_case(case))
    res = _loop_check(sol, 1e-7)
    own = relaxed_residuals(sol)
    for key in ("p_balance", "q_balance", "voltage_drop"):
        assert own[key] == pytest.approx(res[key], abs=1e-12)
    if check_exactness(sol).exact:
        assert res["cone_equality"] <= 1e-7


def test_solution_bounds(rng):
    for _ in range(5):
        sol = solve_opf_cr(random_radial(rng, 12))
        assert np.all(sol.l >= 0) and np.all(sol.v > 0)
        assert np.all(sol.soc_gap >= -1e-8)


def _five_bus(rng, gen_box, vbox):
    net = random_graph(rng, 5, int(rng.integers(0, 3)))
    buses = [net.buses[0]]
    for i in range(1, 5):
        bus = load_bus(i, rng.uniform(0, 0.1), rng.uniform(-0.02, 0.05), *vbox)
        if i == 2:
            bus = dataclasses.replace(bus, pg_min=0.0, pg_max=gen_box[0], qg_min=-gen_box[1], qg_max=gen_box[1])
        buses.append(bus)
    return Network(tuple(buses), net.lines, 100.0)


@pytest.mark.parametrize("seed", range(20))
def test_monotone_in_bound_boxes(seed):
    losses = []
    for gen_box, vbox in [((0.05, 0.02), (0.95, 1.05)), ((0.1, 0.05), (0.9, 1.1)), ((0.3, 0.2), (0.8, 1.2))]:
        try:
            losses.append(solve_opf_cr(_five_bus(np.random.default_rng(seed), gen_box, vbox)).objective)
        except OPFSolveError as exc:
            assert exc.status == "primal_infeasible"
            losses.append(np.inf)
    assert np.isfinite(losses[-1])
    # solver gap tolerance: 1e-8 pu = 1e-6 MW
    assert losses[1] <= losses[0] + 1e-6
    assert losses[2] <= losses[1] + 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_relaxed_load_upper_bounds_exact_on_trees(seed):
    rng = np.random.default_rng(1000 + seed)
    net = random_radial(rng, int(rng.integers(5, 25)), relax=False)
    sol = solve_opf_cr(net, "loss", OPFOptions(relax_load_ub=True))
    assert check_exactness(sol).exact
    _loop_check(sol, 1e-7)


def test_json_export():
    sol = solve_opf_cr(two_bus())
    data = json.loads(solution_to_json(sol))
    assert data["lambda"] is None
    assert data["objective"] == pytest.approx(TWO_BUS_LOSS_PU * 100, abs=1e-7)
    assert set(data["lines"][0]) == {"index", "from", "to", "P", "Q", "l", "gap"}
    assert set(data["buses"][1]) >= {"v", "pg", "qg", "pc", "qc"}
    _, lsol = solve_loadability(load_case("case14"))
    assert json.loads(solution_to_json(lsol))["lambda"] == pytest.approx(lsol.lam)


def test_polish_keeps_loss():
    net = load_case("case14")
    raw = solve_opf_cr(net, "loss", OPFOptions(polish=False))
    pol = solve_opf_cr(net)
    assert pol.polished and not raw.polished
    assert pol.objective == pytest.approx(raw.objective, rel=1e-5)
    assert np.max(np.abs(pol.soc_gap)) <= 1e-12
