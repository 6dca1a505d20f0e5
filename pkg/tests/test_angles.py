import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bfmopf.angles import (
    AngleError, BetaVector, compute_beta, inverse_project, recover, recover_centralized, recover_distributed,
    recovery_to_json, verify_branch_flow, wrap_angle,
)
from bfmopf.caseio import load_case
from bfmopf.netmodel import Line, Network, incidence_matrix, spanning_tree, tree_from_lines
from bfmopf.opf import check_exactness, solve_opf_cr
from bfmopf.oracle import brute_force_recovery

from conftest import make_net, random_graph, random_radial, random_tree, synthetic_solution

ATAN_01 = 0.0996686524911620  # atan(0.1), mpmath
TWO_BUS_ANGLE = 0.0233644577244733  # angle(V0) - angle(V1), mpmath sweep


def test_wrap_angle():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.5 + 4 * math.pi) == pytest.approx(0.5)
    out = wrap_angle(np.array([-math.pi, -3.0, 7.0]))
    assert np.all(out > -math.pi) and np.all(out <= math.pi)


def test_beta_zero_flow():
    net = make_net([(0, 1)])
    sol = synthetic_solution(net, [0.0])
    assert sol.P[0] == 0.0 and sol.Q[0] == 0.0
    assert compute_beta(sol).beta[0] == 0.0


def test_beta_reactive_line():
    net = Network(make_net([(0, 1)]).buses, (Line(0, 1, 0.0, 0.1),))
    sol = synthetic_solution(net, [0.0])
    sol.P[:] = 1.0
    sol.l[:] = 1.0
    # conj(z) = -0.1i, so v - conj(z) S = 1 + 0.1i
    assert compute_beta(sol).beta[0] == pytest.approx(ATAN_01, abs=1e-15)


def test_beta_two_bus_matches_sweep_angle():
    net = make_net([(0, 1)], loads={1: (0.5, 0.2)}, rx=[(0.01, 0.05)])
    sol = solve_opf_cr(net)
    assert compute_beta(sol).beta[0] == pytest.approx(TWO_BUS_ANGLE, abs=1e-9)


def test_degenerate_line():
    net = make_net([(0, 1)])
    sol = synthetic_solution(net, [0.0])
    sol.v[:] = 0.05
    # v - conj(z) S = 0 exactly at this flow
    S = 0.05 / np.conj(net.z[0])
    sol.P[:], sol.Q[:] = S.real, S.imag
    with pytest.raises(AngleError, match="degenerate"):
        compute_beta(sol)


def test_path_recovery(path2):
    tree = spanning_tree(path2)
    rep = recover_centralized(BetaVector(np.array([0.1, 0.2]), tree), incidence_matrix(path2, tree))
    assert rep.recovered
    np.testing.assert_allclose(rep.theta, [-0.1, -0.3], atol=1e-15)


def test_triangle_recovered(triangle):
    tree = tree_from_lines(triangle, [0, 1])
    rep = recover_centralized(BetaVector(np.array([0.1, 0.2, 0.3]), tree), incidence_matrix(triangle, tree))
    assert rep.recovered
    np.testing.assert_allclose(rep.theta, [-0.1, -0.3], atol=1e-15)
    assert rep.mismatches[0] == pytest.approx(0.0, abs=1e-15)


def test_triangle_failed(triangle):
    tree = tree_from_lines(triangle, [0, 1])
    rep = recover_centralized(BetaVector(np.array([0.1, 0.2, 0.4]), tree), incidence_matrix(triangle, tree))
    assert not rep.recovered and rep.theta is None
    assert rep.offending == [2]
    assert rep.mismatches[0] == pytest.approx(0.1, abs=1e-14)


def test_triangle_distributed_failure(triangle):
    sol = synthetic_solution(triangle, [0.1, 0.2, 0.4])
    tree = tree_from_lines(triangle, [0, 1])
    rep = recover_distributed(sol, triangle, tree)
    assert rep.verdict == "failed" and rep.offending == [2]
    assert rep.mismatches[0] == pytest.approx(0.1, abs=1e-12)


def test_mismatch_warning_band(triangle, caplog):
    tree = tree_from_lines(triangle, [0, 1])
    mats = incidence_matrix(triangle, tree)
    with caplog.at_level(logging.WARNING, logger="bfmopf.angles"):
        rep = recover_centralized(BetaVector(np.array([0.1, 0.2, 0.3 + 5e-6]), tree), mats)
    assert not rep.recovered
    assert "slightly above" in caplog.text


def _radial_solutions(rng, count, lo=3, hi=20):
    for _ in range(count):
        yield solve_opf_cr(random_radial(rng, int(rng.integers(lo, hi))))


def test_distributed_matches_centralized_radial(rng):
    for sol in _radial_solutions(rng, 10):
        tree = spanning_tree(sol.net)
        beta = compute_beta(sol, tree=tree)
        a = recover_centralized(beta, incidence_matrix(sol.net, tree))
        b = recover_distributed(sol, sol.net, tree)
        assert a.recovered and b.recovered
        assert np.array_equal(a.theta, b.theta)


@pytest.mark.parametrize("seed", range(10))
def test_distributed_matches_centralized_mesh(seed):
    rng = np.random.default_rng(seed)
    net = random_graph(rng, int(rng.integers(3, 10)), int(rng.integers(1, 4)))
    theta = rng.uniform(-0.3, 0.3, net.n)
    tree = random_tree(net, rng)
    mats = incidence_matrix(net, tree)
    for beta in (wrap_angle(_line_incidence(net) @ theta), rng.uniform(-0.5, 0.5, net.m)):
        sol = synthetic_solution(net, beta)
        bv = BetaVector(beta, tree)
        a = recover_centralized(bv, mats)
        b = recover_distributed(sol, net, tree)
        assert a.verdict == b.verdict
        np.testing.assert_allclose(a.mismatches, b.mismatches, atol=1e-12)
        if a.recovered:
            np.testing.assert_allclose(a.theta, b.theta, atol=1e-12)
            np.testing.assert_allclose(a.theta, wrap_angle(theta), atol=1e-12)


def _line_incidence(net):
    Bline = np.zeros((net.m, net.n))
    for e, ln in enumerate(net.lines):
        if ln.from_bus:
            Bline[e, ln.from_bus - 1] += 1
        if ln.to_bus:
            Bline[e, ln.to_bus - 1] -= 1
    return Bline


@pytest.mark.parametrize("seed", range(8))
def test_verdict_independent_of_tree(seed):
    rng = np.random.default_rng(50 + seed)
    net = random_graph(rng, int(rng.integers(4, 12)), int(rng.integers(1, 5)))
    Bline = _line_incidence(net)
    recoverable = wrap_angle(Bline @ rng.uniform(-2, 2, net.n))
    for beta in (recoverable, rng.uniform(-np.pi, np.pi, net.m)):
        verdicts, thetas = set(), []
        for _ in range(5):
            tree = random_tree(net, rng)
            rep = recover_centralized(BetaVector(beta, tree), incidence_matrix(net, tree))
            verdicts.add(rep.verdict)
            if rep.recovered:
                thetas.append(rep.theta)
        assert len(verdicts) == 1
        for th in thetas[1:]:
            np.testing.assert_allclose(wrap_angle(th - thetas[0]), 0.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(-3, 3), recoverable=st.booleans())
def test_two_pi_shift_invariance(seed, k, recoverable):
    rng = np.random.default_rng(seed)
    net = random_graph(rng, int(rng.integers(3, 10)), int(rng.integers(0, 4)))
    tree = spanning_tree(net)
    mats = incidence_matrix(net, tree)
    beta = (wrap_angle(_line_incidence(net) @ rng.uniform(-2, 2, net.n)) if recoverable
            else rng.uniform(-np.pi, np.pi, net.m))
    e = int(rng.integers(net.m))
    shifted = beta.copy()
    shifted[e] += 2 * np.pi * k
    a = recover_centralized(BetaVector(beta, tree), mats)
    b = recover_centralized(BetaVector(shifted, tree), mats)
    assert a.verdict == b.verdict
    np.testing.assert_allclose(wrap_angle(a.mismatches - b.mismatches), 0.0, atol=1e-12)
    if a.recovered:
        np.testing.assert_allclose(wrap_angle(a.theta - b.theta), 0.0, atol=1e-12)
    if recoverable:
        assert a.recovered


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_matrix_verdict_matches_cycle_enumeration(seed):
    rng = np.random.default_rng(seed)
    net = random_graph(rng, int(rng.integers(2, 9)), int(rng.integers(0, 4)))
    tree = random_tree(net, rng)
    Bline = _line_incidence(net)
    beta = wrap_angle(Bline @ rng.uniform(-3, 3, net.n))
    if rng.random() < 0.5:
        beta[int(rng.integers(net.m))] += rng.choice([-1, 1]) * rng.uniform(1e-3, 1.0)
    rep = recover_centralized(BetaVector(beta, tree), incidence_matrix(net, tree))
    brute = brute_force_recovery(beta, net)
    assert rep.recovered == brute.recoverable


def test_ieee14_fails_recovery():
    sol = solve_opf_cr(load_case("case14"))
    assert check_exactness(sol).exact
    beta, rep = recover(sol)
    assert not beta.advisory
    assert not rep.recovered
    assert len(rep.links) == 7
    dist = recover_distributed(sol)
    assert dist.verdict == "failed"
    assert sorted(dist.offending) == sorted(rep.offending)


def test_advisory_beta_from_inexact_point(caplog):
    net = make_net([(0, 1)], loads={1: (0.5, 0.2)}, rx=[(0.01, 0.05)])
    sol = solve_opf_cr(net)
    sol.l = sol.l + 0.5
    sol.raw_gap = None
    with caplog.at_level(logging.WARNING, logger="bfmopf.angles"):
        assert compute_beta(sol).advisory
    assert "inexact" in caplog.text


def test_inverse_project_zero_angles():
    net = make_net([(0, 1), (1, 2)])
    sol = synthetic_solution(net, [0.05, -0.02], v=[1.0, 0.95, 0.9])
    x = inverse_project(sol, np.zeros(2))
    np.testing.assert_array_equal(x.V, np.sqrt(sol.v).astype(complex))
    np.testing.assert_allclose(x.I, np.sqrt(sol.l) * np.exp(-1j * np.angle(sol.S)), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_projection_identity(seed):
    rng = np.random.default_rng(seed)
    net = random_graph(rng, int(rng.integers(2, 10)), int(rng.integers(0, 4)))
    sol = synthetic_solution(net, rng.uniform(-0.5, 0.5, net.m), v=rng.uniform(0.8, 1.2, len(net.buses)))
    sol.p0, sol.q0 = rng.normal(), rng.normal()
    x = inverse_project(sol, rng.uniform(-np.pi, np.pi, net.n))
    S, l, v, s0 = x.projection()
    np.testing.assert_array_equal(S, sol.S)
    np.testing.assert_allclose(l, sol.l, rtol=1e-14)
    np.testing.assert_allclose(v, sol.v, rtol=1e-14)
    assert s0 == complex(sol.p0, sol.q0)


def test_inverse_project_length_check():
    net = make_net([(0, 1)])
    with pytest.raises(AngleError):
        inverse_project(synthetic_solution(net, [0.0]), np.zeros(3))


def test_radial_pipeline_residuals(rng):
    for sol in _radial_solutions(rng, 15, 2, 40):
        beta, rep = recover(sol)
        assert rep.recovered
        res = verify_branch_flow(inverse_project(sol, rep.theta))
        assert res.ok(1e-8), res


@pytest.mark.parametrize("case", ["case14", "case_ieee30"])
def test_tapped_case_residuals_with_recovered_angles(case):
    # recovery fails on these meshes, but the tree angles still satisfy Ohm's law on tree lines
    sol = solve_opf_cr(load_case(case))
    tree = spanning_tree(sol.net)
    beta = compute_beta(sol, tree=tree)
    rep = recover_centralized(beta, incidence_matrix(sol.net, tree))
    x = inverse_project(sol, wrap_angle(rep.theta_tree))
    net = sol.net
    tl = list(tree.tree_lines)
    y = 1 / net.z[tl]
    ohm = np.abs(x.I[tl] - y * (x.V[net.from_idx[tl]] / net.tap[tl] - x.V[net.to_idx[tl]]))
    assert ohm.max() <= 1e-8


def test_ohm_residual_perturbation(rng):
    sol = solve_opf_cr(random_radial(rng, 8))
    _, rep = recover(sol)
    x = inverse_project(sol, rep.theta)
    j = 5
    x.V[j] += 1e-3
    res = verify_branch_flow(x)
    incident = [e for e, ln in enumerate(sol.net.lines) if j in (ln.from_bus, ln.to_bus)]
    expected = max(abs(1 / sol.net.z[e]) for e in incident) * 1e-3
    assert res.ohm == pytest.approx(expected, rel=1e-6)


def test_recovery_json(triangle):
    tree = tree_from_lines(triangle, [0, 1])
    rep = recover_centralized(BetaVector(np.array([0.1, 0.2, 0.4]), tree), incidence_matrix(triangle, tree))
    data = json.loads(recovery_to_json(rep))
    assert data["verdict"] == "failed" and data["theta_deg"] is None
    assert data["mismatches"][0]["line"] == 2
    assert data["mismatches"][0]["delta_deg"] == pytest.approx(np.degrees(0.1))


def test_tree_mismatch_rejected(triangle):
    a = tree_from_lines(triangle, [0, 1])
    b = tree_from_lines(triangle, [0, 2])
    with pytest.raises(AngleError):
        recover_centralized(BetaVector(np.zeros(3), a), incidence_matrix(triangle, b))
