import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from dmd import generators as G
from dmd.equilibrium import (
    BestResponseError, CertificationError, DynamicsError, audit_ne_properties, best_response,
    construct_ne, deviation_fuzz, own_hessian, random_profile, run_dynamics, verify_ne,
)
from dmd.graph import MessageTree
from dmd.instance import MMTP, UTP, AgentSpec, LinkSpec, ProblemInstance
from dmd.mmtp import MmtpMechanism
from dmd.oracle import solve_mmtp, solve_utp
from dmd.utp import UtpMechanism
from dmd.valuations import ValuationSpec

LOG = ValuationSpec("scaled-log", 1.0)


def certify(mech, profile, sol, tol=1e-6):
    return verify_ne(mech, profile, tol).merge(audit_ne_properties(mech, profile, sol, tol))


def pipeline(protocol, rng, extended=False, **kw):
    if protocol == UTP:
        inst, tree = G.random_utp_instance(rng, **kw)
        return UtpMechanism(inst, tree, extended=extended), solve_utp(inst)
    inst, tree = G.random_mmtp_instance(rng, **kw)
    return MmtpMechanism(inst, tree, extended=extended), solve_mmtp(inst)


# ------------------------------------------------------------ reference instance

def test_reference_construction(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution, 1.0)
    assert [p[i, ("y",)] for i in "123"] == pytest.approx([1 / 6, 1 / 3, 1 / 2], abs=1e-12)
    assert [p[i, ("p", "1")] for i in "123"] == pytest.approx([6.0] * 3, abs=1e-9)
    assert verify_ne(reference_mech, p).max_residual <= 1e-8


def test_reference_scale_ten(reference_mech, reference_solution):
    p1 = construct_ne(reference_mech, reference_solution, 1.0)
    p10 = construct_ne(reference_mech, reference_solution, 10.0)
    assert not np.allclose(p1.values, p10.values)
    o1, o10 = reference_mech.outcome(p1), reference_mech.outcome(p10)
    np.testing.assert_allclose(o10.x, o1.x, rtol=1e-12)
    np.testing.assert_allclose(o10.t, o1.t, rtol=1e-12)


def test_reference_audits(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    cert = certify(reference_mech, p, reference_solution)
    assert cert.passed, cert.failures()
    assert cert.efficiency_gap <= 1e-8
    assert cert.audits["budget.weak"].note == "sum of taxes 6"
    assert "vacuous" in cert.audits["individual_rationality"].note


def test_price_bump_breaks_first_order(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    p["1", ("p", "1")] = 6.5
    cert = verify_ne(reference_mech, p)
    assert not cert.passed
    key, d = cert.worst_coordinate["1"]
    assert key == ("p", "1") and d == pytest.approx(-1.0, abs=1e-6)


def test_zero_profile_is_not_an_equilibrium(reference_mech):
    assert not verify_ne(reference_mech, reference_mech.zero_profile()).passed


def test_summary_violation_isolated(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    p["1", ("n", "3", "1")] = 0.9
    cert = audit_ne_properties(reference_mech, p, reference_solution)
    assert cert.audits["consensus.summary"].residual == pytest.approx(0.4, abs=1e-12)
    assert cert.audits["consensus.proxy"].ok and cert.audits["prices.equal"].ok


def test_best_response_fixed_point_on_reference(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    np.testing.assert_allclose(best_response(reference_mech, p, "2"), p.message("2"), atol=1e-12)


def test_price_best_response_matches_numeric_argmax(reference_mech, reference_solution, rng):
    p = construct_ne(reference_mech, reference_solution)
    p["1", ("y",)] = 0.3  # move off consensus so the capacity gap is nonzero
    p["2", ("p", "1")] = 4.0
    p["3", ("p", "1")] = 5.0
    k = reference_mech.layout.index[("1", ("p", "1"))]
    vals = p.values.tolist()

    def neg_u(v):
        w = list(vals)
        w[k] = v
        return -reference_mech.utility_value(w, "1")

    best = minimize_scalar(neg_u, bounds=(0.0, 20.0), method="bounded", options={"xatol": 1e-10}).x
    res = reference_mech.evaluate_agent(p, "1")
    gap = 1.0 - res.r * res.f["1"]
    pbar = 4.5
    assert best_response(reference_mech, p, "1")[-1] == pytest.approx(max(0.0, pbar - pbar * gap * gap / 2), abs=1e-12)
    assert best_response(reference_mech, p, "1")[-1] == pytest.approx(best, abs=1e-7)


def test_demand_best_response_inverts_marginal_value(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    p["2", ("n", "1", "1")] = 1.0  # changes agent 2's factor r
    res = reference_mech.evaluate_agent(p, "2")
    y = best_response(reference_mech, p, "2")[0]
    assert y == pytest.approx(2.0 / (6.0 * res.r), rel=1e-12)


def test_best_response_errors_on_unbounded_factor(reference_mech):
    with pytest.raises(BestResponseError):
        best_response(reference_mech, reference_mech.zero_profile(), "1")


def test_refuses_uncertified_solution(reference_mech, reference_solution):
    import dataclasses
    bad = dataclasses.replace(reference_solution, kkt=dataclasses.replace(reference_solution.kkt, stationarity=1.0))
    with pytest.raises(CertificationError):
        construct_ne(reference_mech, bad)
    with pytest.raises(ValueError):
        construct_ne(reference_mech, reference_solution, 0.0)


# ------------------------------------------------------------ multicast specifics

def test_random_five_agent_instance(rng):
    m, sol = pipeline(UTP, rng, n_agents=(5, 5), n_links=(3, 3))
    assert certify(m, construct_ne(m, sol), sol).passed


def test_singleton_groups_mirror_unicast_construction(rng):
    inst_u, tree = G.random_utp_instance(rng)
    inst_m = ProblemInstance(MMTP, inst_u.links, [
        AgentSpec(a.id, a.links, a.valuation, f"G{a.id}") for a in inst_u.agents])
    mu, mm = UtpMechanism(inst_u, tree), MmtpMechanism(inst_m, tree)
    pu, pm = construct_ne(mu, solve_utp(inst_u)), construct_ne(mm, solve_mmtp(inst_m))
    for i in mu.sets.agents:
        assert pm[i, ("y",)] == pytest.approx(pu[i, ("y",)], abs=1e-8)
        for l in mu.sets.routes[i]:
            assert pm[i, ("p1", l)] == pytest.approx(pu[i, ("p", l)], rel=1e-6, abs=1e-9)
            assert pm[i, ("s", l)] == pm[i, ("y",)]
    assert certify(mm, pm, solve_mmtp(inst_m)).passed


def test_symmetric_groups_share_the_maximum():
    inst = ProblemInstance(MMTP, [LinkSpec("A", 1.0)], [
        AgentSpec(i, ("A",), LOG, "G1" if i in "12" else "G2") for i in "1234"])
    tree = MessageTree(tuple("1234"), (("1", "2"), ("2", "3"), ("3", "4")))
    m = MmtpMechanism(inst, tree)
    sol = solve_mmtp(inst)
    p = construct_ne(m, sol)
    for (k, l), c in m.leaders.leader.items():
        assert p[c, ("z2", l)] == 2.0
    for i in "1234":
        assert p[i, ("s", "A")] == pytest.approx(p[i, ("y",)] / 2, rel=1e-12)
    assert certify(m, p, sol).passed


def test_group_prices_equal_link_price(rng):
    m, sol = pipeline(MMTP, rng)
    p = construct_ne(m, sol)
    for i in m.sets.agents:
        for l in m.sets.routes[i]:
            assert p[i, ("w", l)] == pytest.approx(sol.price(l), rel=1e-7, abs=1e-9)
    assert certify(m, p, sol).audits["prices.group_price_equal"].ok


def test_multicast_own_hessian_couples_price_and_correction(rng):
    """p1 and a1 enter the utility only through their sum, so the own Hessian is singular there."""
    m, _ = pipeline(MMTP, rng)
    p = random_profile(m, rng)
    i = m.sets.agents[0]
    keys = [m.layout.keys[k][1] for k in m.own_indices(i)]
    H = own_hessian(m, p, i)
    for l in m.sets.routes[i]:
        a, b = keys.index(("p1", l)), keys.index(("a1", l))
        assert H[a, b] == pytest.approx(-2.0, abs=1e-5)
        assert H[a, a] == pytest.approx(-2.0, abs=1e-5) and H[b, b] == pytest.approx(-2.0, abs=1e-5)


# ------------------------------------------------------------ relay variant

@pytest.mark.parametrize("protocol", [UTP, MMTP])
def test_extended_variant_on_disconnected_instances(protocol, rng):
    for _ in range(3):
        inst, tree = G.random_disconnected_instance(rng, protocol)
        solve = solve_utp if protocol == UTP else solve_mmtp
        cls = UtpMechanism if protocol == UTP else MmtpMechanism
        m, sol = cls(inst, tree, extended=True), solve(inst)
        cert = certify(m, construct_ne(m, sol), sol)
        assert cert.passed, cert.failures()
        assert cert.efficiency_gap <= 1e-4


# ------------------------------------------------------------ deviations

def test_fuzz_reference(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    assert deviation_fuzz(reference_mech, p, trials=1000, radius=0.5, seed=0).max_gain <= 1e-7
    assert deviation_fuzz(reference_mech, p, trials=50, radius=0.0, seed=0).max_gain == 0.0


def test_fuzz_finds_gain_on_broken_profile(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    p["1", ("p", "1")] = 6.5
    rep = deviation_fuzz(reference_mech, p, trials=300, seed=1)
    assert rep.max_gain > 1e-3 and not rep.ok
    assert rep.witness["gain"] == rep.max_gain and rep.witness["changes"]


# ------------------------------------------------------------ dynamics

def test_dynamics_from_ne_stops_after_one_round(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    trace = run_dynamics(reference_mech, p, rounds=5, solution=reference_solution)
    assert trace.converged and trace.rounds_run == 1
    assert all(s.change <= 1e-12 for s in trace.steps)


def test_dynamics_restores_bumped_price(reference_mech, reference_solution):
    p = construct_ne(reference_mech, reference_solution)
    p["1", ("p", "1")] += 0.1
    trace = run_dynamics(reference_mech, p, rounds=1, solution=reference_solution)
    assert trace.rounds[0]["profile"][reference_mech.layout.index[("1", ("p", "1"))]] == pytest.approx(6.0, abs=1e-9)


def test_dynamics_random_start_is_monotone_and_reproducible(reference_mech, reference_solution):
    rng = np.random.default_rng(7)
    init = random_profile(reference_mech, rng)
    a = run_dynamics(reference_mech, init, rounds=20, order="random", seed=7, solution=reference_solution)
    b = run_dynamics(reference_mech, init, rounds=20, order="random", seed=7, solution=reference_solution)
    assert a.to_csv() == b.to_csv()
    assert a.min_improvement() >= -1e-10
    header = a.to_csv().splitlines()[0]
    assert header == "round,agent,utility,gap,load_1"


def test_dynamics_error_carries_partial_trace(reference_mech):
    with pytest.raises(DynamicsError) as err:
        run_dynamics(reference_mech, reference_mech.zero_profile(), rounds=3)
    assert err.value.round == 1 and err.value.agent == "1"
    assert err.value.trace.error


def test_dynamics_rejects_unknown_order(reference_mech):
    with pytest.raises(ValueError):
        run_dynamics(reference_mech, reference_mech.zero_profile(), order="sideways")


# ------------------------------------------------------------ properties

seeds = st.integers(0, 2**32 - 1)
protocols = st.sampled_from([UTP, MMTP])


@settings(max_examples=25)
@given(seeds, protocols)
def test_best_response_is_fixed_point_at_ne(seed, protocol):
    m, sol = pipeline(protocol, np.random.default_rng(seed))
    p = construct_ne(m, sol, 1.7)
    for i in m.sets.agents:
        np.testing.assert_allclose(best_response(m, p, i), p.message(i), atol=1e-9, rtol=1e-9)


@settings(max_examples=15)
@given(seeds, protocols)
def test_scale_family_shares_outcome(seed, protocol):
    m, sol = pipeline(protocol, np.random.default_rng(seed))
    outs, certs = [], []
    for k in (0.5, 1.0, 2.0, 10.0):
        p = construct_ne(m, sol, k)
        outs.append(m.outcome(p))
        certs.append(certify(m, p, sol))
    for o, c in zip(outs, certs):
        assert c.passed, c.failures()
        np.testing.assert_allclose(o.x, outs[0].x, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(o.t, outs[0].t, rtol=1e-8, atol=1e-10)


@settings(max_examples=25)
@given(seeds, protocols)
def test_weak_budget_balance_identity(seed, protocol):
    m, sol = pipeline(protocol, np.random.default_rng(seed))
    out = m.outcome(construct_ne(m, sol))
    s = m.sets
    mu = (lambda i, l: sol.price(l)) if protocol == UTP else (lambda i, l: sol.mu[(i, l)])
    expected = sum(out.results[i].x * sum(mu(i, l) for l in s.routes[i]) for i in s.agents)
    assert sum(out.t) >= -1e-9
    assert sum(out.t) == pytest.approx(expected, rel=1e-8, abs=1e-9)


@settings(max_examples=15)
@given(seeds)
def test_best_response_steps_never_hurt_the_mover(seed):
    rng = np.random.default_rng(seed)
    m, sol = pipeline(UTP, rng)
    try:
        trace = run_dynamics(m, random_profile(m, rng), rounds=5, order="random", seed=seed, solution=sol)
    except DynamicsError as exc:
        trace = exc.trace
    for s in trace.steps:
        if math.isfinite(s.utility_before):
            assert s.utility_after >= s.utility_before - 1e-10 * max(1.0, abs(s.utility_before))
