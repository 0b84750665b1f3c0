"""Acceptance suite: one marked group of checks per criterion.

The terminal summary prints a PASS/FAIL line for each criterion.
"""

import json
import time

import numpy as np
import pytest

from dmd import generators as G
from dmd.cli import main
from dmd.equilibrium import (
    audit_ne_properties, DynamicsError, construct_ne, deviation_fuzz, own_hessian, random_profile, run_dynamics, verify_ne,
)
from dmd.instance import MMTP, UTP, derive_index_sets
from dmd.mmtp import MmtpMechanism
from dmd.oracle import brute_force_solve, objective, solve_mmtp, solve_utp
from dmd.utp import UtpMechanism

INST = "instances/three_agent.json"
MECH = {UTP: UtpMechanism, MMTP: MmtpMechanism}
SOLVE = {UTP: solve_utp, MMTP: solve_mmtp}


def cli(tmp_path, *argv):
    out = tmp_path / "r.json"
    code = main([*argv, "--out", str(out)])
    return code, json.loads(out.read_text())


@pytest.fixture(scope="module")
def certified():
    """50 unicast and 50 multicast random instances with their constructed equilibria."""
    rng = np.random.default_rng(2024)
    cases = []
    for protocol, gen in ((UTP, G.random_utp_instance), (MMTP, G.random_mmtp_instance)):
        for _ in range(50):
            inst, tree = gen(rng)
            m, sol = MECH[protocol](inst, tree), SOLVE[protocol](inst)
            cases.append((m, sol, construct_ne(m, sol)))
    return cases


# 1 -------------------------------------------------------------------------

@pytest.mark.criterion(1, "golden solve on the three-agent instance")
def test_golden_solve(tmp_path):
    t0 = time.perf_counter()
    code, rep = cli(tmp_path, "solve", "--instance", INST)
    elapsed = time.perf_counter() - t0
    assert code == 0
    x = rep["solution"]["x"]
    assert [x[i] for i in "123"] == pytest.approx([1 / 6, 1 / 3, 1 / 2], abs=1e-5)
    assert rep["solution"]["lambda"]["1"] == pytest.approx(6.0, abs=1e-3)
    assert elapsed < 1.0


# 2 -------------------------------------------------------------------------

@pytest.mark.criterion(2, "equilibrium family on the three-agent instance")
@pytest.mark.parametrize("k", [0.5, 1.0, 2.0, 10.0])
def test_golden_ne_family(tmp_path, k):
    code, rep = cli(tmp_path, "ne", "--instance", INST, "--scale", str(k))
    assert code == 0
    prof, out = rep["profile"], rep["outcome"]
    assert [prof[i]["y"] for i in "123"] == pytest.approx([k / 6, k / 3, k / 2], rel=1e-9)
    assert [prof[i]["p"]["1"] for i in "123"] == pytest.approx([6.0] * 3, abs=1e-6)
    assert [out[i]["tax"] for i in "123"] == pytest.approx([1.0, 2.0, 3.0], abs=1e-6)
    assert [out[i]["x"] for i in "123"] == pytest.approx([1 / 6, 1 / 3, 1 / 2], abs=1e-9)
    assert rep["certificate"]["max_first_order_residual"] <= 1e-6


# 3 -------------------------------------------------------------------------

@pytest.mark.criterion(3, "full implementation on 100 random instances")
def test_full_implementation(certified):
    assert len(certified) == 100
    for m, sol, p in certified:
        cert = verify_ne(m, p, 1e-6)
        assert cert.passed, cert.failures()
        xhat = np.array([m.evaluate_agent(p, i).x for i in m.sets.agents])
        assert np.max(np.abs(xhat - sol.x)) <= 1e-4


# 4 -------------------------------------------------------------------------

@pytest.mark.criterion(4, "no profitable unilateral deviation")
def test_deviation_robustness(certified):
    for n, (m, sol, p) in enumerate(certified):
        rep = deviation_fuzz(m, p, trials=1000, seed=n)
        assert rep.max_gain <= 1e-7, rep.witness


# 5 -------------------------------------------------------------------------

@pytest.mark.criterion(5, "structural audits at every constructed equilibrium")
def test_audits(certified):
    for m, sol, p in certified:
        cert = audit_ne_properties(m, p, sol, 1e-6)
        assert cert.passed, cert.failures()
        assert sum(m.outcome(p).t) >= -1e-9
        assert cert.audits["feasibility.capacity"].residual <= 1e-9


# 6 -------------------------------------------------------------------------

@pytest.mark.criterion(6, "own-message utility is strictly concave and separable")
@pytest.mark.parametrize("protocol", [UTP, MMTP])
def test_concavity(protocol):
    rng = np.random.default_rng(6)
    gen = G.random_utp_instance if protocol == UTP else G.random_mmtp_instance
    for _ in range(20):
        inst, tree = gen(rng)
        m = MECH[protocol](inst, tree)
        p = random_profile(m, rng)
        for i in m.sets.agents:
            H = own_hessian(m, p, i)
            assert np.all(np.diag(H) < 0), (i, np.diag(H))
            off = H - np.diag(np.diag(H))
            assert np.max(np.abs(off)) <= 1e-6, (i, np.max(np.abs(off)))


# 7 -------------------------------------------------------------------------

@pytest.mark.criterion(7, "allocation and tax read only the neighbourhood")
@pytest.mark.parametrize("protocol", [UTP, MMTP])
def test_locality(protocol):
    rng = np.random.default_rng(7)
    gen = G.random_utp_instance if protocol == UTP else G.random_mmtp_instance
    for _ in range(20):
        inst, tree = gen(rng)
        m = MECH[protocol](inst, tree)
        p = random_profile(m, rng)
        for i in m.sets.agents:
            base = m.evaluate_agent(p, i)
            q = p.copy()
            for j in m.sets.agents:
                if j not in m.neighbourhood(i):
                    sl = m.layout.slices[j]
                    q.values[sl] = rng.uniform(0.1, 3.0, sl.stop - sl.start)
            res = m.evaluate_agent(q, i)
            assert res.x == base.x and res.tax == base.tax


# 8 -------------------------------------------------------------------------

@pytest.mark.criterion(8, "barrier solver agrees with exhaustive grid search")
def test_oracle_validation():
    rng = np.random.default_rng(8)
    step = 1e-3
    for _ in range(10):
        inst, _ = G.random_small_instance(rng, max_vars=3)
        sets = derive_index_sets(inst)
        sol, grid = solve_utp(inst), brute_force_solve(inst, grid_step=step)
        # valuations are concave, so the steepest slope between the two points sits at the smaller rate
        lo = np.minimum(sol.x, grid.x)
        lip = sum(sets.valuation[i].grad(max(lo[n], step)) for n, i in enumerate(sets.agents))
        assert objective(inst, sol.x) >= grid.objective - 1e-12
        assert abs(objective(inst, sol.x) - grid.objective) <= 2 * step * lip


# 9 -------------------------------------------------------------------------

@pytest.mark.criterion(9, "message dimensions match the closed form")
@pytest.mark.parametrize("protocol", [UTP, MMTP])
def test_dimensions(protocol):
    rng = np.random.default_rng(9)
    gen = G.random_utp_instance if protocol == UTP else G.random_mmtp_instance
    for _ in range(20):
        inst, tree = gen(rng)
        d = MECH[protocol](inst, tree).dimension()
        assert d.per_agent == d.formula
    totals = []
    ns = (10, 20, 40, 80)
    for n in ns:
        inst, tree = G.dimension_family(n, protocol)
        totals.append(MECH[protocol](inst, tree).dimension().total)
    A = np.vstack([np.asarray(ns, float), np.ones(len(ns))]).T
    coef, *_ = np.linalg.lstsq(A, np.asarray(totals, float), rcond=None)
    resid = np.linalg.norm(np.asarray(totals) - A @ coef) / np.linalg.norm(totals)
    assert resid < 1e-12


# 10 ------------------------------------------------------------------------

@pytest.mark.criterion(10, "relay variant on disconnected links; dynamics properties")
@pytest.mark.parametrize("protocol", [UTP, MMTP])
def test_extended_mechanism(protocol):
    rng = np.random.default_rng(10)
    for _ in range(10):
        inst, tree = G.random_disconnected_instance(rng, protocol)
        m, sol = MECH[protocol](inst, tree, extended=True), SOLVE[protocol](inst)
        p = construct_ne(m, sol)
        cert = verify_ne(m, p, 1e-6).merge(audit_ne_properties(m, p, sol, 1e-6))
        assert cert.passed, cert.failures()
        assert cert.efficiency_gap <= 1e-4


@pytest.mark.criterion(10, "relay variant on disconnected links; dynamics properties")
def test_dynamics_properties(certified):
    rng = np.random.default_rng(11)
    for m, sol, p in certified[::10]:
        trace = run_dynamics(m, p, rounds=3, solution=sol)
        assert trace.converged and trace.rounds_run == 1
    steps = 0
    for m, sol, p in certified[::5]:
        try:
            trace = run_dynamics(m, random_profile(m, rng), rounds=5, order="random", seed=3, solution=sol)
        except DynamicsError as exc:
            trace = exc.trace  # no best response exists at the aborting step; earlier steps still count
        steps += len(trace.steps)
        assert trace.min_improvement() >= -1e-10
    assert steps > 0
