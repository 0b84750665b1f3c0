# When a link's users are not adjacent in the message tree the plain
# mechanism cannot reach consensus on that link. The extended variant
# lets the agents in between relay the price.

import numpy as np

from dmd.equilibrium import DynamicsError, construct_ne, random_profile, run_dynamics, verify_ne
from dmd.io import load_instance
from dmd.mmtp import MmtpMechanism
from dmd.generators import reference_instance
from dmd.oracle import solve_mmtp, solve_utp
from dmd.utp import UtpMechanism

loaded = load_instance("instances/mmtp_relay.json")
sol = solve_mmtp(loaded.instance)
mech = MmtpMechanism(loaded.instance, loaded.tree, loaded.phi, extended=True)
print("relay links per agent", {i: sorted(ls) for i, ls in mech.cover.relay_links.items() if ls})

p = construct_ne(mech, sol)
cert = verify_ne(mech, p)
print("extended equilibrium passes:", cert.passed, " max residual", cert.max_residual)
print("allocation", np.round(mech.outcome(p).x, 5), " optimum", np.round(sol.x, 5))

# best-response dynamics. From the equilibrium nothing moves.
inst, tree, phi = reference_instance()
usol = solve_utp(inst)
umech = UtpMechanism(inst, tree, phi)
trace = run_dynamics(umech, construct_ne(umech, usol), rounds=5, solution=usol)
print("from NE: converged", trace.converged, "after", trace.rounds_run, "round")

# From a random start every step helps the agent that moves, but there is no
# promise the capacity gap closes, and a best response may not exist at all.
rng = np.random.default_rng(0)
try:
    trace = run_dynamics(umech, random_profile(umech, rng), rounds=30, order="random", seed=0, solution=usol)
except DynamicsError as exc:
    print("aborted:", exc)
    trace = exc.trace
print("smallest per-step gain", trace.min_improvement())
print("gap by round", [round(r["gap"], 4) for r in trace.rounds][:10])
