# Multicast: members of a group share one stream per link, so a link carries
# the largest rate in each group. Members below the maximum ride for free.

import numpy as np

from dmd.equilibrium import audit_ne_properties, construct_ne, verify_ne
from dmd.io import load_instance
from dmd.mmtp import MmtpMechanism
from dmd.oracle import solve_mmtp

loaded = load_instance("instances/mmtp_groups.json")
inst, tree = loaded.instance, loaded.tree
sol = solve_mmtp(inst)

print("rates      ", dict(zip(sol.agents, np.round(sol.x, 5))))
print("link price ", {l: round(sol.price(l), 5) for l in sol.links})
# per-member prices: only those at the group maximum pay
for (i, l), mu in sorted(sol.mu.items()):
    print(f"  mu[{i},{l}] = {mu:.5f}")

mech = MmtpMechanism(inst, tree, loaded.phi)
print("group leaders", mech.leaders.leader)

p = construct_ne(mech, sol)
cert = verify_ne(mech, p).merge(audit_ne_properties(mech, p, sol))
print("passed", cert.passed, " efficiency gap", cert.efficiency_gap)
for name, a in sorted(cert.audits.items()):
    print(f"  {name:28s} {a.residual:.2e} {'ok' if a.ok else 'FAIL'}  {a.note or ''}")

out = mech.outcome(p)
print("taxes", np.round(out.t, 5), " total", round(float(np.sum(out.t)), 5))
