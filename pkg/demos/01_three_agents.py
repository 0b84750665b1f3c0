# Three agents share one unit-capacity link; agent i values rate x as i*ln(x).
# Solve centrally, then build the distributed equilibrium and look at it.

import numpy as np

from dmd.equilibrium import construct_ne, deviation_fuzz, verify_ne
from dmd.generators import reference_instance
from dmd.oracle import solve_utp
from dmd.utp import UtpMechanism

inst, tree, phi = reference_instance()
sol = solve_utp(inst)
print("efficient rates   ", np.round(sol.x, 6))          # 1/6, 1/3, 1/2
print("link price        ", round(sol.price("1"), 6))     # 6
print("kkt residual      ", sol.kkt.max)

mech = UtpMechanism(inst, tree, phi)

# every demand scale gives an equilibrium, and they all allocate the same rates
for k in (0.5, 1.0, 2.0, 10.0):
    p = construct_ne(mech, sol, k)
    out = mech.outcome(p)
    cert = verify_ne(mech, p)
    print(f"k={k:<4}  y={np.round([p[i, ('y',)] for i in '123'], 4)}  "
          f"x={np.round(out.x, 6)}  tax={np.round(out.t, 6)}  residual={cert.max_residual:.1e}")

# nobody gains by changing their own message
p = construct_ne(mech, sol)
print(deviation_fuzz(mech, p, trials=2000, seed=1).max_gain)   # <= 0

# nudge agent 1's price quote and the first-order check points at it
p["1", ("p", "1")] = 6.5
print(verify_ne(mech, p).worst_coordinate["1"])
