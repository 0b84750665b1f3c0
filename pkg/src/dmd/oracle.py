"""Centralized solvers for the unicast and multicast rate-allocation problems.

Both problems are written as ``max sum_i v_i(x_i)`` subject to a set of
affine inequalities ``G z <= h`` (z = x for unicast, z = (x, b) for the
group-rate reformulation of multicast). They are solved by a log-barrier
method with damped Newton centering, followed by an active-set Newton
polish that drives the KKT residual to machine precision. Duals are read
off the barrier as ``theta / slack`` and then refined by the polish.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .instance import MMTP, UTP, IndexSets, ProblemInstance, derive_index_sets

log = logging.getLogger(__name__)

# relative tolerance for "equal" group demands; shared with the multicast mechanism
TIE_TOL = 1e-9
ZERO_SNAP = 1e-9


class SolverError(RuntimeError):
    """The barrier method failed to certify a solution."""

    def __init__(self, message, residual=math.inf, solution=None):
        super().__init__(message)
        self.residual = residual
        self.solution = solution


@dataclass(frozen=True)
class KktReport:
    primal: float
    dual: float
    slackness: float
    stationarity: float

    @property
    def max(self) -> float:
        return max(self.primal, self.dual, self.slackness, self.stationarity)

    def to_dict(self) -> dict:
        return {
            "primal": self.primal,
            "dual": self.dual,
            "slackness": self.slackness,
            "stationarity": self.stationarity,
            "max": self.max,
        }


@dataclass
class CentralSolution:
    protocol: str
    agents: tuple[str, ...]
    links: tuple[str, ...]
    x: np.ndarray
    lam: np.ndarray
    b: dict[tuple[str, str], float] | None = None
    mu: dict[tuple[str, str], float] | None = None
    kkt: KktReport | None = None
    theta: float = 0.0
    polished: bool = False
    iterations: int = 0
    objective: float = field(default=math.nan)

    @property
    def kkt_residual(self) -> float:
        return self.kkt.max if self.kkt is not None else math.inf

    def rate(self, agent: str) -> float:
        return float(self.x[self.agents.index(agent)])

    def price(self, link: str) -> float:
        return float(self.lam[self.links.index(link)])

    def to_dict(self) -> dict:
        d = {
            "protocol": self.protocol,
            "x": {a: float(v) for a, v in zip(self.agents, self.x)},
            "lambda": {l: float(v) for l, v in zip(self.links, self.lam)},
            "objective": self.objective,
            "kkt": self.kkt.to_dict() if self.kkt else None,
            "theta_final": self.theta,
            "polished": self.polished,
        }
        if self.b is not None:
            d["b"] = {f"{k}|{l}": v for (k, l), v in self.b.items()}
            d["mu"] = {f"{i}|{l}": v for (i, l), v in self.mu.items()}
        return d


# ---------------------------------------------------------------------------
# generic barrier machinery


@dataclass
class _Program:
    vals: list  # ValuationSpec per x-variable (the first len(vals) entries of z)
    G: np.ndarray
    h: np.ndarray
    z0: np.ndarray

    @property
    def nx(self) -> int:
        return len(self.vals)


def _f(prog: _Program, z: np.ndarray) -> float:
    return sum(v.eval(float(z[n])) for n, v in enumerate(prog.vals))


def _fgrad(prog: _Program, z: np.ndarray) -> np.ndarray:
    g = np.zeros_like(z)
    for n, v in enumerate(prog.vals):
        g[n] = v.grad(float(z[n]))
    return g


def _fhess(prog: _Program, z: np.ndarray) -> np.ndarray:
    d = np.zeros_like(z)
    for n, v in enumerate(prog.vals):
        d[n] = v.hess(float(z[n]))
    return d


def _in_domain(prog: _Program, z: np.ndarray) -> bool:
    if np.any(prog.h - prog.G @ z <= 0):
        return False
    return bool(np.all(z[: prog.nx] > 0))


def _barrier_value(prog, z, theta):
    s = prog.h - prog.G @ z
    return _f(prog, z) + theta * float(np.sum(np.log(s)))


def _center(prog: _Program, z: np.ndarray, theta: float, max_iter: int) -> tuple[np.ndarray, int]:
    """Damped Newton ascent on f + theta * sum log(slack)."""
    G, h = prog.G, prog.h
    it = 0
    for it in range(1, max_iter + 1):
        s = h - G @ z
        g = _fgrad(prog, z) - theta * (G.T @ (1.0 / s))
        H = np.diag(_fhess(prog, z)) - theta * (G.T * (1.0 / s**2)) @ G
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -g, rcond=None)[0]
        dec = float(g @ step) / 2.0
        if not math.isfinite(dec):
            raise SolverError(f"non-finite Newton decrement at theta={theta:g}")
        if dec <= 1e-22:
            break
        t = 1.0
        while not _in_domain(prog, z + t * step):
            t *= 0.5
            if t < 1e-20:
                raise SolverError("line search could not stay strictly feasible")
        if dec > 1e-9:
            base = _barrier_value(prog, z, theta)
            slope = float(g @ step)
            while _barrier_value(prog, z + t * step, theta) < base + 0.25 * t * slope:
                t *= 0.5
                if t < 1e-16:
                    break
        z = z + t * step
        if t * np.max(np.abs(step)) <= 1e-15 * (1.0 + np.max(np.abs(z))):
            break
    return z, it


def _barrier(prog, theta0=1.0, theta_min=1e-10, factor=10.0, max_iter=200):
    z = prog.z0.astype(float).copy()
    if not _in_domain(prog, z):
        raise SolverError("initial point is not strictly feasible")
    theta = theta0
    total = 0
    while True:
        z, it = _center(prog, z, theta, max_iter)
        total += it
        if theta <= theta_min * (1 + 1e-12):
            break
        theta = max(theta / factor, theta_min)
    duals = theta / (prog.h - prog.G @ z)
    return z, duals, theta, total


def _polish(prog, z, duals, theta, max_iter=40):
    """Newton on the KKT equations of the active set guessed from the barrier point.

    Returns (z, duals) or None if the refined point fails the sign checks.
    """
    s = prog.h - prog.G @ z
    active = np.flatnonzero(s < duals)
    GA, hA = prog.G[active], prog.h[active]
    n, m = len(z), len(active)
    nu = duals[active].copy()
    z = z.copy()
    nx = prog.nx
    strict = [not v.finite_at_zero or v.grad_at_zero == math.inf for v in prog.vals]
    for _ in range(max_iter):
        xs = z[:nx]
        if np.any(xs < -1e-12):
            return None
        # rates pinned at zero by an active row may drift to -1e-17; read them as 0
        z[:nx] = np.maximum(xs, 0.0)
        if any(strict[k] and z[k] <= 0 for k in range(nx)):
            return None
        grad = _fgrad(prog, z)
        F = np.concatenate([grad - GA.T @ nu, GA @ z - hA])
        scale = 1.0 + np.max(np.abs(grad))
        if np.max(np.abs(F)) <= 1e-14 * scale:
            break
        J = np.zeros((n + m, n + m))
        J[:n, :n] = np.diag(_fhess(prog, z))
        J[:n, n:] = -GA.T
        J[n:, :n] = GA
        step = np.linalg.lstsq(J, -F, rcond=None)[0]
        t = 1.0
        # keep strictly-positive-domain rates inside their domain
        while any(strict[k] and z[k] + t * step[k] <= 0 for k in range(nx)):
            t *= 0.5
            if t < 1e-12:
                return None
        z = z + t * step[:n]
        nu = nu + t * step[n:]
    else:
        return None
    if not np.all(np.isfinite(z)) or np.any(nu < -1e-12):
        return None
    s = prog.h - prog.G @ z
    inactive = np.setdiff1d(np.arange(len(prog.h)), active)
    if np.any(s[inactive] < -1e-12):
        return None
    out = np.zeros(len(prog.h))
    out[active] = np.maximum(nu, 0.0)
    return z, out


def _solve_program(prog, theta_min=1e-10):
    z, duals, theta, its = _barrier(prog, theta_min=theta_min)
    polished = _polish(prog, z, duals, theta)
    if polished is None:
        log.debug("active-set polish rejected at theta=%g", theta)
        return z, duals, theta, its, False
    z2, d2 = polished
    return z2, d2, theta, its, True


# ---------------------------------------------------------------------------
# problem builders


def _initial_rate(sets: IndexSets) -> float:
    return 0.5 * min(sets.capacity.values()) / len(sets.agents)


def _nonneg_rows(sets: IndexSets, nvar: int):
    rows = []
    for n, i in enumerate(sets.agents):
        if sets.valuation[i].grad_at_zero < math.inf:
            r = np.zeros(nvar)
            r[n] = -1.0
            rows.append(r)
    return rows


def solve_utp(instance: ProblemInstance, tol: float = 1e-8, theta_min: float = 1e-10) -> CentralSolution:
    """Solve max sum v_i(x_i) s.t. x >= 0 and per-link sum of rates <= capacity."""
    sets = derive_index_sets(instance)
    N, L = len(sets.agents), len(sets.links)
    A = np.zeros((L, N))
    for m, l in enumerate(sets.links):
        for n, i in enumerate(sets.agents):
            if l in sets.routes[i]:
                A[m, n] = 1.0
    extra = _nonneg_rows(sets, N)
    G = np.vstack([A] + extra) if extra else A
    h = np.concatenate([[sets.capacity[l] for l in sets.links], np.zeros(len(extra))])
    x0 = np.full(N, _initial_rate(sets))
    prog = _Program([sets.valuation[i] for i in sets.agents], G, h, x0)
    z, duals, theta, its, polished = _solve_program(prog, theta_min)
    x = _snap_zero(sets, z)
    lam = duals[:L].copy()
    sol = CentralSolution(UTP, sets.agents, sets.links, x, lam, theta=theta, polished=polished, iterations=its)
    return _certify(instance, sol, tol)


def solve_mmtp(instance: ProblemInstance, tol: float = 1e-8, theta_min: float = 1e-10) -> CentralSolution:
    """Solve the group-rate form: sum_k b_k^l <= c^l and x_i <= b_{k(i)}^l."""
    sets = derive_index_sets(instance)
    N, L = len(sets.agents), len(sets.links)
    pairs = sets.group_pairs
    P = len(pairs)
    pidx = {p: N + n for n, p in enumerate(pairs)}
    nvar = N + P
    rows, h = [], []
    for l in sets.links:
        r = np.zeros(nvar)
        for k in sets.groups_on[l]:
            r[pidx[(k, l)]] = 1.0
        rows.append(r)
        h.append(sets.capacity[l])
    mem = sets.memberships
    aidx = sets.agent_index
    for i, l in mem:
        r = np.zeros(nvar)
        r[aidx[i]] = 1.0
        r[pidx[(sets.group_of[i], l)]] = -1.0
        rows.append(r)
        h.append(0.0)
    extra = _nonneg_rows(sets, nvar)
    G = np.vstack(rows + extra)
    h = np.array(h + [0.0] * len(extra))
    x0 = _initial_rate(sets)
    z0 = np.concatenate([np.full(N, x0), np.full(P, 1.5 * x0)])
    prog = _Program([sets.valuation[i] for i in sets.agents], G, h, z0)
    z, duals, theta, its, polished = _solve_program(prog, theta_min)
    x = _snap_ties(sets, _snap_zero(sets, z[:N]))
    b = {}
    for (k, l) in pairs:
        b[(k, l)] = float(max(x[aidx[i]] for i in sets.group_users[(k, l)]))
    lam = duals[:L].copy()
    mu = {pair: float(duals[L + n]) for n, pair in enumerate(mem)}
    sol = CentralSolution(MMTP, sets.agents, sets.links, x, lam, b=b, mu=mu, theta=theta,
                          polished=polished, iterations=its)
    return _certify(instance, sol, tol)


def _snap_zero(sets: IndexSets, x: np.ndarray) -> np.ndarray:
    """Clip to x >= 0 and send rates below ZERO_SNAP * max capacity to exactly 0."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    x[x < ZERO_SNAP * max(sets.capacity.values())] = 0.0
    return x


def _snap_ties(sets: IndexSets, x: np.ndarray) -> np.ndarray:
    """Make group-mates whose rates agree to TIE_TOL exactly equal (cluster max)."""
    x = x.copy()
    aidx = sets.agent_index
    for k, members in sets.groups.items():
        idx = sorted((aidx[i] for i in members), key=lambda n: x[n])
        cluster = [idx[0]]
        for n in idx[1:]:
            prev = x[cluster[-1]]
            if abs(x[n] - prev) <= TIE_TOL * max(abs(x[n]), abs(prev)):
                cluster.append(n)
            else:
                x[cluster] = max(x[c] for c in cluster)
                cluster = [n]
        x[cluster] = max(x[c] for c in cluster)
    return x


def _certify(instance, sol: CentralSolution, tol: float) -> CentralSolution:
    sol.kkt = kkt_residual(instance, sol)
    sol.objective = objective(instance, sol.x)
    if not sol.kkt.max <= tol:
        raise SolverError(
            f"KKT residual {sol.kkt.max:.3e} exceeds tolerance {tol:g}", sol.kkt.max, sol
        )
    return sol


def objective(instance: ProblemInstance, x) -> float:
    sets = derive_index_sets(instance)
    total = 0.0
    for n, i in enumerate(sets.agents):
        v = sets.valuation[i]
        if x[n] <= 0 and not v.finite_at_zero:
            return -math.inf
        total += v.eval(max(float(x[n]), 0.0))
    return total


def kkt_residual(instance: ProblemInstance, solution: CentralSolution, zero_tol: float | None = None) -> KktReport:
    """Residuals of the KKT system, max-norm per condition family.

    Stationarity uses the equality branch for positive rates and the
    one-sided branch for rates below ``zero_tol`` (default 1e-9 * c_max).
    """
    sets = derive_index_sets(instance)
    if zero_tol is None:
        zero_tol = 1e-9 * max(sets.capacity.values())
    x = np.asarray(solution.x, dtype=float)
    lam = np.asarray(solution.lam, dtype=float)
    aidx, lidx = sets.agent_index, sets.link_index
    primal = float(max(0.0, -x.min()))
    dual = float(max(0.0, -lam.min()))
    slack = 0.0
    stat = 0.0

    def marginal(i):
        v = sets.valuation[i]
        xi = x[aidx[i]]
        return v.grad(xi) if xi > 0 else v.grad_at_zero

    def station(i, price):
        xi = x[aidx[i]]
        if xi > zero_tol:
            return abs(marginal(i) - price)
        return max(0.0, marginal(i) - price)

    if instance.protocol == UTP:
        for l in sets.links:
            load = sum(x[aidx[i]] for i in sets.users[l])
            c = sets.capacity[l]
            primal = max(primal, load - c)
            slack = max(slack, abs(lam[lidx[l]] * (c - load)))
        for i in sets.agents:
            price = sum(lam[lidx[l]] for l in sets.routes[i])
            stat = max(stat, station(i, price))
    else:
        b, mu = solution.b, solution.mu
        for l in sets.links:
            c = sets.capacity[l]
            load = sum(b[(k, l)] for k in sets.groups_on[l])
            primal = max(primal, load - c)
            slack = max(slack, abs(lam[lidx[l]] * (c - load)))
            for k in sets.groups_on[l]:
                members = sets.group_users[(k, l)]
                stat = max(stat, abs(lam[lidx[l]] - sum(mu[(i, l)] for i in members)))
                for i in members:
                    gap = x[aidx[i]] - b[(k, l)]
                    primal = max(primal, gap)
                    slack = max(slack, abs(mu[(i, l)] * gap))
        if mu:
            dual = max(dual, max(0.0, -min(mu.values())))
        for i in sets.agents:
            price = sum(mu[(i, l)] for l in sets.routes[i])
            stat = max(stat, station(i, price))
    return KktReport(float(primal), float(dual), float(slack), float(stat))


# ---------------------------------------------------------------------------
# brute-force grid oracle


def brute_force_solve(instance: ProblemInstance, grid_step: float = 1e-3, max_vars: int = 4) -> CentralSolution:
    """Exhaustive grid search, independent of the barrier solver.

    Objectives are increasing, so optimal points lie on the upper
    boundary of the feasible set. Unicast: all rates but the last run
    over the grid and the last takes its largest feasible value.
    Multicast: the group rates b_k^l run over the grid with one group per
    link taking the remaining capacity, and each agent receives
    ``min_l b_{k(i)}^l``. Returns primal values only.
    """
    sets = derive_index_sets(instance)
    if instance.protocol == UTP:
        x = _grid_utp(sets, grid_step, max_vars)
    else:
        x = _grid_mmtp(sets, grid_step, max_vars)
    sol = CentralSolution(instance.protocol, sets.agents, sets.links, x, np.zeros(len(sets.links)))
    sol.objective = objective(instance, x)
    return sol


def _values(sets, X):
    """Objective for a batch of rate vectors (rows)."""
    total = np.zeros(X.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        for n, i in enumerate(sets.agents):
            v = sets.valuation[i]
            col = X[:, n]
            if v.family == "scaled-log":
                total += v.a * np.log(col)
            elif v.family == "shifted-log":
                total += v.a * np.log1p(col)
            else:
                total += v.a * np.power(col, v.alpha)
    return np.where(np.isnan(total), -np.inf, total)


def _grid_utp(sets, step, max_vars):
    N = len(sets.agents)
    if N > max_vars:
        raise ValueError(f"brute force refuses {N} rate variables (limit {max_vars})")
    A = np.array([[1.0 if l in sets.routes[i] else 0.0 for i in sets.agents] for l in sets.links])
    cap = np.array([sets.capacity[l] for l in sets.links])
    last = A[:, -1] > 0
    free = N - 1
    best_val, best_x = -np.inf, None
    axes = [np.arange(0.0, _upper(sets, sets.agents[n]) + step / 2, step) for n in range(free)]
    for chunk in _grid_chunks(axes):
        load = chunk @ A[:, :free].T if free else np.zeros((1, len(cap)))
        room = cap - load
        ok = np.all(room >= -1e-12, axis=1)
        xlast = np.min(np.where(last, room, np.inf), axis=1)
        ok &= xlast >= 0
        X = np.column_stack([chunk, xlast]) if free else xlast[:, None]
        vals = np.where(ok, _values(sets, X), -np.inf)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_x = vals[k], X[k].copy()
    return best_x


def _grid_mmtp(sets, step, max_vars):
    pairs = sets.group_pairs
    free_pairs, dependent = [], {}
    for l in sets.links:
        ks = [k for (k, ll) in pairs if ll == l]
        free_pairs += [(k, l) for k in ks[:-1]]
        dependent[(ks[-1], l)] = [(k, l) for k in ks[:-1]]
    if len(free_pairs) > max_vars:
        raise ValueError(f"brute force refuses {len(free_pairs)} group-rate variables (limit {max_vars})")
    fidx = {p: n for n, p in enumerate(free_pairs)}
    axes = [np.arange(0.0, sets.capacity[l] + step / 2, step) for (_, l) in free_pairs]
    best_val, best_x = -np.inf, None
    for chunk in _grid_chunks(axes):
        rows = chunk.shape[0]
        B = {p: chunk[:, n] for p, n in fidx.items()}
        ok = np.ones(rows, dtype=bool)
        for (k, l), others in dependent.items():
            rest = sets.capacity[l] - sum((B[p] for p in others), np.zeros(rows))
            ok &= rest >= -1e-12
            B[(k, l)] = np.maximum(rest, 0.0)
        X = np.column_stack([
            np.min(np.column_stack([B[(sets.group_of[i], l)] for l in sorted(sets.routes[i])]), axis=1)
            for i in sets.agents
        ])
        vals = np.where(ok, _values(sets, X), -np.inf)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_x = vals[k], X[k].copy()
    return best_x


def _upper(sets, agent):
    return min(sets.capacity[l] for l in sets.routes[agent])


def _grid_chunks(axes, chunk=2_000_000):
    """Yield the Cartesian product of ``axes`` as row blocks."""
    if not axes:
        yield np.zeros((1, 0))
        return
    if len(axes) == 1:
        yield axes[0][:, None]
        return
    tail = axes[1:]
    tail_grid = np.array(np.meshgrid(*tail, indexing="ij")).reshape(len(tail), -1).T if tail else None
    per = max(1, chunk // max(1, tail_grid.shape[0]))
    head = axes[0]
    for start in range(0, len(head), per):
        h = head[start:start + per]
        block = np.column_stack([
            np.repeat(h, tail_grid.shape[0]),
            np.tile(tail_grid, (len(h), 1)),
        ])
        yield block


def lipschitz_bound(instance: ProblemInstance, x_min: float) -> float:
    """Bound on |d objective / d x_i| over rates >= x_min (sum of per-agent bounds)."""
    sets = derive_index_sets(instance)
    return sum(sets.valuation[i].grad(x_min) for i in sets.agents)


__all__ = [
    "CentralSolution",
    "KktReport",
    "SolverError",
    "TIE_TOL",
    "brute_force_solve",
    "kkt_residual",
    "lipschitz_bound",
    "objective",
    "solve_mmtp",
    "solve_utp",
]
