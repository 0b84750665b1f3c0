"""Equilibrium construction, verification, audits and best-response dynamics.

Every function takes a mechanism object (``UtpMechanism`` or
``MmtpMechanism``) as its context; the mechanism carries the instance,
tree, phi, leaders and variant.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .instance import MMTP, UTP
from .mechanism import Mechanism, MechanismError
from .messages import A_FLOOR, Profile
from .mmtp import attains
from .oracle import CentralSolution, kkt_residual

DEFAULT_TOL = 1e-6
CERTIFIED_RESIDUAL = 1e-6


class CertificationError(ValueError):
    """The oracle solution handed to a construction is not KKT-certified."""


class BestResponseError(MechanismError):
    """A coordinate has no best response (utility increases without bound)."""


class DynamicsError(RuntimeError):
    def __init__(self, round_no, agent, cause):
        super().__init__(f"round {round_no}, agent {agent!r}: {cause}")
        self.round = round_no
        self.agent = agent
        self.cause = cause


# ---------------------------------------------------------------------------
# construction


def _subtree_sum(mech: Mechanism, i, j, l, demand):
    return sum(demand.get((h, l), 0.0) for h in mech.directory.behind(i, j))


def construct_ne(mech: Mechanism, solution: CentralSolution, scale: float = 1.0) -> Profile:
    if mech.protocol == UTP:
        return construct_ne_utp(mech, solution, scale)
    return construct_ne_mmtp(mech, solution, scale)


def _check_solution(mech, solution, scale):
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if solution.protocol != mech.protocol:
        raise CertificationError("solution and mechanism protocols differ")
    if not solution.kkt_residual <= CERTIFIED_RESIDUAL:
        raise CertificationError(
            f"refusing to build an equilibrium from a solution with KKT residual {solution.kkt_residual:.3e}"
        )


def consensus_profile(mech: Mechanism, y: dict[str, float]) -> Profile:
    """Profile whose proxies, summaries (and multicast group statistics) agree with demands ``y``.

    Prices are left at 0 and correction terms at 1.
    """
    s, d = mech.sets, mech.directory
    p = mech.zero_profile()
    if mech.protocol == UTP:
        demand = {(i, l): y[i] for i in s.agents for l in s.routes[i]}
    else:
        demand, zstat = {}, {}
        for (k, l), members in s.group_users.items():
            top = max(y[i] for i in members)
            count = sum(attains(y[i], top) for i in members)
            zstat[(k, l)] = (top, float(count))
            for i in members:
                demand[(i, l)] = y[i] / count if (attains(y[i], top) and y[i] != 0.0) else 0.0
    for i in s.agents:
        p[i, ("y",)] = y[i]
        for j in d.neighbors[i]:
            for l in s.links:
                p[i, ("n", j, l)] = _subtree_sum(mech, i, j, l, demand)
        for j in d.proxied[i]:
            p[i, ("q", j)] = y[j]
            if mech.protocol == MMTP:
                for l in s.routes[j]:
                    p[i, ("a2", j, l)] = 1.0
        if mech.protocol == MMTP:
            for l in s.routes[i]:
                p[i, ("s", l)] = demand[(i, l)]
                p[i, ("a1", l)] = 1.0
            for l in mech.leaders.leads[i]:
                top, count = zstat[(s.group_of[i], l)]
                p[i, ("z1", l)] = top
                p[i, ("z2", l)] = count
    return p


def construct_ne_utp(mech: Mechanism, solution: CentralSolution, scale: float = 1.0) -> Profile:
    """Scaled optimum as demands, consensus summaries/proxies, optimal duals as prices."""
    _check_solution(mech, solution, scale)
    s = mech.sets
    p = consensus_profile(mech, {i: scale * solution.rate(i) for i in s.agents})
    for i in s.agents:
        for l in mech.price_links[i]:
            p[i, ("p", l)] = solution.price(l)
    return p


def construct_ne_mmtp(mech: Mechanism, solution: CentralSolution, scale: float = 1.0) -> Profile:
    """Multicast analogue: shares split the group maximum among its attainers,
    p1 = mu, w = sum of group mu (the leader's reconstruction), a = 1."""
    _check_solution(mech, solution, scale)
    s, d = mech.sets, mech.directory
    p = consensus_profile(mech, {i: scale * solution.rate(i) for i in s.agents})
    mu = solution.mu
    wsum = {pair: sum(mu[(j, pair[1])] for j in members) for pair, members in s.group_users.items()}
    for i in s.agents:
        for j in d.proxied[i]:
            for l in s.routes[j]:
                p[i, ("p2", j, l)] = mu[(j, l)]
        for l in s.routes[i]:
            p[i, ("p1", l)] = mu[(i, l)]
            p[i, ("w", l)] = wsum[(s.group_of[i], l)]
        for l in mech.price_links[i]:
            if l not in s.routes[i]:
                p[i, ("w", l)] = solution.price(l)
    return p


def random_profile(mech: Mechanism, rng, low: float = 0.2, high: float = 1.5) -> Profile:
    """Interior profile with every component drawn uniformly from [low, high]."""
    prof = mech.zero_profile()
    prof.values[:] = rng.uniform(low, high, size=mech.layout.size)
    return prof


# ---------------------------------------------------------------------------
# certificates


@dataclass
class AuditItem:
    name: str
    residual: float
    ok: bool
    note: str = ""

    def to_dict(self):
        d = {"residual": self.residual, "ok": self.ok}
        if self.note:
            d["note"] = self.note
        return d


@dataclass
class NeCertificate:
    protocol: str
    tol: float
    agent_residuals: dict[str, float] = field(default_factory=dict)
    worst_coordinate: dict[str, tuple] = field(default_factory=dict)
    domain_flags: list[str] = field(default_factory=list)
    audits: dict[str, AuditItem] = field(default_factory=dict)
    efficiency_gap: float | None = None

    @property
    def max_residual(self) -> float:
        return max(self.agent_residuals.values(), default=0.0)

    @property
    def first_order_ok(self) -> bool:
        return not self.domain_flags and self.max_residual <= self.tol

    @property
    def passed(self) -> bool:
        return self.first_order_ok and all(a.ok for a in self.audits.values())

    def failures(self) -> list[str]:
        out = [f"first-order[{a}]" for a, r in self.agent_residuals.items() if r > self.tol]
        out += [f"domain[{a}]" for a in self.domain_flags]
        out += [name for name, a in self.audits.items() if not a.ok]
        return out

    def merge(self, other: "NeCertificate") -> "NeCertificate":
        out = NeCertificate(self.protocol, self.tol)
        for src in (self, other):
            out.agent_residuals.update(src.agent_residuals)
            out.worst_coordinate.update(src.worst_coordinate)
            out.domain_flags += [f for f in src.domain_flags if f not in out.domain_flags]
            out.audits.update(src.audits)
            if src.efficiency_gap is not None:
                out.efficiency_gap = src.efficiency_gap
        return out

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "passed": self.passed,
            "tol": self.tol,
            "max_first_order_residual": self.max_residual,
            "agent_residuals": self.agent_residuals,
            "worst_coordinate": {a: [list(map(str, k)), v] for a, (k, v) in self.worst_coordinate.items()},
            "domain_flags": self.domain_flags,
            "audits": {k: v.to_dict() for k, v in self.audits.items()},
            "efficiency_gap": self.efficiency_gap,
            "failures": self.failures(),
        }


# ---------------------------------------------------------------------------
# first-order verification


def _step(key, value):
    if key[0] == "y":
        return 1e-3 * value if value > 0 else 1e-6
    return 1e-4 * max(abs(value), 1e-2)


def partial(mech: Mechanism, vals: list, agent: str, k: int, key, lower: float):
    """Numeric d u_agent / d vals[k] and whether the coordinate sits on its bound.

    Interior coordinates use a Richardson-extrapolated central difference;
    coordinates at (or within one step of) their lower bound use the
    second-order forward difference.
    """
    v0 = vals[k]
    h = _step(key, v0)

    def u(x):
        vals[k] = x
        try:
            return mech.utility_value(vals, agent)
        finally:
            vals[k] = v0

    if v0 - h < lower:
        u0, u1, u2 = u(v0), u(v0 + h), u(v0 + 2 * h)
        return (-3 * u0 + 4 * u1 - u2) / (2 * h), v0 <= lower
    d1 = (u(v0 + h) - u(v0 - h)) / (2 * h)
    d2 = (u(v0 + h / 2) - u(v0 - h / 2)) / h
    return (4 * d2 - d1) / 3, False


def own_hessian(mech: Mechanism, profile: Profile, agent: str, h: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of an agent's utility in its own message."""
    vals = list(mech._vals(profile))
    idx = list(mech.own_indices(agent))

    def u(shift):
        v = list(vals)
        for k, d in shift.items():
            v[k] += d
        return mech.utility_value(v, agent)

    n = len(idx)
    H = np.zeros((n, n))
    u0 = u({})
    for a in range(n):
        ka = idx[a]
        H[a, a] = (u({ka: h}) - 2 * u0 + u({ka: -h})) / (h * h)
        for b in range(a + 1, n):
            kb = idx[b]
            H[a, b] = H[b, a] = (u({ka: h, kb: h}) - u({ka: h, kb: -h})
                                 - u({ka: -h, kb: h}) + u({ka: -h, kb: -h})) / (4 * h * h)
    return H


def verify_ne(mech: Mechanism, profile: Profile, tol: float = DEFAULT_TOL) -> NeCertificate:
    """First-order certificate: every own partial is 0 (interior) or <= 0 (at bound)."""
    cert = NeCertificate(mech.protocol, tol)
    vals = mech._vals(profile)
    vals = list(vals)
    lower = mech.layout.lower
    keys = mech.layout.keys
    for i in mech.sets.agents:
        u0, flag = mech.utility(vals, i)
        if flag or not math.isfinite(u0):
            cert.domain_flags.append(i)
            cert.agent_residuals[i] = math.inf
            continue
        worst, where = 0.0, None
        for k in mech.own_indices(i):
            key = keys[k][1]
            d, at_bound = partial(mech, vals, i, k, key, float(lower[k]))
            res = max(0.0, d) if at_bound else abs(d)
            if res >= worst:
                worst, where = res, (key, d)
        cert.agent_residuals[i] = worst
        if where is not None:
            cert.worst_coordinate[i] = where
    return cert


# ---------------------------------------------------------------------------
# structural audits


def _item(cert, name, residual, tol, note=""):
    cert.audits[name] = AuditItem(name, float(residual), bool(residual <= tol), note)


def audit_ne_properties(mech: Mechanism, profile: Profile, solution: CentralSolution | None,
                        tol: float = DEFAULT_TOL, gap_tol: float = 1e-4) -> NeCertificate:
    """Check the equilibrium equations and conclusions term by term."""
    cert = NeCertificate(mech.protocol, tol)
    out = mech.outcome(profile)
    if mech.protocol == UTP:
        _audit_utp(mech, profile, out, cert, tol)
    else:
        _audit_mmtp(mech, profile, out, cert, tol)
    _audit_budget(mech, out, cert, tol)
    if solution is not None:
        gap = float(np.max(np.abs(out.x - solution.x)))
        cert.efficiency_gap = gap
        _item(cert, "efficiency", gap, gap_tol)
    return cert


def _summary_residuals(mech, vals, source):
    s, d = mech.sets, mech.directory
    local = subtree = 0.0
    demand = {}
    for j in s.agents:
        for l in s.routes[j]:
            demand[(j, l)] = vals[source(j, l)]
    for i in s.agents:
        for j in d.neighbors[i]:
            for l in s.links:
                n = vals[mech._idx(i, "n", j, l)]
                rhs = demand.get((j, l), 0.0) + sum(
                    vals[mech._idx(j, "n", h, l)] for h in d.neighbors[j] if h != i
                )
                local = max(local, abs(n - rhs))
                subtree = max(subtree, abs(n - _subtree_sum(mech, i, j, l, demand)))
    return local, subtree


def _audit_utp(mech, profile, out, cert, tol):
    s, d = mech.sets, mech.directory
    vals = profile.values.tolist()
    proxy = max((abs(profile[i, ("q", j)] - profile[j, ("y",)]) for i in s.agents for j in d.proxied[i]),
                default=0.0)
    _item(cert, "consensus.proxy", proxy, tol)
    local, subtree = _summary_residuals(mech, vals, lambda j, l: mech._idx(j, "y"))
    _item(cert, "consensus.summary", local, tol)
    _item(cert, "consensus.subtree", subtree, tol)

    loads = {l: sum(out.results[i].x for i in s.users[l]) for l in s.links}
    over = max(max(loads[l] - s.capacity[l] for l in s.links), 0.0)
    _item(cert, "feasibility.capacity", over, 1e-9)

    spread, slack = 0.0, 0.0
    price = {}
    for l in s.links:
        quoted = [profile[i, ("p", l)] for i in s.agents if l in mech.price_links[i]]
        spread = max(spread, max(quoted) - min(quoted))
        price[l] = sum(quoted) / len(quoted)
        slack = max(slack, abs(price[l] * (s.capacity[l] - loads[l])))
    _item(cert, "prices.equal", spread, tol)
    _item(cert, "prices.slackness", slack, tol)

    stat = 0.0
    for i in s.agents:
        total = sum(profile[i, ("p", l)] for l in s.routes[i])
        stat = max(stat, _stationarity(s.valuation[i], out.results[i].x, total))
    _item(cert, "stationarity", stat, tol)

    ident = max(abs(out.results[i].tax - out.results[i].x * sum(price[l] for l in s.routes[i]))
                for i in s.agents)
    _item(cert, "budget.identity", ident, tol)

    sol = CentralSolution(UTP, s.agents, s.links, out.x, np.array([price[l] for l in s.links]))
    _item(cert, "kkt", kkt_residual(mech.instance, sol).max, tol)


def _audit_mmtp(mech, profile, out, cert, tol):
    s, d = mech.sets, mech.directory
    leaders = mech.leaders
    vals = profile.values.tolist()
    stats = {(i, l): out.results[i].extras["stats"][l] for i in s.agents for l in s.routes[i]}

    def worst(it):
        return max(it, default=0.0)

    _item(cert, "consensus.proxy", worst(abs(profile[i, ("q", j)] - profile[j, ("y",)])
                                         for i in s.agents for j in d.proxied[i]), tol)
    _item(cert, "consensus.share", worst(abs(profile[i, ("s", l)] - stats[(i, l)].share)
                                         for i in s.agents for l in s.routes[i]), tol)
    _item(cert, "consensus.proxy_price", worst(abs(profile[i, ("p2", j, l)] - profile[j, ("p1", l)])
                                               for i in s.agents for j in d.proxied[i] for l in s.routes[j]), tol)
    _item(cert, "consensus.proxy_a", worst(abs(profile[i, ("a2", j, l)] - profile[j, ("a1", l)])
                                           for i in s.agents for j in d.proxied[i] for l in s.routes[j]), tol)
    wres = 0.0
    for i in s.agents:
        for l in s.routes[i]:
            c = leaders.leader[(s.group_of[i], l)]
            if c == i:
                rhs = profile[d.phi[i], ("p2", i, l)] + sum(
                    profile[j, ("p1", l)] for j in s.group_users[(s.group_of[i], l)] if j != i)
            else:
                rhs = profile[c, ("w", l)]
            wres = max(wres, abs(profile[i, ("w", l)] - rhs))
    _item(cert, "consensus.group_price", wres, tol)
    zres = 0.0
    for i in s.agents:
        for l in leaders.leads[i]:
            st = stats[(i, l)]
            zres = max(zres, abs(profile[i, ("z1", l)] - st.zmax), abs(profile[i, ("z2", l)] - st.count))
    _item(cert, "consensus.group_max", zres, tol)
    local, subtree = _summary_residuals(mech, vals, lambda j, l: mech._idx(j, "s", l))
    _item(cert, "consensus.summary", local, tol)
    _item(cert, "consensus.subtree", subtree, tol)

    x = {i: out.results[i].x for i in s.agents}
    loads = {l: sum(max(x[i] for i in s.group_users[(k, l)]) for k in s.groups_on[l]) for l in s.links}
    over = max(max(loads[l] - s.capacity[l] for l in s.links), 0.0)
    _item(cert, "feasibility.capacity", over, 1e-9)

    eqw = comw = comp = 0.0
    wlink = {}
    for l in s.links:
        hats = [out.results[i].extras["w_hat"][l] for i in s.users[l]]
        wl = sum(hats) / len(hats)
        wlink[l] = wl
        eqw = max(eqw, max(abs(h - wl) for h in hats))
        for i in s.users[l]:
            res = out.results[i]
            comw = max(comw, abs(wl * (s.capacity[l] - res.r * res.f[l])))
            comp = max(comp, abs(profile[i, ("p1", l)] * (profile[i, ("y",)] - stats[(i, l)].zmax)))
    _item(cert, "prices.group_price_equal", eqw, tol)
    _item(cert, "prices.slackness", comw, tol)
    _item(cert, "prices.free_riding", comp, tol)
    if mech.extended:
        relay = 0.0
        for l in s.links:
            quoted = [profile[i, ("w", l)] for i in s.agents if l in mech.cover.relay_links[i]]
            if quoted:
                relay = max(relay, max(abs(w - wlink[l]) for w in quoted))
        _item(cert, "prices.relay", relay, tol)

    stat = 0.0
    for i in s.agents:
        total = sum(profile[i, ("p1", l)] for l in s.routes[i])
        stat = max(stat, _stationarity(s.valuation[i], x[i], total))
    _item(cert, "stationarity", stat, tol)
    ident = max(abs(out.results[i].tax - x[i] * sum(profile[i, ("p1", l)] for l in s.routes[i]))
                for i in s.agents)
    _item(cert, "budget.identity", ident, tol)

    b = {}
    for (k, l), members in s.group_users.items():
        i = next(iter(sorted(members)))
        b[(k, l)] = out.results[i].r * stats[(i, l)].zmax
    bres = max(abs(b[(k, l)] - max(x[i] for i in members)) for (k, l), members in s.group_users.items())
    _item(cert, "group_rate", bres, tol)
    mu = {(i, l): profile[i, ("p1", l)] for i in s.agents for l in s.routes[i]}
    sol = CentralSolution(MMTP, s.agents, s.links, out.x, np.array([wlink[l] for l in s.links]), b=b, mu=mu)
    _item(cert, "kkt", kkt_residual(mech.instance, sol).max, tol)


def _stationarity(v, x, price):
    if x > 0:
        return abs(v.grad(x) - price)
    return max(0.0, v.grad_at_zero - price)


def _audit_budget(mech, out, cert, tol):
    total = float(sum(out.results[i].tax for i in mech.sets.agents))
    _item(cert, "budget.weak", max(0.0, -total), 1e-9, note=f"sum of taxes {total:.12g}")
    worst, vacuous = 0.0, []
    for i in mech.sets.agents:
        v = mech.sets.valuation[i]
        if not v.finite_at_zero:
            vacuous.append(i)
            continue
        worst = max(worst, v.value_at_zero() - out.utility[i])
    note = f"vacuous for {vacuous} (value at zero is -inf)" if vacuous else ""
    _item(cert, "individual_rationality", max(0.0, worst), tol, note)


# ---------------------------------------------------------------------------
# deviations


@dataclass
class DeviationReport:
    trials: int
    radius: float
    seed: int | None
    max_gain: float
    witness: dict | None

    @property
    def ok(self) -> bool:
        return self.max_gain <= 1e-7

    def to_dict(self):
        return {"trials": self.trials, "radius": self.radius, "seed": self.seed,
                "max_gain": self.max_gain, "ok": self.ok, "witness": self.witness}


def deviation_fuzz(mech: Mechanism, profile: Profile, trials: int = 1000, radius: float = 0.5,
                   seed: int | None = 0) -> DeviationReport:
    """Random unilateral deviations; reports the largest utility gain seen."""
    rng = np.random.default_rng(seed)
    base_vals = mech._vals(profile)
    base_vals = list(base_vals)
    base_u = {i: mech.utility_value(base_vals, i) for i in mech.sets.agents}
    lower = mech.layout.lower
    keys = mech.layout.keys
    agents = mech.sets.agents
    best, witness = -math.inf, None
    for _ in range(trials):
        i = agents[int(rng.integers(len(agents)))]
        idx = np.array(mech.own_indices(i))
        mask = rng.random(len(idx)) < 0.5
        if not mask.any():
            mask[int(rng.integers(len(idx)))] = True
        delta = rng.uniform(-radius, radius, size=len(idx)) * mask
        vals = list(base_vals)
        changed = {}
        for k, dv in zip(idx.tolist(), delta.tolist()):
            if dv == 0.0:
                continue
            new = max(float(lower[k]), vals[k] + dv)
            vals[k] = new
            changed[k] = new
        gain = mech.utility_value(vals, i) - base_u[i]
        if gain > best:
            best = gain
            witness = {"agent": i, "changes": {"/".join(map(str, keys[k][1])): v for k, v in changed.items()},
                       "gain": gain}
    if trials == 0:
        best = 0.0
    return DeviationReport(trials, radius, seed, float(best), witness)


# ---------------------------------------------------------------------------
# best responses


def best_response(mech: Mechanism, profile: Profile, agent: str) -> np.ndarray:
    """Utility-maximizing own message given everyone else's messages."""
    vals = list(mech._vals(profile))
    res = mech._evaluate(vals, agent)
    new = dict()
    if mech.protocol == UTP:
        _br_utp(mech, vals, agent, res, new)
    else:
        _br_mmtp(mech, vals, agent, res, new)
    msg = np.array(vals[mech.layout.slices[agent]], dtype=float)
    start = mech.layout.slices[agent].start
    for k, v in new.items():
        msg[k - start] = v
    return msg


def _br_common(mech, vals, i, new):
    P = mech._prep[i]
    for _, _, parts in P["links"]:
        for own_n, ysrc, others in parts:
            new[own_n] = (vals[ysrc] if ysrc is not None else 0.0) + sum(vals[k] for k in others)
    for qi, yi in P["proxy"]:
        new[qi] = vals[yi]


def _clamped_price(avg, gap):
    return max(0.0, avg - avg * gap * gap / 2.0)


def _br_demand(mech, i, res, price):
    if res.r == math.inf:
        raise BestResponseError(f"agent {i!r}, coordinate y: radial factor is unbounded, no best demand")
    v = mech.sets.valuation[i]
    if not price > 0:
        raise BestResponseError(
            f"agent {i!r}, coordinate y: effective price is {price}, utility increases without bound"
        )
    return v.demand(price) / res.r


def _br_utp(mech, vals, i, res, new):
    _br_common(mech, vals, i, new)
    P = mech._prep[i]
    s = mech.sets
    for l, (own, _) in P["prices"].items():
        mech._require_neighbours(i, l)
        gap = mech._gap(s.capacity[l], res.r, res.f[l])
        new[own] = _clamped_price(res.extras["pbar"][l], gap)
    total = sum(res.extras["pbar"][l] for l in s.routes[i])
    new[P["y"]] = _br_demand(mech, i, res, total)


def _br_mmtp(mech, vals, i, res, new):
    _br_common(mech, vals, i, new)
    P = mech._prep[i]
    s = mech.sets
    for p2, p1, a2, a1 in P["common"]:
        new[p2] = vals[p1]
        new[a2] = max(A_FLOOR, vals[a1])
    q = vals[P["q_phi"]]
    price = 0.0
    for l, e in P["own"].items():
        st = res.extras["stats"][l]
        p2phi = vals[e["p2phi"]]
        price += p2phi
        new[e["s"]] = st.share
        if e["leader"]:
            others = sum(vals[k] for k in e["p1_others"])
            new[e["z1"]] = st.zmax
            new[e["z2"]] = st.count
            new[e["w"]] = p2phi + others
            base = others - vals[e["a2phi"]]
        else:
            new[e["w"]] = vals[e["wc"]]
            base = vals[e["wc"]] - p2phi - vals[e["a2phi"]]
        wbar = res.extras["w_bar"][l]
        gap = mech._gap(s.capacity[l], res.r, res.f[l])
        target = wbar - wbar * gap * gap / 2.0 - base  # optimal p1 + a1
        # ties within TIE_TOL count as attaining the maximum, as in the share
        beta = 0.0 if st.attains else p2phi * (st.zmax - q) ** 2
        p1 = vals[e["p1"]]
        if beta > 0 or target < A_FLOOR:
            p1, a1 = 0.0, max(A_FLOOR, target)
        elif p1 <= target - A_FLOOR:
            a1 = target - p1
        else:
            p1, a1 = target - A_FLOOR, A_FLOOR
        new[e["p1"]], new[e["a1"]] = p1, a1
    for l, (own_w, _) in P["relay"].items():
        gap = mech._gap(s.capacity[l], res.r, res.f[l])
        new[own_w] = _clamped_price(res.extras["w_bar"][l], gap)
    new[P["y"]] = _br_demand(mech, i, res, price)


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class Step:
    round: int
    agent: str
    utility_before: float
    utility_after: float
    change: float
    gap: float
    loads: dict[str, float]


@dataclass
class DynamicsTrace:
    links: tuple[str, ...]
    steps: list[Step] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    converged: bool = False
    error: str | None = None
    final: Profile | None = None

    @property
    def rounds_run(self) -> int:
        return len(self.rounds)

    def min_improvement(self) -> float:
        return min((s.utility_after - s.utility_before for s in self.steps), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "agent", "utility", "gap"] + [f"load_{l}" for l in self.links])
        for st in self.steps:
            w.writerow([st.round, st.agent, repr(st.utility_after), repr(st.gap)]
                       + [repr(st.loads[l]) for l in self.links])
        return buf.getvalue()


def _loads(mech, x):
    s = mech.sets
    if mech.protocol == UTP:
        return {l: float(sum(x[s.agent_index[i]] for i in s.users[l])) for l in s.links}
    return {l: float(sum(max(x[s.agent_index[i]] for i in s.group_users[(k, l)]) for k in s.groups_on[l]))
            for l in s.links}


def run_dynamics(mech: Mechanism, init: Profile, rounds: int = 50, order: str = "roundrobin",
                 seed: int | None = None, solution: CentralSolution | None = None,
                 stop_tol: float = 1e-10) -> DynamicsTrace:
    """Sequential best-response sweeps; records every step, claims nothing about convergence."""
    if order not in ("roundrobin", "random"):
        raise ValueError(f"order must be 'roundrobin' or 'random', got {order!r}")
    rng = np.random.default_rng(seed)
    profile = init.copy()
    trace = DynamicsTrace(mech.sets.links)
    agents = list(mech.sets.agents)
    for rnd in range(1, rounds + 1):
        seq = agents if order == "roundrobin" else [agents[k] for k in rng.permutation(len(agents))]
        biggest = 0.0
        for i in seq:
            try:
                before = mech.utility(profile, i)[0]
                msg = best_response(mech, profile, i)
                old = profile.message(i)
                profile.values[mech.layout.slices[i]] = msg
                after = mech.utility(profile, i)[0]
                x = mech.outcome(profile).x
            except (MechanismError, ValueError) as exc:
                err = DynamicsError(rnd, i, exc)
                trace.error = str(err)
                trace.final = profile
                err.trace = trace
                raise err from exc
            change = float(np.max(np.abs(msg - old))) if len(msg) else 0.0
            biggest = max(biggest, change)
            gap = float(np.max(np.abs(x - solution.x))) if solution is not None else math.nan
            trace.steps.append(Step(rnd, i, before, after, change, gap, _loads(mech, x)))
        out = mech.outcome(profile)
        trace.rounds.append({
            "round": rnd,
            "profile": profile.values.copy(),
            "x": out.x,
            "t": out.t,
            "utility": dict(out.utility),
            "gap": float(np.max(np.abs(out.x - solution.x))) if solution is not None else math.nan,
        })
        if biggest < stop_tol:
            trace.converged = True
            break
    trace.final = profile
    return trace
