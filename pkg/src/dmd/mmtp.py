"""Multirate multicast mechanism.

Compared with unicast, each agent additionally reports a group-demand
share s, a group price w, per-link prices p1 (with proxies p2 quoted by
the agent's phi-neighbour), correction terms a1/a2 and, on links it leads,
the group maximum z1 and the number of members attaining it z2.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import LeaderAssignment, assign_group_leaders
from .instance import MMTP
from .mechanism import AgentResult, ConfigurationError, Mechanism, MechanismError
from .messages import Layout, build_layout
from .oracle import TIE_TOL

COMMON_TERMS = ("proxy_price", "proxy_a", "proxy_demand")
LINK_TERMS = (
    "price_rate", "summary", "share", "slackness", "group_price", "free_rider",
    "leader_consensus", "leader_price", "z_max", "z_count", "relay_consensus", "relay_slackness",
)


def attains(value: float, top: float, tol: float = TIE_TOL) -> bool:
    """Indicator that ``value`` equals the group maximum ``top`` (relative tolerance)."""
    return abs(value - top) <= tol * max(abs(value), abs(top))


@dataclass(frozen=True)
class GroupStat:
    zmax: float
    count: float
    attains: bool
    share: float


class MmtpMechanism(Mechanism):
    protocol = MMTP

    def __init__(self, instance, tree, phi=None, extended=False, leaders: LeaderAssignment | None = None,
                 rng=None):
        self._leaders_arg = leaders
        self._rng = rng
        super().__init__(instance, tree, phi, extended)

    def _build_layout(self) -> Layout:
        s, d = self.sets, self.directory
        leaders = self._leaders_arg or assign_group_leaders(self.tree, s, self._rng)
        if not leaders.ok:
            raise ConfigurationError(
                "no group leader adjacent to all other members for (group, link) pairs "
                f"{list(leaders.violations)}"
            )
        self.leaders = leaders
        return build_layout(MMTP, s.agents, d.neighbors, s.links, s.routes, d.proxied,
                            self.price_links, leaders.leads)

    def _demand_source(self, j, l):
        return self._idx(j, "s", l) if l in self.sets.routes[j] else None

    def _prepare_agent(self, i):
        s, d = self.sets, self.directory
        idx = self._idx
        k = s.group_of[i]
        phi = d.phi[i]
        common = []
        for j in d.proxied[i]:
            for l in sorted(s.routes[j]):
                common.append((idx(i, "p2", j, l), idx(j, "p1", l), idx(i, "a2", j, l), idx(j, "a1", l)))
        own = {}
        for l in s.routes[i]:
            c = self.leaders.leader[(k, l)]
            members = s.group_users[(k, l)]
            entry = {
                "leader": c == i,
                "p1": idx(i, "p1", l),
                "a1": idx(i, "a1", l),
                "s": idx(i, "s", l),
                "w": idx(i, "w", l),
                "p2phi": idx(phi, "p2", i, l),
                "a2phi": idx(phi, "a2", i, l),
                "wnb": [idx(j, "w", l) for j in self.link_neighbors.get((i, l), ())],
            }
            if c == i:
                others = [j for j in members if j != i]
                entry.update(
                    y_others=[idx(j, "y") for j in others],
                    p1_others=[idx(j, "p1", l) for j in others],
                    z1=idx(i, "z1", l),
                    z2=idx(i, "z2", l),
                )
            else:
                entry.update(z1c=idx(c, "z1", l), z2c=idx(c, "z2", l), wc=idx(c, "w", l))
            own[l] = entry
        relay = {}
        if self.extended:
            for l in self.cover.relay_links[i]:
                relay[l] = (idx(i, "w", l), [idx(j, "w", l) for j in self.link_neighbors.get((i, l), ())])
        return {
            "route": s.routes[i],
            "proxy": [(idx(i, "q", j), idx(j, "y")) for j in d.proxied[i]],
            "common": common,
            "own": own,
            "relay": relay,
        }

    def formula_dimension(self, i):
        s, d = self.sets, self.directory
        Li = len(s.routes[i])
        extra = len(self.cover.relay_links[i]) if self.extended else 0
        return (1 + 4 * Li + len(d.neighbors[i]) * len(s.links) + len(d.proxied[i])
                + 2 * sum(len(s.routes[j]) for j in d.proxied[i]) + 2 * len(self.leaders.leads[i]) + extra)

    def _group_stat(self, vals, i, l, entry, q) -> GroupStat:
        if entry["leader"]:
            ys = [vals[k] for k in entry["y_others"]]
            top = max([q] + ys)
            count = float(attains(q, top) + sum(attains(y, top) for y in ys))
        else:
            top = vals[entry["z1c"]]
            count = vals[entry["z2c"]]
        hit = attains(q, top)
        if hit and q != 0.0:
            if count == 0:
                raise MechanismError(
                    f"agent {i!r}, link {l!r}: demand attains the group maximum but the "
                    "reported count of maximal members is zero"
                )
            share = q / count
        else:
            share = 0.0
        return GroupStat(top, count, hit, share)

    def group_stats(self, profile) -> dict[tuple[str, str], GroupStat]:
        vals = self._vals(profile)
        out = {}
        for i in self.sets.agents:
            P = self._prep[i]
            q = vals[P["q_phi"]]
            for l, entry in P["own"].items():
                out[(i, l)] = self._group_stat(vals, i, l, entry, q)
        return out

    def _evaluate(self, vals, i, with_tax=True) -> AgentResult:
        P = self._prep[i]
        y = vals[P["y"]]
        q = vals[P["q_phi"]]
        nsum, summary = self._neighbour_terms(vals, P["links"])
        stats = {l: self._group_stat(vals, i, l, e, q) for l, e in P["own"].items()}
        f = {l: (stats[l].share + nsum[l]) if l in stats else nsum[l] for l in nsum}
        r, x = self._radial(i, f, y)
        if not with_tax:
            return AgentResult(i, x, r, f, {}, {}, {"stats": stats})

        terms = dict.fromkeys(COMMON_TERMS + LINK_TERMS, 0.0)
        for p2, p1, a2, a1 in P["common"]:
            terms["proxy_price"] += (vals[p2] - vals[p1]) ** 2
            terms["proxy_a"] += (vals[a2] - vals[a1]) ** 2
        for qi, yi in P["proxy"]:
            terms["proxy_demand"] += (vals[qi] - vals[yi]) ** 2
        per_link = {}
        what, wbar_of = {}, {}
        for l, c, _ in P["links"]:
            t = {"summary": summary[l]}
            gap = self._gap(c, r, f[l])
            if l in P["own"]:
                self._require_neighbours(i, l)
                e = P["own"][l]
                st = stats[l]
                p2phi = vals[e["p2phi"]]
                p1 = vals[e["p1"]]
                w = vals[e["w"]]
                wbar = sum(vals[k] for k in e["wnb"]) / len(e["wnb"])
                corr = vals[e["a1"]] - vals[e["a2phi"]]
                if e["leader"]:
                    others_p1 = sum(vals[k] for k in e["p1_others"])
                    w_hat = others_p1 + p1 + corr
                    t["z_max"] = (vals[e["z1"]] - st.zmax) ** 2
                    t["z_count"] = (vals[e["z2"]] - st.count) ** 2
                    t["leader_price"] = (w - p2phi - others_p1) ** 2
                else:
                    wc = vals[e["wc"]]
                    w_hat = wc - p2phi + p1 + corr
                    t["leader_consensus"] = (w - wc) ** 2
                t["price_rate"] = p2phi * x
                t["share"] = (vals[e["s"]] - st.share) ** 2
                t["slackness"] = wbar * (w_hat - wbar) * gap * gap
                t["group_price"] = (w_hat - wbar) ** 2
                t["free_rider"] = p2phi * (p1 - p2phi) * (st.zmax - q) ** 2
                what[l], wbar_of[l] = w_hat, wbar
            elif l in P["relay"]:
                self._require_neighbours(i, l)
                own_w, nb = P["relay"][l]
                w = vals[own_w]
                wbar = sum(vals[k] for k in nb) / len(nb)
                t["relay_consensus"] = (w - wbar) ** 2
                t["relay_slackness"] = wbar * (w - wbar) * gap * gap
                wbar_of[l] = wbar
            for name, v in t.items():
                terms[name] += v
            per_link[l] = sum(t.values())
        return AgentResult(i, x, r, f, terms, per_link, {"stats": stats, "w_hat": what, "w_bar": wbar_of})


def mmtp_group_stats(profile, mechanism: MmtpMechanism):
    return mechanism.group_stats(profile)


def mmtp_allocate(profile, mechanism: MmtpMechanism):
    return {i: (res.f, res.r, res.x) for i, res in mechanism.allocate(profile).items()}


def mmtp_what(profile, mechanism: MmtpMechanism, agent, link):
    """(w_hat, w_bar) of ``agent`` on a link of its route."""
    if link not in mechanism.sets.routes[agent]:
        raise ValueError(f"link {link!r} is not on the route of agent {agent!r}")
    res = mechanism.evaluate_agent(profile, agent)
    return res.extras["w_hat"][link], res.extras["w_bar"][link]


def mmtp_tax(profile, mechanism: MmtpMechanism):
    return {i: res.breakdown for i, res in mechanism.evaluate(profile).items()}


def mmtp_utility(profile, mechanism: MmtpMechanism, agent):
    return mechanism.utility(profile, agent)


def mmtp_dimension(mechanism: MmtpMechanism):
    return mechanism.dimension()


def mmtp_tax_extended(profile, mechanism: MmtpMechanism):
    """Taxes of the relay variant; relay agents also pay for their quoted group prices."""
    if not mechanism.extended:
        raise ValueError("mmtp_tax_extended needs a mechanism built with extended=True")
    return mmtp_tax(profile, mechanism)
