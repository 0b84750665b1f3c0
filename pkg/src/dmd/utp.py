"""Unicast mechanism: radial allocation, five-term link taxes, relay prices."""

from __future__ import annotations

from .instance import UTP
from .mechanism import AgentResult, Mechanism
from .messages import Layout, build_layout

TERMS = ("price_rate", "summary", "proxy", "price_consensus", "slackness")


class UtpMechanism(Mechanism):
    protocol = UTP

    def _build_layout(self) -> Layout:
        s, d = self.sets, self.directory
        return build_layout(UTP, s.agents, d.neighbors, s.links, s.routes, d.proxied, self.price_links)

    def _demand_source(self, j, l):
        return self._idx(j, "y") if l in self.sets.routes[j] else None

    def _prepare_agent(self, i):
        s, d = self.sets, self.directory
        prices = {}
        for l in self.price_links[i]:
            prices[l] = (
                self._idx(i, "p", l),
                [self._idx(j, "p", l) for j in self.link_neighbors.get((i, l), ())],
            )
        return {
            "route": s.routes[i],
            "proxy": [(self._idx(i, "q", j), self._idx(j, "y")) for j in d.proxied[i]],
            "prices": prices,
        }

    def formula_dimension(self, i):
        s, d = self.sets, self.directory
        extra = len(self.cover.relay_links[i]) if self.extended else 0
        return 1 + len(d.neighbors[i]) * len(s.links) + len(d.proxied[i]) + len(s.routes[i]) + extra

    def _evaluate(self, vals, i, with_tax=True) -> AgentResult:
        P = self._prep[i]
        y = vals[P["y"]]
        nsum, summary = self._neighbour_terms(vals, P["links"])
        route = P["route"]
        qphi = vals[P["q_phi"]] if P["q_phi"] is not None else 0.0
        f = {l: (qphi + nsum[l]) if l in route else nsum[l] for l in nsum}
        r, x = self._radial(i, f, y)
        if not with_tax:
            return AgentResult(i, x, r, f, {}, {})

        terms = dict.fromkeys(TERMS, 0.0)
        per_link = {}
        proxy = 0.0
        for qi, yi in P["proxy"]:
            proxy += (vals[qi] - vals[yi]) ** 2
        pbar_of = {}
        for l, c, _ in P["links"]:
            link_tax = summary[l]
            terms["summary"] += summary[l]
            if l in P["prices"]:
                self._require_neighbours(i, l)
                own, nbrs = P["prices"][l]
                pbar = sum(vals[k] for k in nbrs) / len(nbrs)
                pbar_of[l] = pbar
                p = vals[own]
                gap = self._gap(c, r, f[l])
                cons = (p - pbar) ** 2
                slack = (p - pbar) * pbar * gap * gap
                terms["price_consensus"] += cons
                terms["slackness"] += slack
                link_tax += cons + slack
                if l in route:
                    rate = pbar * x
                    terms["price_rate"] += rate
                    terms["proxy"] += proxy
                    link_tax += rate + proxy
            per_link[l] = link_tax
        return AgentResult(i, x, r, f, terms, per_link, {"pbar": pbar_of})


def utp_allocate(profile, mechanism: UtpMechanism):
    """Per agent (f, r, x) without the tax evaluation."""
    return {i: (res.f, res.r, res.x) for i, res in mechanism.allocate(profile).items()}


def utp_tax(profile, mechanism: UtpMechanism):
    return {i: res.breakdown for i, res in mechanism.evaluate(profile).items()}


def utp_utility(profile, mechanism: UtpMechanism, agent):
    return mechanism.utility(profile, agent)


def utp_dimension(mechanism: UtpMechanism):
    return mechanism.dimension()


def utp_tax_extended(profile, mechanism: UtpMechanism):
    """Taxes of the relay variant; relay agents also pay for their quoted prices."""
    if not mechanism.extended:
        raise ValueError("utp_tax_extended needs a mechanism built with extended=True")
    return utp_tax(profile, mechanism)
