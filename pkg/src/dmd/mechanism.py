"""Shared machinery of the two mechanisms.

A mechanism object binds an instance to a message tree (plus phi, leaders
and link covers) and precomputes, for every agent, the flat indices of
all message components that agent's allocation and tax read. Evaluation
then works on plain Python floats, which keeps per-agent evaluation cheap
and makes locality exact: an agent's outcome is computed only from the
indices listed for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    MessageTree,
    build_link_covers,
    build_neighbor_directory,
    check_link_connectivity,
    extended_link_neighbors,
)
from .instance import ProblemInstance, derive_index_sets, sorted_ids
from .messages import Layout, Profile, ProfileError


class MechanismError(ValueError):
    """Base class for evaluation errors of a mechanism."""


class ConfigurationError(MechanismError):
    """The message tree cannot support the requested mechanism variant."""


class RadialError(MechanismError):
    """Every load estimate of an agent is zero while its demand is positive."""


@dataclass
class AgentResult:
    agent: str
    x: float
    r: float
    f: dict[str, float]
    breakdown: dict[str, float]
    per_link: dict[str, float]
    extras: dict = field(default_factory=dict)

    @property
    def tax(self) -> float:
        return sum(self.breakdown.values())


@dataclass
class Outcome:
    agents: tuple[str, ...]
    results: dict[str, AgentResult]
    utility: dict[str, float]
    domain_flags: dict[str, bool]

    @property
    def x(self) -> np.ndarray:
        return np.array([self.results[a].x for a in self.agents])

    @property
    def t(self) -> np.ndarray:
        return np.array([self.results[a].tax for a in self.agents])

    @property
    def r(self) -> np.ndarray:
        return np.array([self.results[a].r for a in self.agents])

    def to_dict(self) -> dict:
        return {
            a: {
                "x": self.results[a].x,
                "tax": self.results[a].tax,
                "r": self.results[a].r,
                "utility": self.utility[a],
                "f": self.results[a].f,
                "tax_terms": self.results[a].breakdown,
            }
            for a in self.agents
        }


@dataclass(frozen=True)
class DimensionReport:
    per_agent: dict[str, int]
    formula: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_agent.values())

    @property
    def formula_total(self) -> int:
        return sum(self.formula.values())

    @property
    def matches(self) -> bool:
        return self.per_agent == self.formula


class Mechanism:
    """Common base; subclasses define the layout, own-load term and taxes."""

    protocol = ""

    def __init__(self, instance: ProblemInstance, tree: MessageTree, phi=None, extended: bool = False):
        if instance.protocol != self.protocol:
            raise ConfigurationError(
                f"{type(self).__name__} needs a {self.protocol!r} instance, got {instance.protocol!r}"
            )
        self.instance = instance
        self.sets = derive_index_sets(instance)
        self.tree = tree
        self.directory = build_neighbor_directory(tree, self.sets, phi)
        self.extended = extended
        self.cover = build_link_covers(tree, self.sets)
        self.link_connected = check_link_connectivity(tree, self.sets)
        if extended:
            self.link_neighbors = extended_link_neighbors(self.directory, self.cover)
            self.price_links = {
                i: sorted_ids(set(self.sets.routes[i]) | self.cover.relay_links[i])
                for i in self.sets.agents
            }
        else:
            self.link_neighbors = self.directory.link_neighbors
            self.price_links = {i: sorted_ids(self.sets.routes[i]) for i in self.sets.agents}
        self.layout = self._build_layout()
        self._prepare()

    # -- subclass hooks -------------------------------------------------
    def _build_layout(self) -> Layout:
        raise NotImplementedError

    def _prepare_agent(self, i: str) -> dict:
        raise NotImplementedError

    def _evaluate(self, vals, i: str, with_tax: bool = True) -> AgentResult:
        raise NotImplementedError

    def formula_dimension(self, i: str) -> int:
        raise NotImplementedError

    def _demand_source(self, j: str, l: str):
        """Flat index of y_j^l, or None when l is not on j's route."""
        raise NotImplementedError

    # -- precomputation -------------------------------------------------
    def _idx(self, agent, *key) -> int:
        return self.layout.index[(agent, tuple(key))]

    def _prepare(self):
        sets, d = self.sets, self.directory
        self._prep = {}
        for i in sets.agents:
            nb = []
            for l in sets.links:
                parts = []
                for j in d.neighbors[i]:
                    others = [self._idx(j, "n", h, l) for h in d.neighbors[j] if h != i]
                    parts.append((self._idx(i, "n", j, l), self._demand_source(j, l), others))
                nb.append((l, sets.capacity[l], parts))
            base = {
                "y": self._idx(i, "y"),
                "q_phi": self._idx(d.phi[i], "q", i) if i in d.phi else None,
                "links": nb,
                "missing": {
                    l for l in self.price_links[i] if not self.link_neighbors.get((i, l))
                },
            }
            base.update(self._prepare_agent(i))
            self._prep[i] = base

    # -- evaluation pieces ------------------------------------------------
    @staticmethod
    def _neighbour_terms(vals, links):
        """Per link: neighbour part of the load estimate and the summary penalty."""
        nsum, summary = {}, {}
        for l, _, parts in links:
            tot = 0.0
            pen = 0.0
            for own_n, ysrc, others in parts:
                s = vals[ysrc] if ysrc is not None else 0.0
                for k in others:
                    s += vals[k]
                tot += s
                pen += (vals[own_n] - s) ** 2
            nsum[l] = tot
            summary[l] = pen
        return nsum, summary

    def _radial(self, i, f, y):
        r = math.inf
        for l, c, _ in self._prep[i]["links"]:
            fl = f[l]
            if fl > 0:
                r = min(r, c / fl)
        if r == math.inf:
            if y > 0:
                raise RadialError(
                    f"unbounded radial factor for agent {i!r}: every load estimate is zero but y = {y}"
                )
            return r, 0.0
        return r, r * y

    @staticmethod
    def _gap(c, r, fl):
        """c - r f, with r f read as 0 when f = 0 (covers r = inf)."""
        return c - (r * fl if fl > 0 else 0.0)

    def _require_neighbours(self, i, l):
        if l in self._prep[i]["missing"]:
            hint = "" if self.extended else "; use the extended variant (extended=True)"
            raise ConfigurationError(
                f"agent {i!r} has no neighbour sharing link {l!r} in the message tree{hint}"
            )

    # -- public API -------------------------------------------------------
    def _vals(self, profile):
        if isinstance(profile, Profile):
            if profile.layout is not self.layout and profile.layout != self.layout:
                raise ProfileError("profile layout does not belong to this mechanism")
            return profile.values.tolist()
        if isinstance(profile, np.ndarray):
            return profile.tolist()
        return profile

    def evaluate_agent(self, profile, agent: str) -> AgentResult:
        return self._evaluate(self._vals(profile), agent)

    def allocate(self, profile) -> dict[str, AgentResult]:
        """Load estimates, radial factors and rates only (taxes left empty)."""
        vals = self._vals(profile)
        return {i: self._evaluate(vals, i, False) for i in self.sets.agents}

    def evaluate(self, profile) -> dict[str, AgentResult]:
        vals = self._vals(profile)
        return {i: self._evaluate(vals, i) for i in self.sets.agents}

    def tax(self, profile) -> dict[str, float]:
        return {i: res.tax for i, res in self.evaluate(profile).items()}

    def utility_from_result(self, res: AgentResult) -> tuple[float, bool]:
        v = self.sets.valuation[res.agent]
        if res.x <= 0 and not v.finite_at_zero:
            return -math.inf, True
        return v.eval(max(res.x, 0.0)) - res.tax, False

    def utility(self, profile, agent: str) -> tuple[float, bool]:
        """(utility, domain_flag); the flag is set when the value is the -inf sentinel."""
        return self.utility_from_result(self.evaluate_agent(profile, agent))

    def utility_value(self, vals, agent: str) -> float:
        return self.utility_from_result(self._evaluate(vals, agent))[0]

    def outcome(self, profile) -> Outcome:
        results = self.evaluate(profile)
        util, flags = {}, {}
        for i, res in results.items():
            util[i], flags[i] = self.utility_from_result(res)
        return Outcome(self.sets.agents, results, util, flags)

    def dimension(self) -> DimensionReport:
        return DimensionReport(
            {i: self.layout.dimension(i) for i in self.sets.agents},
            {i: self.formula_dimension(i) for i in self.sets.agents},
        )

    def zero_profile(self) -> Profile:
        return Profile(self.layout)

    def own_indices(self, agent: str) -> range:
        s = self.layout.slices[agent]
        return range(s.start, s.stop)

    def neighbourhood(self, agent: str) -> set[str]:
        return {agent, *self.directory.neighbors[agent]}
