"""Problem instances: links, agents, routes, groups, and admissibility checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

from .valuations import ValuationSpec

UTP = "utp"
MMTP = "mmtp"
PROTOCOLS = (UTP, MMTP)


class InstanceError(ValueError):
    """Structural problem with an instance (duplicate ids, empty routes, ...)."""


def id_key(ident: str):
    """Sort key for opaque ids: numeric strings sort numerically, before others."""
    s = str(ident)
    if s.isdigit():
        return (0, int(s), s)
    return (1, 0, s)


def sorted_ids(ids: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(ids, key=id_key))


class IdSet(frozenset):
    """frozenset of ids that iterates in id order.

    Sums over agents or links then run in the same order in every process,
    independent of string hash randomisation.
    """

    __slots__ = ()

    def __iter__(self):
        return iter(sorted(frozenset.__iter__(self), key=id_key))

    def __repr__(self):
        return f"IdSet({list(self)!r})"


@dataclass(frozen=True)
class LinkSpec:
    id: str
    capacity: float

    def __post_init__(self):
        if not self.capacity > 0:
            raise InstanceError(f"link {self.id!r}: capacity must be positive, got {self.capacity}")


@dataclass(frozen=True)
class AgentSpec:
    id: str
    links: tuple[str, ...]
    valuation: ValuationSpec
    group: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))


@dataclass(frozen=True)
class ProblemInstance:
    protocol: str
    links: tuple[LinkSpec, ...]
    agents: tuple[AgentSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.protocol not in PROTOCOLS:
            raise InstanceError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        link_ids = [l.id for l in self.links]
        agent_ids = [a.id for a in self.agents]
        for kind, ids in (("link", link_ids), ("agent", agent_ids)):
            seen = set()
            for i in ids:
                if i in seen:
                    raise InstanceError(f"duplicate {kind} id {i!r}")
                seen.add(i)
        known = set(link_ids)
        for a in self.agents:
            if not a.links:
                raise InstanceError(f"agent {a.id!r} has an empty route")
            if len(set(a.links)) != len(a.links):
                raise InstanceError(f"agent {a.id!r} lists a link twice")
            missing = [l for l in a.links if l not in known]
            if missing:
                raise InstanceError(f"agent {a.id!r} routes over unknown links {missing}")
            if self.protocol == MMTP and a.group is None:
                raise InstanceError(f"MMTP agent {a.id!r} has no group")

    def agent(self, ident: str) -> AgentSpec:
        for a in self.agents:
            if a.id == ident:
                return a
        raise KeyError(ident)

    def with_protocol(self, protocol: str) -> "ProblemInstance":
        return ProblemInstance(protocol, self.links, self.agents)


@dataclass(frozen=True)
class IndexSets:
    """Dense indexing and the derived sets N^l, K^l, G_k^l, L_i, k(i)."""

    agents: tuple[str, ...]
    links: tuple[str, ...]
    capacity: dict[str, float]
    routes: dict[str, frozenset[str]]
    users: dict[str, frozenset[str]]
    valuation: dict[str, ValuationSpec]
    group_of: dict[str, str] = field(default_factory=dict)
    groups: dict[str, frozenset[str]] = field(default_factory=dict)
    groups_on: dict[str, frozenset[str]] = field(default_factory=dict)
    group_users: dict[tuple[str, str], frozenset[str]] = field(default_factory=dict)

    @cached_property
    def agent_index(self) -> dict[str, int]:
        return {a: n for n, a in enumerate(self.agents)}

    @cached_property
    def link_index(self) -> dict[str, int]:
        return {l: n for n, l in enumerate(self.links)}

    @cached_property
    def group_pairs(self) -> tuple[tuple[str, str], ...]:
        """(group, link) pairs with a nonempty G_k^l, in canonical order."""
        return tuple(
            (k, l) for l in self.links for k in sorted_ids(self.groups_on.get(l, ()))
        )

    @cached_property
    def memberships(self) -> tuple[tuple[str, str], ...]:
        """(agent, link) pairs with l in L_i, in canonical order."""
        return tuple((i, l) for i in self.agents for l in self.links if l in self.routes[i])


def derive_index_sets(instance: ProblemInstance) -> IndexSets:
    agents = sorted_ids(a.id for a in instance.agents)
    links = sorted_ids(l.id for l in instance.links)
    routes = {a.id: IdSet(a.links) for a in instance.agents}
    users = {l: IdSet(i for i in agents if l in routes[i]) for l in links}
    sets = dict(
        agents=agents,
        links=links,
        capacity={l.id: float(l.capacity) for l in instance.links},
        routes=routes,
        users=users,
        valuation={a.id: a.valuation for a in instance.agents},
    )
    if instance.protocol == MMTP:
        group_of = {a.id: a.group for a in instance.agents}
        groups: dict[str, set[str]] = {}
        for i, k in group_of.items():
            groups.setdefault(k, set()).add(i)
        group_users = {}
        groups_on = {}
        for l in links:
            ks = set()
            for k, members in groups.items():
                g = IdSet(frozenset(members) & users[l])
                if g:
                    group_users[(k, l)] = g
                    ks.add(k)
            groups_on[l] = IdSet(ks)
        sets.update(
            group_of=group_of,
            groups={k: IdSet(v) for k, v in groups.items()},
            groups_on=groups_on,
            group_users=group_users,
        )
    return IndexSets(**sets)


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [v.__dict__ for v in self.violations],
        }


def validate_instance(instance: ProblemInstance) -> ValidationReport:
    """Check the standing competition assumptions of the instance.

    UTP needs at least two users on every link; MMTP needs at least two
    groups on every link. Structural problems are raised on construction
    of the instance, so every report here is about admissibility only.
    """
    sets = derive_index_sets(instance)
    out = []
    for l in sets.links:
        if instance.protocol == UTP:
            if len(sets.users[l]) < 2:
                out.append(Violation(
                    "N^l>=2", l,
                    f"link {l!r} is used by {len(sets.users[l])} agent(s); at least two are required",
                ))
        else:
            if len(sets.groups_on[l]) < 2:
                out.append(Violation(
                    "K^l>=2", l,
                    f"link {l!r} is used by {len(sets.groups_on[l])} group(s); at least two are required",
                ))
    return ValidationReport(tuple(out))
