"""Tree-shaped message-exchange network and the structures derived from it.

Everything here is computed once from the tree and the instance's index
sets: next hops n(i, j), the proxy assignment phi and its inverse sets
I_i, group leaders c(k, l), and the minimal connected link covers used
when some link's users do not induce a connected subtree.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

from .instance import IdSet, IndexSets, id_key, sorted_ids


class GraphError(ValueError):
    """Malformed message tree or an invalid phi override."""


@dataclass(frozen=True)
class MessageTree:
    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        nodes = sorted_ids(self.nodes)
        if len(set(nodes)) != len(nodes):
            raise GraphError("duplicate nodes in message tree")
        edges = []
        seen = set()
        for u, v in self.edges:
            u, v = str(u), str(v)
            if u == v:
                raise GraphError(f"self-loop on {u!r}")
            if u not in nodes or v not in nodes:
                raise GraphError(f"edge ({u!r}, {v!r}) references an unknown node")
            e = tuple(sorted((u, v), key=id_key))
            if e in seen:
                raise GraphError(f"duplicate edge {e}")
            seen.add(e)
            edges.append(e)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(sorted(edges, key=lambda e: (id_key(e[0]), id_key(e[1])))))
        if len(self.edges) != len(self.nodes) - 1:
            raise GraphError(
                f"a tree on {len(self.nodes)} nodes has {len(self.nodes) - 1} edges, got {len(self.edges)}"
            )
        if self.nodes and len(self.component(self.nodes[0])) != len(self.nodes):
            raise GraphError("message graph is not connected")

    @cached_property
    def adjacency(self) -> dict[str, tuple[str, ...]]:
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return {n: sorted_ids(nb) for n, nb in adj.items()}

    def component(self, start: str, allowed=None) -> set[str]:
        """Nodes reachable from ``start`` using only ``allowed`` nodes."""
        adj = self.adjacency
        seen = {start}
        todo = [start]
        while todo:
            u = todo.pop()
            for v in adj[u]:
                if v not in seen and (allowed is None or v in allowed):
                    seen.add(v)
                    todo.append(v)
        return seen

    def path(self, a: str, b: str) -> list[str]:
        """Unique tree path from a to b, endpoints included."""
        parent = {a: None}
        queue = deque([a])
        while queue:
            u = queue.popleft()
            if u == b:
                break
            for v in self.adjacency[u]:
                if v not in parent:
                    parent[v] = u
                    queue.append(v)
        out = [b]
        while out[-1] != a:
            out.append(parent[out[-1]])
        return out[::-1]


@dataclass(frozen=True)
class NeighborDirectory:
    neighbors: dict[str, tuple[str, ...]]
    next_hop: dict[tuple[str, str], str]
    phi: dict[str, str]
    proxied: dict[str, tuple[str, ...]]
    link_neighbors: dict[tuple[str, str], tuple[str, ...]]

    def behind(self, i: str, j: str) -> tuple[str, ...]:
        """Agents h != i with n(i, h) = j (the subtree hanging off i through j)."""
        return tuple(h for (a, h), nh in self.next_hop.items() if a == i and nh == j)


def build_neighbor_directory(
    tree: MessageTree,
    sets: IndexSets,
    phi_override: Mapping[str, str] | None = None,
) -> NeighborDirectory:
    if set(tree.nodes) != set(sets.agents):
        raise GraphError("message tree nodes must equal the instance's agents")
    adj = tree.adjacency
    next_hop = {}
    for i in tree.nodes:
        # BFS from i, remembering the first hop used to reach each node
        first = {}
        queue = deque()
        for j in adj[i]:
            first[j] = j
            queue.append(j)
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v != i and v not in first:
                    first[v] = first[u]
                    queue.append(v)
        for h, j in first.items():
            next_hop[(i, h)] = j

    phi = {}
    override = {str(k): str(v) for k, v in (phi_override or {}).items()}
    for i in tree.nodes:
        if not adj[i]:
            continue
        if i in override:
            if override[i] not in adj[i]:
                raise GraphError(f"phi({i!r}) = {override[i]!r} is not a neighbour of {i!r}")
            phi[i] = override[i]
        else:
            phi[i] = adj[i][0]
    unknown = set(override) - set(tree.nodes)
    if unknown:
        raise GraphError(f"phi override names unknown agents {sorted(unknown)}")

    proxied = {i: sorted_ids(h for h in adj[i] if phi.get(h) == i) for i in tree.nodes}
    link_neighbors = {}
    for l in sets.links:
        for i in sets.users[l]:
            link_neighbors[(i, l)] = tuple(j for j in adj[i] if j in sets.users[l])
    return NeighborDirectory(
        neighbors=dict(adj),
        next_hop=next_hop,
        phi=phi,
        proxied=proxied,
        link_neighbors=link_neighbors,
    )


def induces_connected(tree: MessageTree, nodes) -> bool:
    nodes = set(nodes)
    if len(nodes) <= 1:
        return True
    start = next(iter(nodes))
    return tree.component(start, allowed=nodes) == nodes


def check_link_connectivity(tree: MessageTree, sets: IndexSets) -> dict[str, bool]:
    """Per link: do the link's users induce a connected subgraph of the tree?"""
    return {l: induces_connected(tree, sets.users[l]) for l in sets.links}


@dataclass(frozen=True)
class LeaderAssignment:
    leader: dict[tuple[str, str], str]
    leads: dict[str, frozenset[str]]
    violations: tuple[tuple[str, str], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def assign_group_leaders(tree: MessageTree, sets: IndexSets, rng=None) -> LeaderAssignment:
    """Pick c(k, l) for every group/link pair.

    The leader must be a member adjacent to every other member. Ties go
    to the smallest id, or to a random eligible member when ``rng`` (a
    numpy Generator) is given.
    """
    adj = {n: set(v) for n, v in tree.adjacency.items()}
    leader = {}
    violations = []
    for pair in sets.group_pairs:
        members = sets.group_users[pair]
        eligible = [c for c in sorted_ids(members) if (members - {c}) <= adj[c]]
        if not eligible:
            violations.append(pair)
            continue
        if rng is not None:
            leader[pair] = eligible[int(rng.integers(len(eligible)))]
        else:
            leader[pair] = eligible[0]
    leads = {i: IdSet(l for (k, l), c in leader.items() if c == i) for i in sets.agents}
    return LeaderAssignment(leader=leader, leads=leads, violations=tuple(violations))


@dataclass(frozen=True)
class LinkCover:
    nodes: dict[str, frozenset[str]]
    relay_links: dict[str, frozenset[str]]


def build_link_covers(tree: MessageTree, sets: IndexSets) -> LinkCover:
    """Minimal connected subtree spanning each link's users.

    On a tree this is the union of paths from one anchor user to every
    other user.
    """
    nodes = {}
    for l in sets.links:
        users = sorted_ids(sets.users[l])
        cover = set(users[:1])
        for u in users[1:]:
            cover.update(tree.path(users[0], u))
        nodes[l] = IdSet(cover)
    relay = {
        i: IdSet(l for l in sets.links if i in nodes[l] and l not in sets.routes[i])
        for i in sets.agents
    }
    return LinkCover(nodes=nodes, relay_links=relay)


def extended_link_neighbors(
    directory: NeighborDirectory, cover: LinkCover
) -> dict[tuple[str, str], tuple[str, ...]]:
    """N^l(i) taken inside the link cover, for every i in the cover of l."""
    out = {}
    for l, members in cover.nodes.items():
        for i in members:
            out[(i, l)] = tuple(j for j in directory.neighbors[i] if j in members)
    return out
