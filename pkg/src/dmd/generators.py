"""Seeded instance generators for tests, demos and experiments."""

from __future__ import annotations

import numpy as np

from .graph import MessageTree, assign_group_leaders, check_link_connectivity, induces_connected
from .instance import MMTP, UTP, AgentSpec, LinkSpec, ProblemInstance, derive_index_sets
from .valuations import FAMILIES, ValuationSpec


def reference_instance():
    """Three agents on one unit-capacity link, v_i = i ln x, tree 1-2, 1-3, phi(1) = 2."""
    inst = ProblemInstance(
        UTP,
        [LinkSpec("1", 1.0)],
        [AgentSpec(str(i), ("1",), ValuationSpec("scaled-log", float(i))) for i in (1, 2, 3)],
    )
    tree = MessageTree(("1", "2", "3"), (("1", "2"), ("1", "3")))
    return inst, tree, {"1": "2"}


def random_tree(n: int, rng, max_degree: int = 3) -> MessageTree:
    nodes = [str(k) for k in range(1, n + 1)]
    degree = {v: 0 for v in nodes}
    edges = []
    for k in range(1, n):
        choices = [v for v in nodes[:k] if degree[v] < max_degree]
        parent = choices[int(rng.integers(len(choices)))]
        edges.append((parent, nodes[k]))
        degree[parent] += 1
        degree[nodes[k]] += 1
    return MessageTree(tuple(nodes), tuple(edges))


def random_connected_subset(tree: MessageTree, rng, size: int) -> set[str]:
    start = tree.nodes[int(rng.integers(len(tree.nodes)))]
    chosen = {start}
    while len(chosen) < size:
        frontier = sorted({v for u in chosen for v in tree.adjacency[u]} - chosen)
        if not frontier:
            break
        chosen.add(frontier[int(rng.integers(len(frontier)))])
    return chosen


def random_valuation(rng, families=FAMILIES) -> ValuationSpec:
    fam = families[int(rng.integers(len(families)))]
    a = float(rng.uniform(0.5, 3.0))
    if fam == "power":
        return ValuationSpec(fam, a, float(rng.uniform(0.3, 0.8)))
    return ValuationSpec(fam, a)


def _cover_agents(tree, users, rng):
    """Grow link user sets until every agent is on some link (keeps each set connected)."""
    covered = set().union(*users.values())
    while len(covered) < len(tree.nodes):
        options = []
        for i in tree.nodes:
            if i in covered:
                continue
            for l, members in users.items():
                if any(j in members for j in tree.adjacency[i]):
                    options.append((i, l))
        i, l = options[int(rng.integers(len(options)))]
        users[l].add(i)
        covered.add(i)
    return users


def _build(protocol, tree, users, rng, capacity=(0.5, 2.0), groups=None, families=FAMILIES):
    links = [LinkSpec(l, float(rng.uniform(*capacity))) for l in sorted(users)]
    agents = []
    for i in tree.nodes:
        route = tuple(l for l in sorted(users) if i in users[l])
        agents.append(AgentSpec(i, route, random_valuation(rng, families),
                                groups[i] if groups is not None else None))
    return ProblemInstance(protocol, links, agents)


def _random_users(tree, rng, n_links, connected=True):
    n = len(tree.nodes)
    users = {}
    for m in range(1, n_links + 1):
        size = int(rng.integers(2, min(n, 4) + 1))
        users[f"L{m}"] = random_connected_subset(tree, rng, size)
    return _cover_agents(tree, users, rng)


def random_utp_instance(rng, n_agents=(3, 8), n_links=(1, 4), max_degree=3, families=FAMILIES):
    """Random unicast instance on a random tree; every link's users are connected."""
    n = int(rng.integers(n_agents[0], n_agents[1] + 1))
    L = int(rng.integers(n_links[0], n_links[1] + 1))
    tree = random_tree(n, rng, max_degree)
    users = _random_users(tree, rng, L)
    inst = _build(UTP, tree, users, rng, families=families)
    assert all(check_link_connectivity(tree, derive_index_sets(inst)).values())
    return inst, tree


def _random_groups(tree, users, rng, n_groups, attempts=500):
    nodes = tree.nodes
    for _ in range(attempts):
        groups = {i: f"G{int(rng.integers(1, n_groups + 1))}" for i in nodes}
        ok = all(len({groups[i] for i in members}) >= 2 for members in users.values())
        if not ok:
            continue
        inst = ProblemInstance(
            MMTP, [LinkSpec(l, 1.0) for l in users],
            [AgentSpec(i, tuple(l for l in sorted(users) if i in users[l]), ValuationSpec("scaled-log", 1.0),
                       groups[i]) for i in nodes],
        )
        if assign_group_leaders(tree, derive_index_sets(inst)).ok:
            return groups
    return None


def random_mmtp_instance(rng, n_agents=(3, 8), n_groups=(2, 3), n_links=(1, 3), max_degree=3,
                         families=FAMILIES):
    """Random multicast instance whose tree satisfies connectivity and leader adjacency."""
    while True:
        n = int(rng.integers(n_agents[0], n_agents[1] + 1))
        L = int(rng.integers(n_links[0], n_links[1] + 1))
        G = int(rng.integers(n_groups[0], n_groups[1] + 1))
        tree = random_tree(n, rng, max_degree)
        users = _random_users(tree, rng, L)
        groups = _random_groups(tree, users, rng, G)
        if groups is not None:
            return _build(MMTP, tree, users, rng, groups=groups, families=families), tree


def random_disconnected_instance(rng, protocol=UTP, n_agents=(4, 8), n_links=(1, 3), families=FAMILIES):
    """Instance where at least one link's users do not induce a connected subtree."""
    while True:
        n = int(rng.integers(n_agents[0], n_agents[1] + 1))
        tree = random_tree(n, rng, 3)
        L = int(rng.integers(n_links[0], n_links[1] + 1))
        users = {}
        # first link: two nodes at tree distance >= 2
        pairs = [(a, b) for a in tree.nodes for b in tree.nodes
                 if a < b and len(tree.path(a, b)) >= 3]
        a, b = pairs[int(rng.integers(len(pairs)))]
        users["L1"] = {a, b}
        for m in range(2, L + 1):
            size = int(rng.integers(2, min(n, 4) + 1))
            users[f"L{m}"] = set(rng.choice(tree.nodes, size=size, replace=False).tolist())
        users = _cover_agents(tree, users, rng)
        if all(induces_connected(tree, u) for u in users.values()):
            continue
        if protocol == UTP:
            return _build(UTP, tree, users, rng, families=families), tree
        groups = _random_groups(tree, users, rng, 3)
        if groups is not None:
            return _build(MMTP, tree, users, rng, groups=groups, families=families), tree


def random_small_instance(rng, max_vars=3, families=FAMILIES):
    """UTP instance with at most ``max_vars`` agents, for the grid oracle."""
    n = int(rng.integers(2, max_vars + 1))
    L = int(rng.integers(1, 3))
    nodes = tuple(str(k) for k in range(1, n + 1))
    tree = MessageTree(nodes, tuple((nodes[k - 1], nodes[k]) for k in range(1, n)))
    links = [LinkSpec(f"L{m}", float(rng.uniform(0.5, 1.5))) for m in range(1, L + 1)]
    agents = []
    for k, i in enumerate(nodes):
        route = [l.id for l in links if rng.random() < 0.6] or [links[k % L].id]
        agents.append(AgentSpec(i, tuple(route), random_valuation(rng, families)))
    return ProblemInstance(UTP, links, agents), tree


def dimension_family(n: int, protocol: str = UTP):
    """Path tree on n agents, two links used by everyone, pair groups (multicast).

    Node degrees, routes and group sizes are uniform in n, so total message
    dimension is affine in n.
    """
    if protocol == MMTP and n % 2:
        raise ValueError("multicast dimension family needs an even number of agents")
    nodes = tuple(str(k) for k in range(1, n + 1))
    tree = MessageTree(nodes, tuple((nodes[k - 1], nodes[k]) for k in range(1, n)))
    links = [LinkSpec("A", 1.0), LinkSpec("B", 1.0)]
    agents = [
        AgentSpec(i, ("A", "B"), ValuationSpec("scaled-log", 1.0),
                  f"G{k // 2}" if protocol == MMTP else None)
        for k, i in enumerate(nodes)
    ]
    return ProblemInstance(protocol, links, agents), tree
