from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmd.generators import random_tree
from dmd.graph import (
    GraphError, MessageTree, assign_group_leaders, build_link_covers, build_neighbor_directory,
    check_link_connectivity, induces_connected,
)
from dmd.instance import MMTP, UTP, AgentSpec, LinkSpec, ProblemInstance, derive_index_sets
from dmd.valuations import ValuationSpec

LOG = ValuationSpec("scaled-log", 1.0)


def _path(n):
    nodes = tuple(str(k) for k in range(1, n + 1))
    return MessageTree(nodes, tuple((nodes[k - 1], nodes[k]) for k in range(1, n)))


def _sets(tree, link_users, groups=None):
    """Index sets for a tree where ``link_users`` maps link -> users; other agents get a filler link."""
    routes = {i: [l for l, u in link_users.items() if i in u] or ["_pad"] for i in tree.nodes}
    links = [LinkSpec(l, 1.0) for l in link_users] + [LinkSpec("_pad", 1.0)]
    protocol = MMTP if groups else UTP
    agents = [AgentSpec(i, tuple(routes[i]), LOG, groups[i] if groups else None) for i in tree.nodes]
    return derive_index_sets(ProblemInstance(protocol, links, agents))


def test_reference_phi_and_proxy_sets(reference):
    inst, tree, phi = reference
    d = build_neighbor_directory(tree, derive_index_sets(inst), phi)
    assert d.phi == {"1": "2", "2": "1", "3": "1"}
    assert d.proxied == {"1": ("2", "3"), "2": ("1",), "3": ()}
    assert d.next_hop[("2", "3")] == "1"


def test_next_hop_on_path():
    tree = _path(4)
    d = build_neighbor_directory(tree, _sets(tree, {"A": {"1", "2"}}))
    assert d.next_hop[("1", "4")] == "2"
    assert d.behind("2", "3") == ("3", "4")


def test_tree_errors():
    with pytest.raises(GraphError):
        MessageTree(("1", "2", "3"), (("1", "2"),))
    with pytest.raises(GraphError):
        MessageTree(("1", "2", "3", "4"), (("1", "2"), ("2", "1"), ("3", "4")))
    with pytest.raises(GraphError):
        MessageTree(("1", "2"), (("1", "9"),))
    with pytest.raises(GraphError):
        MessageTree(("1", "2", "3", "4"), (("1", "2"), ("1", "3"), ("2", "3")))


def test_phi_override_must_be_a_neighbour():
    tree = _path(3)
    with pytest.raises(GraphError):
        build_neighbor_directory(tree, _sets(tree, {"A": {"1", "2"}}), {"1": "3"})


def test_link_connectivity_examples(reference):
    inst, tree, _ = reference
    assert check_link_connectivity(tree, derive_index_sets(inst)) == {"1": True}
    path = _path(3)
    assert not induces_connected(path, {"1", "3"})
    assert induces_connected(path, set(path.nodes))


def test_leaders():
    star = MessageTree(("0", "1", "2", "3"), (("0", "1"), ("0", "2"), ("0", "3")))
    groups = {"0": "k", "1": "k", "2": "k", "3": "m"}
    sets = _sets(star, {"A": {"0", "1", "2", "3"}}, groups)
    la = assign_group_leaders(star, sets)
    assert la.ok
    assert la.leader[("k", "A")] == "0"
    assert la.leader[("m", "A")] == "3"  # singleton group leads itself

    path = _path(3)
    groups = {"1": "k", "2": "m", "3": "k"}
    la = assign_group_leaders(path, _sets(path, {"A": {"1", "2", "3"}}, groups))
    assert la.violations == (("k", "A"),)


def test_link_cover_on_path():
    path = _path(3)
    cover = build_link_covers(path, _sets(path, {"A": {"1", "3"}}))
    assert cover.nodes["A"] == {"1", "2", "3"}
    assert cover.relay_links["2"] == {"A"}
    assert cover.relay_links["1"] == set()


def test_connected_link_has_no_relays():
    path = _path(4)
    cover = build_link_covers(path, _sets(path, {"A": {"2", "3"}}))
    assert cover.nodes["A"] == {"2", "3"}
    assert all("A" not in cover.relay_links[i] for i in path.nodes)


def _minimal_superset(tree, users):
    """Smallest node set containing ``users`` whose induced subgraph is connected."""
    rest = [v for v in tree.nodes if v not in users]
    for size in range(len(rest) + 1):
        found = [set(users) | set(c) for c in combinations(rest, size)
                 if induces_connected(tree, set(users) | set(c))]
        if found:
            assert len(found) == 1
            return found[0]


def test_link_cover_star_matches_brute_force():
    star = MessageTree(("0", "a", "b", "c", "d"), tuple(("0", v) for v in "abcd"))
    cover = build_link_covers(star, _sets(star, {"L": {"a", "b"}}))
    assert cover.nodes["L"] == {"a", "0", "b"} == _minimal_superset(star, {"a", "b"})


def _union_find_connected(tree, nodes):
    parent = {v: v for v in nodes}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for u, v in tree.edges:
        if u in nodes and v in nodes:
            parent[find(u)] = find(v)
    return len({find(v) for v in nodes}) == 1


trees = st.tuples(st.integers(2, 30), st.integers(0, 2**32 - 1)).map(
    lambda t: (random_tree(t[0], np.random.default_rng(t[1]), max_degree=4), np.random.default_rng(t[1] + 1)))


@given(trees)
def test_next_hop_matches_components(data):
    tree, _ = data
    d = build_neighbor_directory(tree, _sets(tree, {"A": set(tree.nodes)}))
    for i in tree.nodes:
        for j in tree.adjacency[i]:
            # component of tree minus i containing j, by flood fill
            comp, stack = {j}, [j]
            while stack:
                u = stack.pop()
                for v in tree.adjacency[u]:
                    if v != i and v not in comp:
                        comp.add(v)
                        stack.append(v)
            assert {h for h in tree.nodes if h != i and d.next_hop[(i, h)] == j} == comp
            assert all(tree.path(i, h)[1] == j for h in comp)


@given(trees)
def test_link_connectivity_agrees_with_union_find(data):
    tree, rng = data
    size = int(rng.integers(2, len(tree.nodes) + 1))
    users = set(rng.choice(tree.nodes, size=size, replace=False).tolist())
    sets = _sets(tree, {"A": users})
    assert check_link_connectivity(tree, sets)["A"] == _union_find_connected(tree, users)


@given(trees)
def test_link_cover_is_minimal(data):
    tree, rng = data
    size = int(rng.integers(2, len(tree.nodes) + 1))
    users = set(rng.choice(tree.nodes, size=size, replace=False).tolist())
    nodes = build_link_covers(tree, _sets(tree, {"A": users})).nodes["A"]
    assert users <= nodes and induces_connected(tree, nodes)
    for v in nodes - users:
        assert not induces_connected(tree, nodes - {v})
