"""Message layouts and message profiles.

A layout fixes the canonical order of every message component of every
agent. Keys are tuples whose first entry names the block:

unicast:    ("y",) ("n", j, l) ("q", j) ("p", l)
multicast:  adds ("p1", l) in place of ("p", l), plus ("p2", j, l) ("s", l)
            ("w", l) ("z1", l) ("z2", l) ("a1", l) ("a2", j, l)

Agents are ordered by id, and inside an agent the blocks follow the order
above with neighbours and links sorted by id. Profiles are a layout plus a
flat float vector, which makes serialization deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .instance import sorted_ids

# a-components live in the open positive half-line; clamped to this floor
A_FLOOR = 1e-9

# JSON block name for each key head
_JSON_NAME = {"y": "y", "n": "n", "q": "q", "p": "p", "p1": "p", "p2": "p2", "s": "s",
              "w": "w", "z1": "z1", "z2": "z2", "a1": "a1", "a2": "a2"}
_UTP_BLOCKS = ("y", "n", "q", "p")
_MMTP_BLOCKS = ("y", "n", "q", "p1", "p2", "s", "w", "z1", "z2", "a1", "a2")


class ProfileError(ValueError):
    """Profile does not match its layout (missing, extra or negative components)."""


@dataclass(frozen=True)
class Layout:
    protocol: str
    agents: tuple[str, ...]
    keys: tuple[tuple[str, tuple], ...]  # (agent, key) in canonical order

    @cached_property
    def index(self) -> dict[tuple[str, tuple], int]:
        return {k: n for n, k in enumerate(self.keys)}

    @cached_property
    def slices(self) -> dict[str, slice]:
        out = {}
        start = 0
        counts: dict[str, int] = {}
        for a, _ in self.keys:
            counts[a] = counts.get(a, 0) + 1
        for a in self.agents:
            out[a] = slice(start, start + counts.get(a, 0))
            start += counts.get(a, 0)
        return out

    @cached_property
    def lower(self) -> np.ndarray:
        return np.array([A_FLOOR if key[0] in ("a1", "a2") else 0.0 for _, key in self.keys])

    @property
    def size(self) -> int:
        return len(self.keys)

    def own_keys(self, agent: str) -> tuple[tuple, ...]:
        return tuple(k for _, k in self.keys[self.slices[agent]])

    def dimension(self, agent: str) -> int:
        s = self.slices[agent]
        return s.stop - s.start

    def __len__(self) -> int:
        return len(self.keys)


def build_layout(protocol, agents, neighbors, links, routes, proxied, price_links, leads=None) -> Layout:
    """Enumerate message components.

    ``price_links[i]`` lists the links on which agent i quotes a price
    (p for unicast, w for multicast); it already includes relay links when
    the extended variant is used. ``leads[i]`` is the set of links on which
    i is a group leader (multicast only).
    """
    keys = []
    for i in agents:
        own = sorted_ids(routes[i])
        keys.append((i, ("y",)))
        for j in neighbors[i]:
            for l in links:
                keys.append((i, ("n", j, l)))
        for j in proxied[i]:
            keys.append((i, ("q", j)))
        if protocol == "utp":
            for l in sorted_ids(price_links[i]):
                keys.append((i, ("p", l)))
            continue
        for l in own:
            keys.append((i, ("p1", l)))
        for j in proxied[i]:
            for l in sorted_ids(routes[j]):
                keys.append((i, ("p2", j, l)))
        for l in own:
            keys.append((i, ("s", l)))
        for l in sorted_ids(price_links[i]):
            keys.append((i, ("w", l)))
        for l in sorted_ids(leads[i]):
            keys.append((i, ("z1", l)))
        for l in sorted_ids(leads[i]):
            keys.append((i, ("z2", l)))
        for l in own:
            keys.append((i, ("a1", l)))
        for j in proxied[i]:
            for l in sorted_ids(routes[j]):
                keys.append((i, ("a2", j, l)))
    return Layout(protocol, tuple(agents), tuple(keys))


class Profile:
    """A full message profile: one value per layout component."""

    __slots__ = ("layout", "values")

    def __init__(self, layout: Layout, values=None):
        self.layout = layout
        if values is None:
            values = layout.lower.copy()
        values = np.asarray(values, dtype=float)
        if values.shape != (layout.size,):
            raise ProfileError(f"expected {layout.size} components, got shape {values.shape}")
        self.values = values

    def __getitem__(self, item):
        agent, key = item
        return float(self.values[self.layout.index[(agent, key)]])

    def __setitem__(self, item, value):
        agent, key = item
        self.values[self.layout.index[(agent, key)]] = value

    def copy(self) -> "Profile":
        return Profile(self.layout, self.values.copy())

    def message(self, agent: str) -> np.ndarray:
        return self.values[self.layout.slices[agent]].copy()

    def with_message(self, agent: str, message) -> "Profile":
        out = self.copy()
        out.values[self.layout.slices[agent]] = message
        return out

    def scaled(self, factor: float) -> "Profile":
        return Profile(self.layout, self.values * factor)

    def check(self) -> None:
        bad = np.flatnonzero(~np.isfinite(self.values) | (self.values < self.layout.lower))
        if bad.size:
            agent, key = self.layout.keys[bad[0]]
            raise ProfileError(
                f"component {agent}:{key} = {self.values[bad[0]]} is outside its domain"
            )

    def to_dict(self) -> dict:
        out: dict = {}
        for (agent, key), v in zip(self.layout.keys, self.values.tolist()):
            block = out.setdefault(agent, {})
            name = _JSON_NAME[key[0]]
            if len(key) == 1:
                block[name] = v
                continue
            node = block.setdefault(name, {})
            for part in key[1:-1]:
                node = node.setdefault(part, {})
            node[key[-1]] = v
        return out

    @classmethod
    def from_dict(cls, layout: Layout, data: dict) -> "Profile":
        """Strict inverse of ``to_dict``: every component present, nothing extra."""
        heads = _UTP_BLOCKS if layout.protocol == "utp" else _MMTP_BLOCKS
        json_of = {h: _JSON_NAME[h] for h in heads}
        values = np.empty(layout.size)
        seen = set()
        for n, (agent, key) in enumerate(layout.keys):
            try:
                node = data[agent][json_of[key[0]]]
                for part in key[1:]:
                    node = node[part]
            except (KeyError, TypeError):
                raise ProfileError(f"profile is missing component {agent}:{key}") from None
            values[n] = float(node)
            seen.add((agent, json_of[key[0]]) + tuple(key[1:]))
        found = set()
        for agent, block in data.items():
            if agent not in layout.agents:
                raise ProfileError(f"profile names unknown agent {agent!r}")
            for name, node in block.items():
                if name not in json_of.values():
                    raise ProfileError(f"agent {agent!r}: unknown block {name!r}")
                _leaves(node, (agent, name), found)
        extra = found - seen
        if extra:
            raise ProfileError(f"profile has components outside the layout: {sorted(extra)[:5]}")
        p = cls(layout, values)
        p.check()
        return p


def _leaves(node, prefix, out):
    if isinstance(node, dict):
        for k, v in node.items():
            _leaves(v, prefix + (k,), out)
    else:
        out.add(prefix)
