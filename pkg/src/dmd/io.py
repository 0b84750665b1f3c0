"""Instance files.

Schema (JSON object; any other key is rejected)::

    {
      "name": "optional label",
      "protocol": "utp" | "mmtp",
      "links":  [{"id": "1", "capacity": 1.0}, ...],
      "agents": [{"id": "1", "links": ["1"], "group": "g1",
                  "valuation": {"family": "scaled-log", "a": 1.0, "alpha": 0.5}}, ...],
      "message_graph": {"edges": [["1", "2"], ...], "phi": {"1": "2"}}
    }

``group`` is required for mmtp and forbidden for utp; ``alpha`` only for the
power family; ``phi`` is optional. Ids may be strings or integers and are
normalised to strings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .graph import MessageTree
from .instance import MMTP, AgentSpec, LinkSpec, ProblemInstance
from .valuations import ValuationSpec


class InstanceFileError(ValueError):
    """The instance file could not be parsed or violates the schema."""


_TOP = {"name", "protocol", "links", "agents", "message_graph"}
_LINK = {"id", "capacity"}
_AGENT = {"id", "links", "group", "valuation"}
_VAL = {"family", "a", "alpha"}
_GRAPH = {"edges", "phi"}


@dataclass(frozen=True)
class LoadedInstance:
    instance: ProblemInstance
    tree: MessageTree
    phi: dict[str, str]
    digest: str
    name: str = ""


def _keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise InstanceFileError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise InstanceFileError(f"{where}: unknown field(s) {sorted(extra)}")
    missing = set(required) - set(obj)
    if missing:
        raise InstanceFileError(f"{where}: missing field(s) {sorted(missing)}")


def _num(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InstanceFileError(f"{where}: expected a number, got {value!r}")
    return float(value)


def parse_instance(data: dict, protocol_override: str | None = None) -> LoadedInstance:
    from .graph import GraphError
    from .instance import InstanceError

    _keys(data, _TOP, {"protocol", "links", "agents", "message_graph"}, "instance")
    protocol = protocol_override or data["protocol"]
    try:
        links = [LinkSpec(str(l["id"]), _num(l["capacity"], f"link {l.get('id')}"))
                 for l in _checked(data["links"], _LINK, {"id", "capacity"}, "link")]
        agents = []
        for a in _checked(data["agents"], _AGENT, {"id", "links", "valuation"}, "agent"):
            v = a["valuation"]
            _keys(v, _VAL, {"family", "a"}, f"agent {a['id']} valuation")
            val = ValuationSpec(v["family"], _num(v["a"], "valuation.a"),
                                _num(v["alpha"], "valuation.alpha") if "alpha" in v else None)
            if "group" in a and protocol != MMTP:
                raise InstanceFileError(f"agent {a['id']}: 'group' is only valid for mmtp instances")
            if not isinstance(a["links"], list):
                raise InstanceFileError(f"agent {a['id']}: 'links' must be a list")
            agents.append(AgentSpec(str(a["id"]), tuple(str(l) for l in a["links"]), val,
                                    str(a["group"]) if "group" in a else None))
        instance = ProblemInstance(protocol, links, agents)
        g = data["message_graph"]
        _keys(g, _GRAPH, {"edges"}, "message_graph")
        edges = tuple((str(u), str(v)) for u, v in g["edges"])
        tree = MessageTree(tuple(a.id for a in agents), edges)
        phi = {str(k): str(v) for k, v in (g.get("phi") or {}).items()}
    except (InstanceError, GraphError, TypeError) as exc:
        raise InstanceFileError(str(exc)) from exc
    except ValueError as exc:
        if isinstance(exc, InstanceFileError):
            raise
        raise InstanceFileError(str(exc)) from exc
    canon = json.dumps(dump_instance(instance, tree, phi), sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canon.encode()).hexdigest()
    return LoadedInstance(instance, tree, phi, digest, str(data.get("name", "")))


def _checked(items, allowed, required, kind):
    if not isinstance(items, list):
        raise InstanceFileError(f"'{kind}s' must be a list")
    for n, item in enumerate(items):
        _keys(item, allowed, required, f"{kind} #{n}")
        yield item


def load_instance(path, protocol_override: str | None = None) -> LoadedInstance:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFileError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_instance(data, protocol_override)


def dump_instance(instance: ProblemInstance, tree: MessageTree, phi=None, name: str = "") -> dict:
    out = {}
    if name:
        out["name"] = name
    out["protocol"] = instance.protocol
    out["links"] = [{"id": l.id, "capacity": l.capacity} for l in instance.links]
    agents = []
    for a in instance.agents:
        d = {"id": a.id, "links": list(a.links), "valuation": a.valuation.to_dict()}
        if a.group is not None:
            d["group"] = a.group
        agents.append(d)
    out["agents"] = agents
    graph = {"edges": [list(e) for e in tree.edges]}
    if phi:
        graph["phi"] = dict(sorted(phi.items()))
    out["message_graph"] = graph
    return out


def save_instance(path, instance, tree, phi=None, name: str = "") -> None:
    Path(path).write_text(json.dumps(dump_instance(instance, tree, phi, name), indent=2) + "\n")
