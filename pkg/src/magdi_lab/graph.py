"""Multi-agent interaction graphs: construction, validation, adjacency, JSON I/O.

A graph holds one node per (agent, round). Node ids are
``agent + n_agents * round`` so ordering by id is ordering by round, then
agent. Every round-``j`` node feeds every round-``j+1`` node.
"""

from __future__ import annotations

import enum
import json
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_ROUNDS = 3


class GraphError(ValueError):
    """Structural or schema problem with a graph. ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class Structure(enum.IntEnum):
    G0 = 0
    G1 = 1
    G2 = 2
    G3 = 3


class EdgeVariant(str, enum.Enum):
    DIRECTED = "directed"
    UNDIRECTED = "undirected"
    FULLY_CONNECTED = "fully_connected"

    @classmethod
    def parse(cls, value: "str | EdgeVariant") -> "EdgeVariant":
        if isinstance(value, cls):
            return value
        key = value.strip().lower().replace("-", "_")
        aliases = {"fc": "fully_connected", "fullyconnected": "fully_connected", "d": "directed", "ud": "undirected"}
        return cls(aliases.get(key, key))


_TRAILING = string.punctuation


def canonicalize(answer: str) -> str:
    """Trim, lowercase, drop trailing punctuation."""
    return answer.strip().lower().rstrip(_TRAILING).strip()


@dataclass(frozen=True)
class InstanceRef:
    id: str
    question: str
    gold: str


@dataclass(frozen=True)
class NodeRecord:
    node_id: int
    agent_id: int
    round: int
    reasoning: str
    answer: str
    label: int


@dataclass(frozen=True)
class Mag:
    instance: InstanceRef
    n_agents: int
    nodes: tuple[NodeRecord, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def n_rounds(self) -> int:
        return max(n.round for n in self.nodes)

    @property
    def positives(self) -> list[NodeRecord]:
        return [n for n in self.nodes if n.label == 1]

    @property
    def negatives(self) -> list[NodeRecord]:
        return [n for n in self.nodes if n.label == 0]

    def validate(self) -> "Mag":
        validate_mag(self)
        return self


@dataclass
class CorpusStats:
    nodes_per_round: list[int]
    nodes_per_agent: list[int]
    graphs_per_structure: dict[str, int] = field(default_factory=dict)

    @property
    def n_graphs(self) -> int:
        return sum(self.graphs_per_structure.values())

    def table(self, name: str = "corpus") -> str:
        """Round / agent / structure breakdown as a small text table."""
        rounds = " / ".join(str(c) for c in self.nodes_per_round)
        agents = " / ".join(str(c) for c in self.nodes_per_agent)
        graphs = " / ".join(str(self.graphs_per_structure[s.name]) for s in Structure)
        header = f"{'task':<12} {'round (0/1/2/3)':<28} {'agent (each)':<24} graph (G0/G1/G2/G3/all)"
        row = f"{name:<12} {rounds:<28} {agents:<24} {graphs} / {self.n_graphs}"
        return header + "\n" + row

    def to_dict(self) -> dict:
        return {
            "nodes_per_round": list(self.nodes_per_round),
            "nodes_per_agent": list(self.nodes_per_agent),
            "graphs_per_structure": dict(self.graphs_per_structure),
            "n_graphs": self.n_graphs,
        }


def node_id(agent: int, round_: int, n_agents: int) -> int:
    return agent + n_agents * round_


def build_mag(
    instance,
    per_round_outputs: Sequence[Sequence[tuple[str, str]]],
    n_agents: int | None = None,
) -> Mag:
    """Assemble a graph from each round's ``(reasoning, answer)`` pairs.

    ``instance`` needs ``id``, ``question`` and ``gold`` attributes. Labels come
    from comparing canonicalized answers against the gold answer.
    """
    if not per_round_outputs:
        raise GraphError("missing_round", "at least round 0 is required")
    n = len(per_round_outputs[0]) if n_agents is None else n_agents
    if n < 1:
        raise GraphError("missing_agent", "round 0 has no agent outputs")
    if len(per_round_outputs) - 1 > MAX_ROUNDS:
        raise GraphError("unsupported_structure", f"{len(per_round_outputs) - 1} rounds exceeds {MAX_ROUNDS}")
    gold = canonicalize(instance.gold)
    nodes = []
    for r, outputs in enumerate(per_round_outputs):
        if len(outputs) < n:
            raise GraphError("missing_agent", f"round {r} has {len(outputs)} outputs for {n} agents")
        if len(outputs) > n:
            raise GraphError("duplicate_node", f"round {r} has {len(outputs)} outputs for {n} agents")
        for a, (reasoning, answer) in enumerate(outputs):
            nodes.append(
                NodeRecord(
                    node_id=node_id(a, r, n),
                    agent_id=a,
                    round=r,
                    reasoning=reasoning,
                    answer=answer,
                    label=int(canonicalize(answer) == gold),
                )
            )
    edges = tuple(
        (node_id(i, r - 1, n), node_id(k, r, n))
        for r in range(1, len(per_round_outputs))
        for i in range(n)
        for k in range(n)
    )
    ref = InstanceRef(str(instance.id), instance.question, instance.gold)
    return Mag(ref, n, tuple(nodes), edges)


def validate_mag(mag: Mag) -> None:
    n = mag.n_agents
    if n < 1:
        raise GraphError("schema", "n_agents must be positive")
    if not mag.nodes:
        raise GraphError("missing_round", "graph has no nodes")
    seen: set[tuple[int, int]] = set()
    by_id: dict[int, NodeRecord] = {}
    gold = canonicalize(mag.instance.gold)
    for node in mag.nodes:
        key = (node.agent_id, node.round)
        if key in seen:
            raise GraphError("duplicate_node", f"duplicate (agent, round) = {key}")
        seen.add(key)
        if not 0 <= node.agent_id < n:
            raise GraphError("schema", f"agent {node.agent_id} outside [0, {n})")
        if node.round < 0:
            raise GraphError("schema", f"negative round {node.round}")
        if node.node_id != node_id(node.agent_id, node.round, n):
            raise GraphError("node_id", f"node {node.node_id} is not agent + n_agents * round")
        if node.label not in (0, 1):
            raise GraphError("schema", f"label {node.label!r} is not 0 or 1")
        if node.label != int(canonicalize(node.answer) == gold):
            raise GraphError("label", f"node {node.node_id} label disagrees with gold answer")
        by_id[node.node_id] = node
    r = max(k[1] for k in seen)
    if r > MAX_ROUNDS:
        raise GraphError("unsupported_structure", f"{r} rounds exceeds {MAX_ROUNDS}")
    if len(seen) != n * (r + 1):
        raise GraphError("missing_agent", f"expected {n * (r + 1)} nodes, found {len(seen)}")
    edge_set = set()
    for s, t in mag.edges:
        if s not in by_id or t not in by_id:
            raise GraphError("dangling_edge", f"edge ({s}, {t}) references a missing node")
        if by_id[t].round != by_id[s].round + 1:
            raise GraphError("acyclicity", f"edge ({s}, {t}) does not go from round j to round j+1")
        if (s, t) in edge_set:
            raise GraphError("duplicate_edge", f"edge ({s}, {t}) appears twice")
        edge_set.add((s, t))
    if len(edge_set) != n * n * r:
        raise GraphError("missing_edge", f"expected {n * n * r} edges, found {len(edge_set)}")


def structure_class(mag: Mag) -> Structure:
    r = mag.n_rounds
    if r > MAX_ROUNDS:
        raise GraphError("unsupported_structure", f"{r} rounds exceeds {MAX_ROUNDS}")
    return Structure(r)


def corpus_stats(corpus: Sequence[Mag]) -> CorpusStats:
    agents = {m.n_agents for m in corpus}
    if len(agents) > 1:
        raise GraphError("mixed_agents", f"corpus mixes agent counts {sorted(agents)}")
    n = agents.pop() if agents else 0
    per_round = [0] * (MAX_ROUNDS + 1)
    per_agent = [0] * n
    structures = Counter()
    for mag in corpus:
        structures[structure_class(mag).name] += 1
        for node in mag.nodes:
            per_round[node.round] += 1
            per_agent[node.agent_id] += 1
    return CorpusStats(per_round, per_agent, {s.name: structures.get(s.name, 0) for s in Structure})


def stats_from_structure_counts(counts: Sequence[int], n_agents: int = 3) -> CorpusStats:
    """Round/agent breakdown implied by G0..G3 graph counts alone."""
    counts = list(counts)
    per_round = [n_agents * sum(counts[j:]) for j in range(len(counts))]
    total = sum(per_round)
    return CorpusStats(
        per_round,
        [total // n_agents] * n_agents,
        {s.name: c for s, c in zip(Structure, counts)},
    )


def adjacency(mag: Mag, variant: "EdgeVariant | str" = EdgeVariant.DIRECTED) -> tuple[np.ndarray, np.ndarray]:
    """Adjacency ``M`` with self-connections and its row-normalized form.

    Rows are targets: a directed edge ``s -> t`` sets ``M[t, s]``, so a node
    averages over itself and the outputs it was conditioned on.
    """
    variant = EdgeVariant.parse(variant)
    size = len(mag.nodes)
    if variant is EdgeVariant.FULLY_CONNECTED:
        m = np.ones((size, size))
    else:
        m = np.eye(size)
        for s, t in mag.edges:
            m[t, s] = 1.0
            if variant is EdgeVariant.UNDIRECTED:
                m[s, t] = 1.0
    return m, m / m.sum(axis=1, keepdims=True)


def filter_corpus(corpus: Sequence[Mag], predicate: Callable[[Structure], bool]) -> list[Mag]:
    kept = [m for m in corpus if predicate(structure_class(m))]
    if corpus and not kept:
        warnings.warn("filter_corpus: predicate removed every graph", RuntimeWarning, stacklevel=2)
    return kept


def drop_structures(corpus: Sequence[Mag], drop: Iterable[Structure | str | int]) -> list[Mag]:
    dropped = {s if isinstance(s, Structure) else (Structure[s] if isinstance(s, str) else Structure(s)) for s in drop}
    return filter_corpus(corpus, lambda s: s not in dropped)


# ---------------------------------------------------------------------------
# JSON


_MAG_KEYS = {"instance", "n_agents", "nodes", "edges"}
_INSTANCE_KEYS = {"id", "question", "gold"}
_NODE_KEYS = {"id", "agent", "round", "reasoning", "answer", "label"}


def mag_to_dict(mag: Mag) -> dict:
    return {
        "instance": {"id": mag.instance.id, "question": mag.instance.question, "gold": mag.instance.gold},
        "n_agents": mag.n_agents,
        "nodes": [
            {
                "id": n.node_id,
                "agent": n.agent_id,
                "round": n.round,
                "reasoning": n.reasoning,
                "answer": n.answer,
                "label": n.label,
            }
            for n in mag.nodes
        ],
        "edges": [[s, t] for s, t in mag.edges],
    }


def _require(obj, keys: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise GraphError("schema", f"{where} must be an object")
    extra = set(obj) - keys
    if extra:
        raise GraphError("schema", f"{where} has unknown fields {sorted(extra)}")
    missing = keys - set(obj)
    if missing:
        raise GraphError("schema", f"{where} is missing fields {sorted(missing)}")


def _typed(value, kind, where: str):
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise GraphError("schema", f"{where} must be an integer")
    if kind is str and not isinstance(value, str):
        raise GraphError("schema", f"{where} must be a string")
    return value


def mag_from_dict(obj: dict) -> Mag:
    _require(obj, _MAG_KEYS, "graph")
    _require(obj["instance"], _INSTANCE_KEYS, "instance")
    inst = obj["instance"]
    ref = InstanceRef(*(_typed(inst[k], str, f"instance.{k}") for k in ("id", "question", "gold")))
    if not isinstance(obj["nodes"], list) or not isinstance(obj["edges"], list):
        raise GraphError("schema", "nodes and edges must be arrays")
    nodes = []
    for i, raw in enumerate(obj["nodes"]):
        _require(raw, _NODE_KEYS, f"nodes[{i}]")
        nodes.append(
            NodeRecord(
                node_id=_typed(raw["id"], int, f"nodes[{i}].id"),
                agent_id=_typed(raw["agent"], int, f"nodes[{i}].agent"),
                round=_typed(raw["round"], int, f"nodes[{i}].round"),
                reasoning=_typed(raw["reasoning"], str, f"nodes[{i}].reasoning"),
                answer=_typed(raw["answer"], str, f"nodes[{i}].answer"),
                label=_typed(raw["label"], int, f"nodes[{i}].label"),
            )
        )
    edges = []
    for i, e in enumerate(obj["edges"]):
        if not isinstance(e, list) or len(e) != 2:
            raise GraphError("schema", f"edges[{i}] must be a [src, dst] pair")
        edges.append((_typed(e[0], int, f"edges[{i}][0]"), _typed(e[1], int, f"edges[{i}][1]")))
    mag = Mag(ref, _typed(obj["n_agents"], int, "n_agents"), tuple(nodes), tuple(edges))
    validate_mag(mag)
    return mag


def serialize(mag: Mag) -> str:
    return json.dumps(mag_to_dict(mag), sort_keys=True, separators=(",", ":"))


def deserialize(text: str) -> Mag:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError("malformed_json", str(exc)) from None
    return mag_from_dict(obj)


def serialize_corpus(corpus: Iterable[Mag]) -> str:
    return "".join(serialize(m) + "\n" for m in corpus)


def deserialize_corpus(text: str) -> list[Mag]:
    corpus = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            corpus.append(deserialize(line))
        except GraphError as exc:
            raise GraphError(exc.code, f"line {lineno}: {exc}") from None
    return corpus


def write_corpus(path, corpus: Iterable[Mag]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_corpus(corpus))


def read_corpus(path) -> list[Mag]:
    with open(path, encoding="utf-8") as fh:
        return deserialize_corpus(fh.read())
