"""Labeled undirected graphs, size padding and mapping-induced edit costs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

NULL_LABEL = -1


class InvalidGraphError(ValueError):
    pass


class InvalidAlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected node-labeled graph.

    ``labels[k]`` is the interned label id of node ``k``; edges are stored
    once as ``(u, v)`` with ``u < v``.
    """

    id: str
    labels: tuple[int, ...]
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        labels = tuple(int(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        n = len(labels)
        if n < 1:
            raise InvalidGraphError(f"graph {self.id!r} has no nodes")
        if any(x < 0 for x in labels):
            raise InvalidGraphError(f"graph {self.id!r}: negative label ids are reserved")
        norm = set()
        for e in self.edges:
            u, v = (int(e[0]), int(e[1]))
            if u == v:
                raise InvalidGraphError(f"graph {self.id!r}: self-loop on node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise InvalidGraphError(f"graph {self.id!r}: edge ({u}, {v}) out of range for {n} nodes")
            norm.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", frozenset(norm))

    @property
    def n(self) -> int:
        return len(self.labels)

    def adjacency_masks(self) -> list[int]:
        masks = [0] * self.n
        for u, v in self.edges:
            masks[u] |= 1 << v
            masks[v] |= 1 << u
        return masks

    def degrees(self) -> list[int]:
        deg = [0] * self.n
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in sorted(self.edges):
            nbrs[u].append(v)
            nbrs[v].append(u)
        return nbrs

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def permuted(self, perm: Sequence[int], new_id: str | None = None) -> "Graph":
        """Relabel node indices: old node ``k`` becomes node ``perm[k]``."""
        if sorted(perm) != list(range(self.n)):
            raise ValueError("perm must be a permutation of node indices")
        labels = [0] * self.n
        for k, lab in enumerate(self.labels):
            labels[perm[k]] = lab
        edges = {(perm[u], perm[v]) for u, v in self.edges}
        return Graph(new_id or self.id, tuple(labels), frozenset(edges))


class LabelVocab:
    """Interns string labels to consecutive integer ids."""

    def __init__(self, names: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        self._names: list[str] = []
        for name in names:
            self.intern(name)

    def intern(self, name: str) -> int:
        name = str(name)
        if name not in self._ids:
            self._ids[name] = len(self._names)
            self._names.append(name)
        return self._ids[name]

    def lookup(self, name: str) -> int:
        return self._ids[str(name)]

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name) -> bool:
        return str(name) in self._ids


def graph_to_json(g: Graph, vocab: LabelVocab | None = None) -> dict:
    names = [vocab.name(x) if vocab is not None else str(x) for x in g.labels]
    return {"id": g.id, "labels": names, "edges": [list(e) for e in g.sorted_edges()]}


def graph_from_json(obj: dict, vocab: LabelVocab) -> Graph:
    try:
        labels = tuple(vocab.intern(x) for x in obj["labels"])
        edges = frozenset(tuple(e) for e in obj.get("edges", []))
        return Graph(str(obj.get("id", "")), labels, edges)
    except (KeyError, TypeError) as exc:
        raise InvalidGraphError(f"malformed graph object: {exc}") from exc


def load_graph(path, vocab: LabelVocab) -> Graph:
    with open(path) as fh:
        return graph_from_json(json.load(fh), vocab)


def load_graphs(path, vocab: LabelVocab) -> list[Graph]:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return [graph_from_json(obj, vocab) for obj in data]


def save_graphs(path, graphs: Sequence[Graph], vocab: LabelVocab | None = None) -> None:
    Path(path).write_text(json.dumps([graph_to_json(g, vocab) for g in graphs]))


@dataclass(frozen=True)
class PaddedPair:
    """Two graphs brought to a common node count with null-label padding."""

    g1: Graph
    g2: Graph
    pad_size: int
    labels1: tuple[int, ...]
    labels2: tuple[int, ...]
    adj1: tuple[int, ...]
    adj2: tuple[int, ...]


def pad_pair(g1: Graph, g2: Graph) -> PaddedPair:
    n = max(g1.n, g2.n)
    labels1 = g1.labels + (NULL_LABEL,) * (n - g1.n)
    labels2 = g2.labels + (NULL_LABEL,) * (n - g2.n)
    adj1 = tuple(g1.adjacency_masks() + [0] * (n - g1.n))
    adj2 = tuple(g2.adjacency_masks() + [0] * (n - g2.n))
    return PaddedPair(g1, g2, n, labels1, labels2, adj1, adj2)


@dataclass(frozen=True)
class Alignment:
    mapping: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(x) for x in self.mapping))

    def inverse(self) -> tuple[int, ...]:
        inv = [0] * len(self.mapping)
        for k, m in enumerate(self.mapping):
            inv[m] = k
        return tuple(inv)


@dataclass(frozen=True)
class EditCost:
    node_cost: int
    edge_cost: int

    @property
    def total(self) -> int:
        return self.node_cost + self.edge_cost


def check_alignment(pair: PaddedPair, a: Alignment | Sequence[int]) -> tuple[int, ...]:
    mapping = a.mapping if isinstance(a, Alignment) else tuple(int(x) for x in a)
    if len(mapping) != pair.pad_size or sorted(mapping) != list(range(pair.pad_size)):
        raise InvalidAlignmentError(
            f"mapping {list(mapping)} is not a bijection on 0..{pair.pad_size - 1}"
        )
    return mapping


def ged_under_mapping(pair: PaddedPair, a: Alignment | Sequence[int]) -> EditCost:
    mapping = check_alignment(pair, a)
    node_cost = sum(1 for k in range(pair.pad_size) if pair.labels1[k] != pair.labels2[mapping[k]])
    # permute g2's adjacency into g1's index space, then count differing unordered pairs
    inv = [0] * pair.pad_size
    for k, m in enumerate(mapping):
        inv[m] = k
    edge_cost = 0
    for u, v in pair.g1.edges:
        if not (pair.adj2[mapping[u]] >> mapping[v]) & 1:
            edge_cost += 1
    for u, v in pair.g2.edges:
        if not (pair.adj1[inv[u]] >> inv[v]) & 1:
            edge_cost += 1
    return EditCost(node_cost, edge_cost)


def sim_from_ged(ged: float, n1: int, n2: int) -> float:
    """Normalized similarity ``exp(-ged / ((n1 + n2) / 2))``."""
    if ged < 0:
        raise ValueError(f"ged must be non-negative, got {ged}")
    if n1 < 1 or n2 < 1:
        raise ValueError(f"node counts must be positive, got {n1}, {n2}")
    return math.exp(-2.0 * ged / (n1 + n2))


@dataclass(frozen=True)
class GraphPartition:
    aligned_nodes: frozenset[int]
    aligned_edges: frozenset[tuple[int, int]]
    unaligned_nodes: frozenset[int]
    unaligned_edges: frozenset[tuple[int, int]]

    def to_json(self) -> dict:
        return {
            "aligned_nodes": sorted(self.aligned_nodes),
            "aligned_edges": [list(e) for e in sorted(self.aligned_edges)],
            "unaligned_nodes": sorted(self.unaligned_nodes),
            "unaligned_edges": [list(e) for e in sorted(self.unaligned_edges)],
        }


@dataclass(frozen=True)
class SubstructurePartition:
    g1: GraphPartition
    g2: GraphPartition
    mapping: tuple[int, ...]

    def to_json(self) -> dict:
        return {"mapping": list(self.mapping), "g1": self.g1.to_json(), "g2": self.g2.to_json()}


def _partition_side(graph: Graph, labels_self, labels_other, adj_other, mapping) -> GraphPartition:
    aligned_nodes = frozenset(k for k in range(graph.n) if labels_self[k] == labels_other[mapping[k]])
    aligned_edges = frozenset(
        (u, v) for u, v in graph.edges if (adj_other[mapping[u]] >> mapping[v]) & 1
    )
    return GraphPartition(
        aligned_nodes,
        aligned_edges,
        frozenset(range(graph.n)) - aligned_nodes,
        graph.edges - aligned_edges,
    )


def extract_partition(pair: PaddedPair, a: Alignment | Sequence[int]) -> SubstructurePartition:
    """Split each graph into aligned (zero-cost) and unaligned parts under ``a``.

    Padding nodes never appear in the reported sets.
    """
    mapping = check_alignment(pair, a)
    inv = [0] * pair.pad_size
    for k, m in enumerate(mapping):
        inv[m] = k
    p1 = _partition_side(pair.g1, pair.labels1, pair.labels2, pair.adj2, mapping)
    p2 = _partition_side(pair.g2, pair.labels2, pair.labels1, pair.adj1, inv)
    return SubstructurePartition(p1, p2, mapping)


def cost_from_partition(pair: PaddedPair, part: SubstructurePartition) -> EditCost:
    """Rebuild the edit cost from the unaligned sets alone.

    Real-to-real relabels appear in both graphs' unaligned node sets and are
    counted once; every unaligned edge is one insertion or deletion.
    """
    both = sum(
        1
        for k in part.g1.unaligned_nodes
        if part.mapping[k] < pair.g2.n
    )
    node_cost = len(part.g1.unaligned_nodes) + len(part.g2.unaligned_nodes) - both
    edge_cost = len(part.g1.unaligned_edges) + len(part.g2.unaligned_edges)
    return EditCost(node_cost, edge_cost)
