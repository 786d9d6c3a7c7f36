"""Global sememe relation graph and per-pair induced subgraphs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .lexicon import RelationTriple, SememeInventory

VIRTUAL = -1
VIRTUAL_LABEL = "<virtual>"
VIRTUAL_RELATION_LABEL = "VIRTUAL"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SememeGraph:
    """Directed labeled multigraph over sememe ids ``0..node_count-1``."""

    node_count: int
    edges: tuple[tuple[int, int, int], ...]
    in_adjacency: tuple[tuple[int, ...], ...]
    out_adjacency: tuple[tuple[int, ...], ...]
    relation_count: int = 0

    @property
    def virtual_relation(self) -> int:
        # one id past the real relation types
        return self.relation_count

    def in_degree(self, node: int) -> int:
        return len(self.in_adjacency[node])

    def out_degree(self, node: int) -> int:
        return len(self.out_adjacency[node])


def build_graph(inventory: SememeInventory, triples: Iterable[RelationTriple]) -> SememeGraph:
    n = len(inventory)
    r = len(inventory.relation_types)
    edges = []
    in_adj: list[list[int]] = [[] for _ in range(n)]
    out_adj: list[list[int]] = [[] for _ in range(n)]
    for t in triples:
        if not (0 <= t.head < n and 0 <= t.tail < n):
            raise GraphError(f"sememe id out of range in triple {t}")
        if not 0 <= t.relation < r:
            raise GraphError(f"relation id out of range in triple {t}")
        k = len(edges)
        edges.append((t.head, t.relation, t.tail))
        out_adj[t.head].append(k)
        in_adj[t.tail].append(k)
    return SememeGraph(
        n,
        tuple(edges),
        tuple(tuple(a) for a in in_adj),
        tuple(tuple(a) for a in out_adj),
        r,
    )


@dataclass(frozen=True)
class PairSubgraph:
    """Induced subgraph for one word pair.

    ``local_nodes`` holds global sememe ids in ascending order; after
    augmentation the virtual node is appended last with global id
    ``VIRTUAL``. Edges are ``(src, relation, dst)`` in local indices.
    """

    local_nodes: tuple[int, ...]
    local_edges: tuple[tuple[int, int, int], ...]
    head_members: tuple[int, ...]
    tail_members: tuple[int, ...]
    virtual_index: int | None = None
    virtual_relation: int = 0

    @property
    def augmented(self) -> bool:
        return self.virtual_index is not None

    @property
    def size(self) -> int:
        return len(self.local_nodes)

    @property
    def sememe_count(self) -> int:
        return self.size - (1 if self.augmented else 0)

    def receive_mask(self) -> np.ndarray:
        """``mask[i, j]`` is True when node i receives from j: edge j->i, or i == j."""
        mask = np.eye(self.size, dtype=bool)
        for src, _, dst in self.local_edges:
            mask[dst, src] = True
        return mask

    def to_json(self, inventory: SememeInventory) -> dict:
        rel_labels = list(inventory.relation_types)
        nodes = [VIRTUAL_LABEL if g == VIRTUAL else inventory.sememes[g] for g in self.local_nodes]
        edges = [
            [s, VIRTUAL_RELATION_LABEL if r >= len(rel_labels) else rel_labels[r], d]
            for s, r, d in self.local_edges
        ]
        return {
            "nodes": nodes,
            "edges": edges,
            "virtual_index": self.virtual_index,
            "head_members": list(self.head_members),
            "tail_members": list(self.tail_members),
        }


def _two_hop_nodes(graph: SememeGraph, members: set[int]) -> set[int]:
    extra = set()
    for a in members:
        for k in graph.out_adjacency[a]:
            mid = graph.edges[k][2]
            if mid in members:
                continue
            if any(graph.edges[k2][2] in members for k2 in graph.out_adjacency[mid]):
                extra.add(mid)
    return extra


def extract_subgraph(graph: SememeGraph, head_sememes: Iterable[int], tail_sememes: Iterable[int],
                     hops: int = 0) -> PairSubgraph:
    """Induced subgraph over ``S_h | S_t``.

    With ``hops=1`` the node set also gains every intermediate node ``x`` of
    a directed path ``a -> x -> b`` between two member sememes.
    """
    head = set(head_sememes)
    tail = set(tail_sememes)
    if not head or not tail:
        raise GraphError("both sememe sets must be non-empty")
    for s in head | tail:
        if not 0 <= s < graph.node_count:
            raise GraphError(f"sememe id {s} out of range")
    if hops not in (0, 1):
        raise GraphError(f"hops must be 0 or 1, got {hops}")
    members = head | tail
    nodes = set(members)
    if hops == 1:
        nodes |= _two_hop_nodes(graph, members)
    local_nodes = tuple(sorted(nodes))
    index = {g: i for i, g in enumerate(local_nodes)}
    local_edges = []
    # scan out-edges node by node; keeps edge order tied to the global edge list
    picked = sorted(k for g in local_nodes for k in graph.out_adjacency[g] if graph.edges[k][2] in index)
    for k in picked:
        src, rel, dst = graph.edges[k]
        local_edges.append((index[src], rel, index[dst]))
    return PairSubgraph(
        local_nodes,
        tuple(local_edges),
        tuple(index[g] for g in sorted(head)),
        tuple(index[g] for g in sorted(tail)),
        None,
        graph.virtual_relation,
    )


def add_virtual_node(subgraph: PairSubgraph) -> PairSubgraph:
    """Append the virtual node and an edge into it from every sememe node."""
    if subgraph.augmented:
        raise GraphError("subgraph already has a virtual node")
    n = subgraph.size
    if n == 0:
        raise GraphError("cannot augment an empty subgraph")
    extra = tuple((i, subgraph.virtual_relation, n) for i in range(n))
    return PairSubgraph(
        subgraph.local_nodes + (VIRTUAL,),
        subgraph.local_edges + extra,
        subgraph.head_members,
        subgraph.tail_members,
        n,
        subgraph.virtual_relation,
    )


def serialize_subgraph(subgraph: PairSubgraph, inventory: SememeInventory) -> str:
    return json.dumps(subgraph.to_json(inventory), ensure_ascii=False, sort_keys=True)


def permute_subgraph(subgraph: PairSubgraph, order: Sequence[int]) -> PairSubgraph:
    """Relabel nodes so that new node ``i`` is old node ``order[i]``.

    Used to check that the encoder does not depend on node order; the
    result deliberately breaks the ascending-id convention.
    """
    if sorted(order) != list(range(subgraph.size)):
        raise GraphError("order must be a permutation of the local nodes")
    new_of_old = {old: new for new, old in enumerate(order)}
    return PairSubgraph(
        tuple(subgraph.local_nodes[old] for old in order),
        tuple((new_of_old[s], r, new_of_old[d]) for s, r, d in subgraph.local_edges),
        tuple(sorted(new_of_old[i] for i in subgraph.head_members)),
        tuple(sorted(new_of_old[i] for i in subgraph.tail_members)),
        None if subgraph.virtual_index is None else new_of_old[subgraph.virtual_index],
        subgraph.virtual_relation,
    )
