"""Knowledge graphs, adjacency tensors and single-triple graph mutations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TAIL_SWAP = "tail-swap"
RELATION_SWAP = "relation-swap"
MUTATION_KINDS = (TAIL_SWAP, RELATION_SWAP)


class GraphError(ValueError):
    pass


class UnmutableGraphError(GraphError):
    """No triple of the graph admits a mutation of the requested kind."""


def entity_token(name: str) -> str:
    """Canonical single-token form of an entity name ("Feng Ruozhao" -> "Feng-Ruozhao")."""
    return "-".join(name.split())


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triples: frozenset  # of (head, relation, tail) index triples
    graph_id: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(entity_token(e) for e in self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "triples", frozenset(tuple(map(int, t)) for t in self.triples))
        if len(set(self.entities)) != len(self.entities):
            raise GraphError("duplicate entity names")
        if len(set(self.relations)) != len(self.relations):
            raise GraphError("duplicate relation names")
        nv, nl = len(self.entities), len(self.relations)
        for h, r, t in self.triples:
            if not (0 <= h < nv and 0 <= t < nv and 0 <= r < nl):
                raise GraphError(f"triple {(h, r, t)} out of range for |V|={nv}, |L|={nl}")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @cached_property
    def entity_index(self) -> dict[str, int]:
        return {e: i for i, e in enumerate(self.entities)}

    @cached_property
    def adjacency(self) -> np.ndarray:
        return build_adjacency(self)

    def sorted_triples(self) -> list[tuple[int, int, int]]:
        return sorted(self.triples)

    def with_triples(self, triples: Iterable, graph_id: str | None = None) -> "KnowledgeGraph":
        return KnowledgeGraph(self.entities, self.relations, frozenset(triples), graph_id or self.graph_id)

    def reachable(self, sources: Iterable[int], max_hops: int) -> set[int]:
        """Entities reachable from ``sources`` in 0..max_hops steps."""
        frontier = set(sources)
        seen = set(frontier)
        out_edges: dict[int, set[int]] = {}
        for h, _, t in self.triples:
            out_edges.setdefault(h, set()).add(t)
        for _ in range(max_hops):
            frontier = {t for h in frontier for t in out_edges.get(h, ())} - seen
            seen |= frontier
        return seen

    # -- JSON ------------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "id": self.graph_id,
            "entities": list(self.entities),
            "relations": list(self.relations),
            "triples": [[self.entities[h], self.relations[r], self.entities[t]] for h, r, t in self.sorted_triples()],
        }

    @classmethod
    def from_json(cls, obj: dict, graph_id: str | None = None) -> "KnowledgeGraph":
        try:
            entities = [entity_token(e) for e in obj["entities"]]
            relations = list(obj["relations"])
            raw = obj["triples"]
        except KeyError as exc:
            raise GraphError(f"graph object missing field {exc}") from None
        e_idx = {e: i for i, e in enumerate(entities)}
        r_idx = {r: i for i, r in enumerate(relations)}
        triples = set()
        for item in raw:
            h, r, t = item
            try:
                triple = (e_idx[entity_token(h)], r_idx[r], e_idx[entity_token(t)])
            except KeyError as exc:
                raise GraphError(f"triple {item} names unknown {exc}") from None
            if triple in triples:
                raise GraphError(f"duplicate triple {item}")
            triples.add(triple)
        return cls(tuple(entities), tuple(relations), frozenset(triples), graph_id or obj.get("id", "default"))


def load_graph(path: str | Path) -> KnowledgeGraph:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return KnowledgeGraph.from_json(obj, obj.get("id", path.stem))


def build_adjacency(graph: KnowledgeGraph) -> np.ndarray:
    """Binary |V| x |L| x |V| tensor with A[h, r, t] = 1 exactly for triples."""
    A = np.zeros((graph.n_entities, graph.n_relations, graph.n_entities))
    if graph.triples:
        idx = np.array(sorted(graph.triples)).T
        A[idx[0], idx[1], idx[2]] = 1.0
    A.setflags(write=False)
    return A


def triples_from_adjacency(A: np.ndarray) -> set[tuple[int, int, int]]:
    return {tuple(map(int, x)) for x in np.argwhere(A > 0.5)}


def entity_indicator(tokens: Sequence[str], graph: KnowledgeGraph) -> np.ndarray:
    s = np.zeros(graph.n_entities)
    index = graph.entity_index
    for tok in tokens:
        i = index.get(tok)
        if i is not None:
            s[i] = 1.0
    return s


@dataclass(frozen=True)
class GraphMutation:
    removed: tuple[int, int, int]
    added: tuple[int, int, int]
    kind: str

    def __post_init__(self):
        (h, r, t), (h2, r2, t2) = self.removed, self.added
        if h != h2:
            raise GraphError("mutation must keep the head entity")
        if self.kind == TAIL_SWAP and not (r2 == r and t2 != t):
            raise GraphError("tail-swap must keep the relation and change the tail")
        if self.kind == RELATION_SWAP and not (t2 == t and r2 != r):
            raise GraphError("relation-swap must keep the tail and change the relation")
        if self.kind not in MUTATION_KINDS:
            raise GraphError(f"unknown mutation kind {self.kind!r}")

    def apply(self, graph: KnowledgeGraph, graph_id: str | None = None) -> KnowledgeGraph:
        if self.removed not in graph.triples or self.added in graph.triples:
            raise GraphError(f"mutation {self} does not apply to graph {graph.graph_id!r}")
        triples = (graph.triples - {self.removed}) | {self.added}
        return graph.with_triples(triples, graph_id or f"{graph.graph_id}~{self.describe(graph)}")

    def describe(self, graph: KnowledgeGraph) -> str:
        (h, r, t), (_, r2, t2) = self.removed, self.added
        e, rel = graph.entities, graph.relations
        return f"{e[h]}:{rel[r]}:{e[t]}->{rel[r2]}:{e[t2]}"

    def to_json(self) -> dict:
        return {"removed": list(self.removed), "added": list(self.added), "kind": self.kind}


def mutation_candidates(graph: KnowledgeGraph, triple: tuple[int, int, int], kind: str) -> list[tuple[int, int, int]]:
    h, r, t = triple
    if kind == TAIL_SWAP:
        options = ((h, r, t2) for t2 in range(graph.n_entities) if t2 != t)
    elif kind == RELATION_SWAP:
        options = ((h, r2, t) for r2 in range(graph.n_relations) if r2 != r)
    else:
        raise GraphError(f"unknown mutation kind {kind!r}")
    return [c for c in options if c not in graph.triples]


def mutate(graph: KnowledgeGraph, rng: np.random.Generator, kind: str = TAIL_SWAP,
           triple: tuple[int, int, int] | None = None) -> tuple[KnowledgeGraph, GraphMutation]:
    """Swap the tail (or relation) of one triple for a fresh one.

    The triple is drawn uniformly among those admitting at least one valid
    replacement unless ``triple`` pins it; the replacement is drawn uniformly
    among candidates that do not duplicate an existing triple.
    """
    if triple is not None:
        if triple not in graph.triples:
            raise GraphError(f"triple {triple} not in graph")
        pool = [triple]
    else:
        pool = graph.sorted_triples()
    mutable = [(tr, c) for tr in pool if (c := mutation_candidates(graph, tr, kind))]
    if not mutable:
        raise UnmutableGraphError(f"graph {graph.graph_id!r} admits no {kind} mutation")
    removed, cands = mutable[int(rng.integers(len(mutable)))]
    added = cands[int(rng.integers(len(cands)))]
    mutation = GraphMutation(removed, added, kind)
    return mutation.apply(graph), mutation
