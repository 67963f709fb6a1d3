"""Catalog deduplication.

Multiple catalog items often reuse the same or nearly the same product shot,
which skews both training and retrieval. The pipeline here drops low-priority
items, collapses exact image-name duplicates, then finds near-duplicate
embeddings with k-NN queries, links them into a duplication graph, and keeps
one item per connected component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable

import numpy as np

from .taxonomy import Gender

DUP_DISTANCE_DEFAULT = 0.05
KNN_DEFAULT = 20


@dataclass(frozen=True, eq=False)
class CatalogItem:
    item_id: str
    image_name: str
    fine_class: int
    gender: Gender
    priority: float
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.priority):
            raise ValueError(f"item {self.item_id!r} priority must be finite")


@dataclass(frozen=True)
class DuplicationGraph:
    """Undirected near-duplicate graph; edges are sorted id pairs."""

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]


class UnionFind:
    """Disjoint sets with path compression and union by size."""

    def __init__(self, elements: Iterable[Hashable] = ()):
        self.parent: dict[Hashable, Hashable] = {}
        self.size: dict[Hashable, int] = {}
        for e in elements:
            self.add(e)

    def add(self, x: Hashable) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x: Hashable) -> Hashable:
        self.add(x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: Hashable, b: Hashable) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def groups(self) -> list[set[Hashable]]:
        by_root: dict[Hashable, set[Hashable]] = {}
        for x in self.parent:
            by_root.setdefault(self.find(x), set()).add(x)
        return list(by_root.values())


def prefilter(items: list[CatalogItem], min_priority: float = -math.inf) -> list[CatalogItem]:
    """Drop items below a priority floor, then collapse identical image names.

    Per image name the highest-priority item survives (ties break toward the
    lexicographically smallest item id). Input order is preserved.
    """
    alive = [it for it in items if it.priority >= min_priority]
    best: dict[str, CatalogItem] = {}
    for it in alive:
        cur = best.get(it.image_name)
        if cur is None or (-it.priority, it.item_id) < (-cur.priority, cur.item_id):
            best[it.image_name] = it
    keep = {id(it) for it in best.values()}
    return [it for it in alive if id(it) in keep]


def _knn_edges(matrix: np.ndarray, i: int, tau: float, k: int) -> np.ndarray:
    """Neighbors of row i within tau, found by top-k queries.

    If the k-th neighbor still lies within tau the query repeats with k
    doubled, so the returned set always equals an exact scan's.
    """
    n = matrix.shape[0]
    dists = 1.0 - (matrix * matrix[i]).sum(axis=1)
    k_eff = min(k, n)
    while True:
        nearest = np.argpartition(dists, k_eff - 1)[:k_eff]
        if k_eff >= n or dists[nearest].max() > tau:
            break
        k_eff = min(2 * k_eff, n)
    hits = nearest[dists[nearest] <= tau]
    return hits[hits != i]


def build_dup_graph(
    items: list[CatalogItem], tau: float = DUP_DISTANCE_DEFAULT, k: int = KNN_DEFAULT
) -> DuplicationGraph:
    """Link every pair of items whose embeddings sit within cosine distance tau."""
    ids = [it.item_id for it in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate item ids in corpus")
    edges: set[tuple[str, str]] = set()
    if items:
        matrix = np.stack([np.asarray(it.embedding, dtype=np.float64) for it in items])
        for i in range(len(items)):
            for j in _knn_edges(matrix, i, tau, k):
                a, b = sorted((ids[i], ids[int(j)]))
                edges.add((a, b))
    return DuplicationGraph(nodes=tuple(ids), edges=frozenset(edges))


def connected_components(graph: DuplicationGraph) -> list[list[str]]:
    """Connected components via union-find; each component sorted by item id,
    components ordered by their smallest member."""
    uf = UnionFind(graph.nodes)
    for a, b in graph.edges:
        uf.union(a, b)
    return sorted((sorted(g) for g in uf.groups()), key=lambda g: g[0])


def retain_top(items: list[CatalogItem], components: list[list[str]]) -> list[CatalogItem]:
    """Keep the best item of each component: highest priority, then smallest id."""
    by_id = {it.item_id: it for it in items}
    seen: set[str] = set()
    survivors: set[str] = set()
    for component in components:
        champion = None
        for item_id in component:
            if item_id not in by_id:
                raise ValueError(f"component references unknown item {item_id!r}")
            if item_id in seen:
                raise ValueError(f"item {item_id!r} appears in two components")
            seen.add(item_id)
            it = by_id[item_id]
            if champion is None or (-it.priority, it.item_id) < (-champion.priority, champion.item_id):
                champion = it
        survivors.add(champion.item_id)
    return [it for it in items if it.item_id in survivors]


def dedup_catalog(
    items: list[CatalogItem],
    tau: float = DUP_DISTANCE_DEFAULT,
    min_priority: float = -math.inf,
    k: int = KNN_DEFAULT,
) -> list[CatalogItem]:
    """Full pipeline: prefilter, duplication graph, one survivor per component.

    The priority floor and image-name collapse run over the whole catalog
    (a shared image name means a shared product shot); the embedding-graph
    stage runs within each (fine class, gender) group, mirroring how search
    shards are built and deduplicated independently. Idempotent: running it
    on its own output changes nothing.
    """
    alive = prefilter(items, min_priority)
    survivors: set[str] = set()
    groups: dict[tuple[int, Gender], list[CatalogItem]] = {}
    for it in alive:
        groups.setdefault((it.fine_class, it.gender), []).append(it)
    for members in groups.values():
        graph = build_dup_graph(members, tau=tau, k=k)
        kept = retain_top(members, connected_components(graph))
        survivors.update(it.item_id for it in kept)
    return [it for it in alive if it.item_id in survivors]
