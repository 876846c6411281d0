"""Minimum spanning tree over observed nodes and the local groups it induces."""

from __future__ import annotations

import heapq
import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np

from latree.distances import DistanceMatrix
from latree.errors import DisconnectedGraphError
from latree.logging_setup import event
from latree.model import edge_key

logger = logging.getLogger("latree.mst")


@dataclass(frozen=True)
class MstGraph:
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int, float], ...]  # (min id, max id, weight), sorted

    def edge_set(self) -> set[tuple[int, int]]:
        return {(a, b) for a, b, _ in self.edges}

    def neighbors(self, node: int) -> list[int]:
        return sorted(b if a == node else a for a, b, _ in self.edges if node in (a, b))

    def degree(self, node: int) -> int:
        return sum(1 for a, b, _ in self.edges if node in (a, b))

    @property
    def weight(self) -> float:
        return float(sum(w for _, _, w in self.edges))


@dataclass(frozen=True)
class Group:
    leader: int
    members: tuple[int, ...]  # sorted, includes the leader


class _UnionFind:
    def __init__(self, nodes):
        self.parent = {n: n for n in nodes}

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True

    def components(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for n in self.parent:
            groups.setdefault(self.find(n), []).append(n)
        return sorted(sorted(g) for g in groups.values())


def _components(dist: DistanceMatrix) -> list[list[int]]:
    uf = _UnionFind(dist.ids)
    finite = np.isfinite(dist.values)
    for i, j in zip(*np.nonzero(np.triu(finite, 1))):
        uf.union(dist.ids[i], dist.ids[j])
    return uf.components()


def _prim(dist: DistanceMatrix) -> list[tuple[int, int, float]]:
    ids = dist.ids
    visited = {ids[0]}
    heap: list[tuple[float, int, int, int]] = []

    def push(i: int) -> None:
        row = dist.values[i]
        for j, node in enumerate(ids):
            if node not in visited and math.isfinite(row[j]):
                lo, hi = edge_key(ids[i], node)
                heapq.heappush(heap, (float(row[j]), lo, hi, node))

    push(0)
    edges = []
    while heap and len(visited) < len(ids):
        w, lo, hi, node = heapq.heappop(heap)
        if node in visited:
            continue
        visited.add(node)
        edges.append((lo, hi, w))
        push(ids.index(node))
    return edges


def _boruvka(dist: DistanceMatrix, threads: int) -> list[tuple[int, int, float]]:
    ids = np.asarray(dist.ids)
    uf = _UnionFind(dist.ids)
    edges: dict[tuple[int, int], float] = {}

    def cheapest(component: list[int]) -> tuple[float, int, int] | None:
        inside = np.isin(ids, component)
        rows = np.flatnonzero(inside)
        cols = np.flatnonzero(~inside)
        block = dist.values[np.ix_(rows, cols)]
        r, c = np.nonzero(np.isfinite(block))
        if r.size == 0:
            return None
        a, b = ids[rows[r]], ids[cols[c]]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        best = np.lexsort((hi, lo, block[r, c]))[0]
        return float(block[r[best], c[best]]), int(lo[best]), int(hi[best])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        while True:
            components = uf.components()
            if len(components) == 1:
                break
            found = [e for e in pool.map(cheapest, components) if e is not None]
            if not found:
                break
            for w, lo, hi in sorted(found):
                if uf.union(lo, hi):
                    edges[(lo, hi)] = w
    return [(lo, hi, w) for (lo, hi), w in edges.items()]


def build_mst(
    dist: DistanceMatrix, algorithm: Literal["prim", "boruvka"] = "prim", threads: int = 1
) -> MstGraph:
    """MST under the total order (weight, min id, max id); unique, so both algorithms agree."""
    started = time.perf_counter()
    if algorithm == "boruvka":
        edges = _boruvka(dist, threads)
    else:
        edges = _prim(dist)
    if len(edges) != len(dist.ids) - 1:
        raise DisconnectedGraphError(_components(dist))
    mst = MstGraph(tuple(dist.ids), tuple(sorted(edges, key=lambda e: (e[0], e[1]))))
    event(
        "mst",
        algorithm=algorithm,
        nodes=len(dist.ids),
        weight=mst.weight,
        seconds=time.perf_counter() - started,
    )
    return mst


def extract_groups(mst: MstGraph) -> list[Group]:
    """One group per internal MST node: the leader plus its neighbours."""
    if len(mst.nodes) < 3:
        raise ValueError(f"need at least 3 nodes to form groups, got {len(mst.nodes)}")
    groups = []
    for node in sorted(mst.nodes):
        nbrs = mst.neighbors(node)
        if len(nbrs) >= 2:
            groups.append(Group(node, tuple(sorted([node, *nbrs]))))
    return groups


def group_stats(mst: MstGraph) -> dict:
    """Largest closed neighbourhood (gamma) and the MST degree histogram."""
    degrees = Counter(mst.degree(n) for n in mst.nodes)
    gamma = max(mst.degree(n) for n in mst.nodes) + 1 if mst.nodes else 0
    return {"gamma": gamma, "degree_histogram": dict(sorted(degrees.items()))}
