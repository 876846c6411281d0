"""Domain types for linear latent tree models.

Observed nodes carry ids ``0..p-1``; hidden nodes are numbered after them.
Transition matrices are stored per directed edge ``(parent, child)`` with a
hidden parent: ``params[(h, c)] = E[y_c | h]``, shape ``dim(c) x k``, one
column per hidden state. Priors are stored for every hidden node.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Literal

import networkx as nx
import numpy as np
import scipy.sparse as sp

from latree.errors import ModelError

NodeKind = Literal["obs", "hid"]
Family = Literal["discrete", "gaussian"]


@dataclass(frozen=True, order=True)
class NodeId:
    index: int
    kind: NodeKind

    @property
    def observed(self) -> bool:
        return self.kind == "obs"


def edge_key(a: int, b: int) -> tuple[int, int]:
    """Unordered edge in canonical (min, max) form."""
    return (a, b) if a < b else (b, a)


@dataclass
class LatentTree:
    k: int
    dims: dict[int, int]
    kinds: dict[int, NodeKind]
    edges: set[tuple[int, int]] = field(default_factory=set)
    params: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    priors: dict[int, np.ndarray] = field(default_factory=dict)
    family: Family = "discrete"
    noise: float = 0.0

    # -- construction -------------------------------------------------------
    @classmethod
    def empty(cls, k: int, observed_dims: Iterable[int], **kwargs) -> LatentTree:
        dims = {i: int(d) for i, d in enumerate(observed_dims)}
        kinds: dict[int, NodeKind] = {i: "obs" for i in dims}
        return cls(k=k, dims=dims, kinds=kinds, **kwargs)

    def add_hidden(self, node: int | None = None) -> int:
        if node is None:
            node = max(self.dims, default=-1) + 1
        if node in self.dims:
            raise ModelError(f"node {node} already exists")
        self.dims[node] = self.k
        self.kinds[node] = "hid"
        return node

    def add_edge(self, a: int, b: int) -> None:
        if a not in self.dims or b not in self.dims:
            raise ModelError(f"edge ({a}, {b}) references an unknown node")
        if a == b:
            raise ModelError(f"self-loop on node {a}")
        self.edges.add(edge_key(a, b))

    def copy(self) -> LatentTree:
        return LatentTree(
            k=self.k,
            dims=dict(self.dims),
            kinds=dict(self.kinds),
            edges=set(self.edges),
            params={key: m.copy() for key, m in self.params.items()},
            priors={h: v.copy() for h, v in self.priors.items()},
            family=self.family,
            noise=self.noise,
        )

    # -- queries ------------------------------------------------------------
    @property
    def nodes(self) -> list[NodeId]:
        return [NodeId(i, self.kinds[i]) for i in sorted(self.dims)]

    @property
    def observed(self) -> list[int]:
        return sorted(i for i, kind in self.kinds.items() if kind == "obs")

    @property
    def hidden(self) -> list[int]:
        return sorted(i for i, kind in self.kinds.items() if kind == "hid")

    def is_hidden(self, node: int) -> bool:
        try:
            return self.kinds[node] == "hid"
        except KeyError:
            raise ModelError(f"node {node} is not in the tree") from None

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(sorted(self.dims))
        g.add_edges_from(sorted(self.edges))
        return g

    def neighbors(self, node: int) -> list[int]:
        return sorted(b if a == node else a for a, b in self.edges if node in (a, b))

    def path(self, a: int, b: int) -> list[int]:
        for node in (a, b):
            if node not in self.dims:
                raise ModelError(f"node {node} is not in the tree")
        return nx.shortest_path(self.graph(), a, b)

    def is_tree(self) -> bool:
        return len(self.dims) > 0 and nx.is_tree(self.graph())

    # -- parameters -----------------------------------------------------------
    def root(self) -> int:
        """Hidden node the parameters are rooted at (the one that is nobody's child)."""
        children = {c for _, c in self.params}
        candidates = [h for h in self.hidden if h not in children]
        if not candidates:
            raise ModelError("no hidden root: tree has no hidden nodes or cyclic parameters")
        return candidates[0]

    def conditional(self, u: int, v: int) -> np.ndarray:
        """E[y_v | h_u] for adjacent nodes with ``u`` hidden, reversing stored edges by Bayes."""
        if not self.is_hidden(u):
            raise ModelError(f"conditionals are taken given a hidden node, got {u}")
        if (u, v) in self.params:
            return self.params[(u, v)]
        if (v, u) in self.params:
            # joint[r, s] = P(h_v = r, h_u = s)
            joint = self.priors[v][:, None] * self.params[(v, u)].T
            return joint / self.priors[u][None, :]
        raise ModelError(f"no parameters for edge ({u}, {v})")

    def conditional_along(self, src: int, dst: int) -> np.ndarray:
        """E[y_dst | h_src] by chaining edge conditionals along the tree path."""
        if not self.is_hidden(src):
            raise ModelError(f"path conditionals must start at a hidden node, got {src}")
        path = self.path(src, dst)
        out = np.eye(self.k)
        for u, v in zip(path, path[1:]):
            if not self.is_hidden(u):
                raise ModelError(f"path {src}->{dst} passes through observed node {u}")
            out = self.conditional(u, v) @ out
        return out

    def rerooted(self, root: int) -> LatentTree:
        """Same model with every edge parameter oriented away from hidden ``root``."""
        if not self.is_hidden(root):
            raise ModelError(f"root must be hidden, got {root}")
        out = self.copy()
        out.params = {}
        for u, v in nx.bfs_edges(self.graph(), root):
            if self.params:
                out.params[(u, v)] = self.conditional(u, v).copy()
        return out

    def relabel(self, node: int, perm: np.ndarray | Iterable[int]) -> None:
        """Rename the states of hidden ``node``: new state r is old state ``perm[r]``."""
        perm = np.asarray(list(perm) if not isinstance(perm, np.ndarray) else perm)
        for (a, b), m in list(self.params.items()):
            if a == node:
                m = m[:, perm]
            if b == node:
                m = m[perm, :]
            self.params[(a, b)] = m
        if node in self.priors:
            self.priors[node] = self.priors[node][perm]


@dataclass
class GroundTruthModel:
    tree: LatentTree
    k: int
    dims: list[int]
    seed: int

    @property
    def p(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class SampleSet:
    """Per observed variable a ``d_i x N`` matrix, dense ndarray or scipy sparse."""

    values: tuple[np.ndarray | sp.spmatrix, ...]
    n: int

    def __post_init__(self) -> None:
        for i, x in enumerate(self.values):
            if x.ndim != 2 or x.shape[1] != self.n:
                raise ModelError(f"variable {i} has shape {x.shape}, expected (d, {self.n})")

    @property
    def p(self) -> int:
        return len(self.values)

    @property
    def dims(self) -> list[int]:
        return [int(x.shape[0]) for x in self.values]

    def dense(self, var: int, start: int = 0, stop: int | None = None) -> np.ndarray:
        x = self.values[var][:, start:stop]
        return x.toarray() if sp.issparse(x) else np.asarray(x, dtype=float)

    def empty_rows(self) -> list[tuple[int, int]]:
        """(variable, coordinate) pairs that are zero in every sample."""
        out = []
        for i, x in enumerate(self.values):
            mass = np.asarray(abs(x).sum(axis=1)).ravel()
            out.extend((i, int(c)) for c in np.flatnonzero(mass == 0))
        return out


def check_invariants(tree: LatentTree, atol: float = 1e-12) -> list[str]:
    """Human-readable violations of the latent tree invariants (empty when valid)."""
    problems: list[str] = []
    if not tree.is_tree():
        problems.append("edge set is not a spanning tree")
    observed = tree.observed
    if observed != list(range(len(observed))):
        problems.append("observed ids are not 0..p-1")
    if tree.hidden and min(tree.hidden) < len(observed):
        problems.append("hidden ids collide with the observed range")
    for h in tree.hidden:
        degree = len(tree.neighbors(h))
        if degree < 3:
            problems.append(f"hidden node {h} has degree {degree} < 3")
    for (a, b), m in sorted(tree.params.items()):
        if m.shape != (tree.dims[b], tree.k):
            problems.append(f"transition {a}-{b} has shape {m.shape}")
            continue
        if np.linalg.matrix_rank(m) < tree.k:
            problems.append(f"transition {a}-{b} is not full column rank")
    for h, prior in sorted(tree.priors.items()):
        if np.any(prior <= 0) or abs(prior.sum() - 1.0) > atol:
            problems.append(f"prior of hidden node {h} is not a positive distribution")
    return problems
