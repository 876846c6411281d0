"""Synthetic models with known answers: generator, sampler, exact moments and distances."""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Sequence
from typing import Literal

import networkx as nx
import numpy as np
import scipy.sparse as sp

from latree.config import CONDITIONING_FLOOR
from latree.distances import DistanceMatrix, info_distance
from latree.errors import ModelError
from latree.model import Family, GroundTruthModel, LatentTree, SampleSet, edge_key

logger = logging.getLogger("latree.oracle")

Topology = Literal["balanced", "caterpillar", "random"]

_MAX_DRAWS = 1000


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------
def _balanced(tree: LatentTree, p: int) -> int:
    queue = deque(range(p))
    while len(queue) > 3:
        a, b = queue.popleft(), queue.popleft()
        h = tree.add_hidden()
        tree.add_edge(h, a)
        tree.add_edge(h, b)
        queue.append(h)
    root = tree.add_hidden()
    for node in queue:
        tree.add_edge(root, node)
    return root


def _caterpillar(tree: LatentTree, p: int) -> int:
    spine = [tree.add_hidden() for _ in range(p - 2)]
    for a, b in zip(spine, spine[1:]):
        tree.add_edge(a, b)
    leaves = iter(range(p))
    for i, h in enumerate(spine):
        ends = (i == 0) + (i == len(spine) - 1)
        for _ in range(1 + ends if len(spine) > 1 else 3):
            tree.add_edge(h, next(leaves))
    return spine[-1]


def _random_degree(tree: LatentTree, p: int, max_degree: int, rng: np.random.Generator) -> int:
    if max_degree < 3:
        raise ModelError(f"max_degree must be >= 3, got {max_degree}")
    pool = list(range(p))
    while len(pool) > max_degree:
        take = int(rng.integers(2, min(max_degree - 1, len(pool) - 2) + 1))
        picked = set(rng.choice(len(pool), size=take, replace=False).tolist())
        h = tree.add_hidden()
        for idx in sorted(picked):
            tree.add_edge(h, pool[idx])
        pool = [node for i, node in enumerate(pool) if i not in picked] + [h]
    root = tree.add_hidden()
    for node in pool:
        tree.add_edge(root, node)
    return root


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------
def _conditioned(draw, floor: float) -> np.ndarray:
    for _ in range(_MAX_DRAWS):
        m = draw()
        if np.linalg.svd(m, compute_uv=False)[-1] >= floor:
            return m
    raise ModelError(f"could not draw a transition with smallest singular value >= {floor}")


def _hidden_transition(k: int, rng: np.random.Generator, floor: float) -> np.ndarray:
    def draw() -> np.ndarray:
        s = rng.uniform(0.05, 0.25)
        mix = rng.dirichlet(np.ones(k), size=k).T
        return (1 - s) * np.eye(k) + s * mix

    return _conditioned(draw, floor)


def _observed_transition(
    d: int, k: int, family: Family, rng: np.random.Generator, floor: float
) -> np.ndarray:
    def draw() -> np.ndarray:
        if family == "gaussian":
            return rng.normal(size=(d, k))
        peaks = rng.choice(d, size=k, replace=False)
        base = np.zeros((d, k))
        base[peaks, np.arange(k)] = 1.0
        s = rng.uniform(0.1, 0.4)
        return (1 - s) * base + s * rng.dirichlet(np.ones(d), size=k).T

    return _conditioned(draw, floor)


def random_latent_tree(
    p: int,
    k: int,
    dims: int | Sequence[int] | None = None,
    topology: Topology = "balanced",
    seed: int = 0,
    family: Family = "discrete",
    noise: float = 0.5,
    max_degree: int = 4,
    floor: float = CONDITIONING_FLOOR,
) -> GroundTruthModel:
    """Draw an identifiable model: observed leaves, hidden nodes of degree >= 3.

    Hidden-hidden transitions are diagonally dominant, so the model's own
    state labels already satisfy the alignment convention used when learning.
    """
    if p < 3:
        raise ModelError(f"need at least 3 observed nodes, got p={p}")
    if dims is None:
        dims = k
    dim_list = [int(dims)] * p if isinstance(dims, (int, np.integer)) else [int(d) for d in dims]
    if len(dim_list) != p:
        raise ModelError(f"dims has {len(dim_list)} entries for p={p}")
    if k < 1 or k > min(dim_list):
        raise ModelError(f"k={k} must satisfy 1 <= k <= min(dims)={min(dim_list)}")

    rng = np.random.default_rng(seed)
    tree = LatentTree.empty(
        k, dim_list, family=family, noise=noise if family == "gaussian" else 0.0
    )
    if topology == "balanced":
        root = _balanced(tree, p)
    elif topology == "caterpillar":
        root = _caterpillar(tree, p)
    elif topology == "random":
        root = _random_degree(tree, p, max_degree, rng)
    else:
        raise ModelError(f"unknown topology {topology!r}")

    prior = 0.5 / k + 0.5 * rng.dirichlet(np.ones(k))
    tree.priors[root] = prior / prior.sum()
    for parent, child in nx.bfs_edges(tree.graph(), root):
        if tree.is_hidden(child):
            trans = _hidden_transition(k, rng, floor)
            tree.params[(parent, child)] = trans
            tree.priors[child] = trans @ tree.priors[parent]
        else:
            tree.params[(parent, child)] = _observed_transition(
                tree.dims[child], k, family, rng, floor
            )
    return GroundTruthModel(tree=tree, k=k, dims=dim_list, seed=seed)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------
def _draw_columns(probs: np.ndarray, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per sample from column ``states[n]`` of ``probs``."""
    cumulative = np.cumsum(probs, axis=0)[:, states]
    u = rng.random(states.size)
    return np.minimum((u[None, :] > cumulative).sum(axis=0), probs.shape[0] - 1)


def sample_model(model: GroundTruthModel | LatentTree, n: int, seed: int = 0) -> SampleSet:
    """Ancestral sampling from the hidden root down to the observed leaves."""
    tree = model.tree if isinstance(model, GroundTruthModel) else model
    rng = np.random.default_rng(seed)
    root = tree.root()
    states = {root: rng.choice(tree.k, size=n, p=tree.priors[root])}
    values: dict[int, np.ndarray | sp.csr_matrix] = {}
    for parent, child in nx.bfs_edges(tree.graph(), root):
        trans = tree.conditional(parent, child)
        d = tree.dims[child]
        if tree.is_hidden(child):
            states[child] = _draw_columns(trans, states[parent], rng)
        elif tree.family == "gaussian":
            values[child] = trans[:, states[parent]] + tree.noise * rng.normal(size=(d, n))
        else:
            cats = _draw_columns(trans, states[parent], rng)
            values[child] = sp.csr_matrix((np.ones(n), (cats, np.arange(n))), shape=(d, n))
    return SampleSet(tuple(values[i] for i in tree.observed), n)


# ---------------------------------------------------------------------------
# Exact moments / distances
# ---------------------------------------------------------------------------
def _self_moment(tree: LatentTree, node: int) -> np.ndarray:
    if tree.is_hidden(node):
        return np.diag(tree.priors[node])
    neighbors = tree.neighbors(node)
    if len(neighbors) != 1 or not tree.is_hidden(neighbors[0]):
        raise ModelError(f"observed node {node} is not a leaf under a hidden node")
    h = neighbors[0]
    a = tree.conditional(h, node)
    pi = tree.priors[h]
    if tree.family == "gaussian":
        return (a * pi) @ a.T + tree.noise**2 * np.eye(a.shape[0])
    return np.diag(a @ pi)


def _joining_node(tree: LatentTree, nodes: Sequence[int]) -> int:
    paths = [set(tree.path(a, b)) for i, a in enumerate(nodes) for b in nodes[i + 1 :]]
    common = set.intersection(*paths)
    if len(common) != 1:
        raise ModelError(f"nodes {tuple(nodes)} have no unique joining node")
    return common.pop()


def exact_moments(model: GroundTruthModel | LatentTree, query: Sequence[int]) -> np.ndarray:
    """Population moment for a pair (matrix) or a triple (third-order tensor)."""
    tree = model.tree if isinstance(model, GroundTruthModel) else model
    for node in query:
        if node not in tree.dims:
            raise ModelError(f"node {node} is not in the tree")
    if len(query) == 2:
        a, b = query
        if a == b:
            return _self_moment(tree, a)
        path = tree.path(a, b)
        c = next((n for n in path if tree.is_hidden(n)), None)
        if c is None:
            raise ModelError(f"path {a}-{b} has no hidden node")
        left = tree.conditional_along(c, a) if a != c else np.eye(tree.k)
        right = tree.conditional_along(c, b) if b != c else np.eye(tree.k)
        return (left * tree.priors[c]) @ right.T
    if len(query) == 3:
        if len(set(query)) != 3:
            raise ModelError(f"triple query needs distinct nodes, got {tuple(query)}")
        j = _joining_node(tree, query)
        if not tree.is_hidden(j):
            raise ModelError(f"nodes {tuple(query)} meet at observed node {j}")
        views = [tree.conditional_along(j, n) if n != j else np.eye(tree.k) for n in query]
        return np.einsum("r,ir,jr,kr->ijk", tree.priors[j], *views)
    raise ModelError(f"moment queries take 2 or 3 nodes, got {len(query)}")


class ModelMoments:
    """MomentSource answering with population moments of a known model."""

    def __init__(self, model: GroundTruthModel | LatentTree):
        self.tree = model.tree if isinstance(model, GroundTruthModel) else model

    @property
    def observed(self) -> list[int]:
        return self.tree.observed

    def dim(self, node: int) -> int:
        return self.tree.dims[node]

    def pair(self, a: int, b: int) -> np.ndarray:
        if a > b:
            return exact_moments(self.tree, (b, a)).T.copy()
        return exact_moments(self.tree, (a, b))

    def triple(self, a: int, b: int, c: int) -> np.ndarray:
        return exact_moments(self.tree, (a, b, c))


def exact_distances(model: GroundTruthModel | LatentTree) -> DistanceMatrix:
    """Information distances between every pair of nodes, observed and hidden."""
    tree = model.tree if isinstance(model, GroundTruthModel) else model
    nodes = sorted(tree.dims)
    selfs = {n: _self_moment(tree, n) for n in nodes}
    values = np.zeros((len(nodes), len(nodes)))
    for i, a in enumerate(nodes):
        for j in range(i + 1, len(nodes)):
            b = nodes[j]
            value = info_distance(exact_moments(tree, (a, b)), selfs[a], selfs[b], tree.k)
            if not np.isfinite(value):
                raise ModelError(f"model is ill-conditioned: distance {a}-{b} is infinite")
            values[i, j] = values[j, i] = max(value, 0.0)
    return DistanceMatrix(values, nodes)


def surrogate_contraction(model: GroundTruthModel | LatentTree) -> set[tuple[int, int]]:
    """Edges left after contracting every hidden node onto its nearest observed node."""
    tree = model.tree if isinstance(model, GroundTruthModel) else model
    dist = exact_distances(tree)
    observed = tree.observed
    surrogate = {o: o for o in observed}
    for h in tree.hidden:
        row = [dist(h, o) for o in observed]
        surrogate[h] = observed[int(np.argmin(row))]
    return {
        edge_key(surrogate[a], surrogate[b])
        for a, b in tree.edges
        if surrogate[a] != surrogate[b]
    }
