"""Structure and parameter quality: Robinson-Foulds distance and aligned parameter error."""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

from latree.errors import AlignmentError, LeafSetMismatchError, ModelError
from latree.model import LatentTree

Bipartition = frozenset  # the side holding the smallest observed id


def _splits(tree: LatentTree) -> dict[tuple[int, int], Bipartition]:
    """Leaf split of every edge, canonicalized to the side containing leaf 0."""
    g = tree.graph()
    leaves = frozenset(tree.observed)
    anchor = min(leaves)
    out: dict[tuple[int, int], Bipartition] = {}
    for a, b in sorted(tree.edges):
        g.remove_edge(a, b)
        side = frozenset(nx.node_connected_component(g, a)) & leaves
        g.add_edge(a, b)
        out[(a, b)] = side if anchor in side else leaves - side
    return out


def bipartitions(tree: LatentTree) -> set[Bipartition]:
    """Non-trivial splits (both sides with at least two leaves)."""
    n = len(tree.observed)
    return {s for s in _splits(tree).values() if 2 <= len(s) <= n - 2}


def robinson_foulds(t1: LatentTree, t2: LatentTree) -> float:
    if set(t1.observed) != set(t2.observed):
        raise LeafSetMismatchError(
            f"trees have different leaf sets: {sorted(set(t1.observed) ^ set(t2.observed))}"
        )
    b1, b2 = bipartitions(t1), bipartitions(t2)
    total = len(b1) + len(b2)
    if total == 0:
        return 0.0
    return len(b1 ^ b2) / total


@dataclass(frozen=True)
class ParameterError:
    max_column_error: float
    prior_error: float
    permutation: tuple[int, ...]  # est state permutation[r] corresponds to truth state r
    hidden_map: dict[int, int]  # truth hidden id -> est hidden id


def match_hidden(est: LatentTree, truth: LatentTree) -> dict[int, int]:
    """Pair hidden nodes of two same-topology trees by the splits of their incident edges."""
    def signatures(tree: LatentTree) -> dict[frozenset, int]:
        splits = _splits(tree)
        out: dict[frozenset, int] = {}
        for h in tree.hidden:
            sig = frozenset(splits[(min(h, n), max(h, n))] for n in tree.neighbors(h))
            out[sig] = h
        return out

    est_sigs = signatures(est)
    mapping: dict[int, int] = {}
    for sig, h in signatures(truth).items():
        if sig not in est_sigs:
            raise AlignmentError(f"hidden node {h} of the reference tree has no counterpart")
        mapping[h] = est_sigs[sig]
    return mapping


def parameter_error(est: LatentTree, truth: LatentTree) -> ParameterError:
    """Largest column l2 error over all edges under the best global state permutation."""
    if robinson_foulds(est, truth) != 0.0:
        raise AlignmentError("parameter error needs identical structures")
    if est.k != truth.k:
        raise AlignmentError(f"hidden state counts differ: {est.k} vs {truth.k}")
    mapping = match_hidden(est, truth)
    node = {**{o: o for o in truth.observed}, **mapping}

    try:
        leaf_edges = [
            (truth.conditional(h, x), est.conditional(node[h], x))
            for h in truth.hidden
            for x in truth.neighbors(h)
            if not truth.is_hidden(x)
        ]
        score = np.zeros((truth.k, truth.k))
        for t, e in leaf_edges:
            score -= np.linalg.norm(t[:, :, None] - e[:, None, :], axis=0)
        perm = linear_sum_assignment(score, maximize=True)[1]

        worst = 0.0
        for a, b in sorted(truth.edges):
            for u, v in ((a, b), (b, a)):
                if not truth.is_hidden(u):
                    continue
                t = truth.conditional(u, v)
                e = est.conditional(node[u], node[v])[:, perm]
                if truth.is_hidden(v):
                    e = e[perm, :]
                worst = max(worst, float(np.max(np.linalg.norm(t - e, axis=0))))
    except ModelError as exc:
        raise AlignmentError(f"cannot compare parameters: {exc}") from exc

    prior_error = max(
        (float(np.max(np.abs(est.priors[node[h]][perm] - truth.priors[h]))) for h in truth.hidden),
        default=0.0,
    )
    return ParameterError(worst, prior_error, tuple(int(i) for i in perm), mapping)
