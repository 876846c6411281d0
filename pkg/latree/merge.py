"""Merge local subtrees along MST edges and bring every hidden label into one frame.

Subtrees of MST-adjacent leaders ``v_i`` and ``v_j`` disagree only on the
path between the two leaders. The merged path keeps the hidden nodes of both:
``v_i, hiddens(path_i), hiddens(path_j), v_j``. Everything else is attached
where its own subtree put it.

Labels are fixed in three steps. Inside a hidden node, extra triplets are
matched to the node's home triplet on their shared reference view. Inside a
group, every hidden-hidden joint is relabelled to have the identity as its
maximum-weight assignment. Across groups, the joint of the two hidden nodes
that meet on the merged path is estimated from both sides and projected onto
the nearest permutation.
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy.optimize import linear_sum_assignment

from latree.config import DUPLICATE_TOLERANCE, PERMUTATION_CONFIDENCE
from latree.errors import AlignmentError, ModelError
from latree.logging_setup import event
from latree.lrg import LocalSubtree
from latree.model import LatentTree, NodeKind, edge_key
from latree.mst import MstGraph

logger = logging.getLogger("latree.merge")

_AMBIGUITY = 1e-9


@dataclass(frozen=True)
class MergePlan:
    leader_edges: tuple[tuple[int, int], ...]
    paths: dict[tuple[int, int], list[int]]  # union path per leader-edge, from min to max


@dataclass
class PermutationMap:
    """Permutations keyed by (hidden node, triplet index).

    Index 0 relabels the node itself (relative to its home triplet); higher
    indices map an extra triplet's columns onto the home labels.
    """

    perms: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    ambiguous: list[tuple[int, int]] = field(default_factory=list)

    def get(self, node: int, idx: int, k: int) -> np.ndarray:
        return self.perms.get((node, idx), np.arange(k))


@dataclass
class MergeResult:
    edges: set[tuple[int, int]]
    plan: MergePlan
    subtrees: dict[int, LocalSubtree]


@dataclass(frozen=True)
class OutGroupAlignment:
    perm: np.ndarray
    joint: np.ndarray
    distance: float
    low_confidence: bool


@dataclass
class FinalModel:
    tree: LatentTree
    renumbered: dict[int, int]
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------
def union_paths(adj_i: LocalSubtree, adj_j: LocalSubtree, v_i: int, v_j: int) -> list[int]:
    for sub, name in ((adj_i, "v_i"), (adj_j, "v_j")):
        if v_i not in sub.dims or v_j not in sub.dims:
            raise AlignmentError(
                f"leaders {v_i} and {v_j} must both be in the subtree of {sub.leader} ({name} side)"
            )
    hid_i = [n for n in adj_i.path(v_i, v_j)[1:-1] if adj_i.is_hidden(n)]
    hid_j = [n for n in adj_j.path(v_i, v_j)[1:-1] if adj_j.is_hidden(n)]
    return [v_i, *hid_i, *hid_j, v_j]


def _path_edges(sub: LocalSubtree, a: int, b: int) -> set[tuple[int, int]]:
    path = sub.path(a, b)
    return {edge_key(x, y) for x, y in zip(path, path[1:])}


def merge_all(
    subtrees: list[LocalSubtree], mst: MstGraph, parallel: bool = False, threads: int = 1
) -> MergeResult:
    """Fold the subtrees together along leader-edges in ascending order."""
    started = time.perf_counter()
    by_leader = {s.leader: s for s in subtrees}
    if len(by_leader) != len(subtrees):
        raise AlignmentError("two subtrees share a leader")
    leader_edges = tuple(
        sorted((a, b) for a, b, _ in mst.edges if a in by_leader and b in by_leader)
    )

    def plan_edge(edge: tuple[int, int]) -> tuple[list[int], set[tuple[int, int]]]:
        a, b = edge
        path = union_paths(by_leader[a], by_leader[b], a, b)
        drop = _path_edges(by_leader[a], a, b) | _path_edges(by_leader[b], a, b)
        return path, drop

    if parallel and len(leader_edges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            planned = list(pool.map(plan_edge, leader_edges))
    else:
        planned = [plan_edge(e) for e in leader_edges]

    owner = {leader: leader for leader in by_leader}
    parts = {leader: set(sub.edges) for leader, sub in by_leader.items()}

    def find(x: int) -> int:
        while owner[x] != x:
            x = owner[x]
        return x

    paths: dict[tuple[int, int], list[int]] = {}
    for (a, b), (path, drop) in zip(leader_edges, planned):
        ra, rb = find(a), find(b)
        if ra == rb:
            raise AlignmentError(f"leader-edge {a}-{b} closes a cycle among groups")
        merged = (parts.pop(ra) | parts.pop(rb)) - drop
        merged |= {edge_key(x, y) for x, y in zip(path, path[1:])}
        g = nx.Graph(sorted(merged))
        if not nx.is_tree(g):
            raise AlignmentError(f"merging subtrees of leaders {a} and {b} produced a cycle")
        root = min(ra, rb)
        owner[max(ra, rb)] = root
        parts[root] = merged
        paths[(a, b)] = path

    if len(parts) != 1:
        raise AlignmentError(f"merge left {len(parts)} disconnected pieces")
    edges = next(iter(parts.values()))
    event(
        "merge",
        groups=len(subtrees),
        leader_edges=len(leader_edges),
        edges=len(edges),
        seconds=time.perf_counter() - started,
    )
    return MergeResult(edges, MergePlan(leader_edges, paths), by_leader)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------
def _column_match(ref: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, bool]:
    """Permutation of ``other``'s columns onto ``ref``'s by cosine similarity."""
    norm = np.linalg.norm(ref, axis=0)[:, None] * np.linalg.norm(other, axis=0)[None, :]
    score = (ref.T @ other) / np.where(norm > 0, norm, 1.0)
    rows, cols = linear_sum_assignment(score, maximize=True)
    best = score[rows, cols].sum()
    ambiguous = False
    for r1, r2 in itertools.combinations(range(len(rows)), 2):
        swapped = best - score[r1, cols[r1]] - score[r2, cols[r2]]
        swapped += score[r1, cols[r2]] + score[r2, cols[r1]]
        if best - swapped <= _AMBIGUITY:
            ambiguous = True
            break
    return cols, ambiguous


def assemble_local(sub: LocalSubtree, perms: PermutationMap | None = None) -> LatentTree:
    """Local parameters as a LatentTree, with ``perms`` applied.

    A subtree without hidden nodes (a group the MST already resolved as a
    path of observed nodes) yields a parameterless tree.
    """
    if sub.hidden and not sub.has_parameters:
        raise AlignmentError(f"subtree of leader {sub.leader} carries no parameters")
    perms = perms or PermutationMap()
    kinds: dict[int, NodeKind] = {n: ("hid" if sub.is_hidden(n) else "obs") for n in sub.dims}
    tree = LatentTree(k=sub.k, dims=dict(sub.dims), kinds=kinds, edges=set(sub.edges))
    for (w, o), idx in sorted(sub.estimates.items()):
        params = sub.triplets[w][idx]
        if idx > 0:
            params = params.permuted(perms.get(w, idx, sub.k))
        tree.params[(w, o)] = params.view(o).copy()
    for w in sub.hidden:
        tree.priors[w] = sub.triplets[w][0].pi.copy()
    for w in sub.hidden:
        if (w, 0) in perms.perms:
            tree.relabel(w, perms.perms[(w, 0)])
    return tree


def _hidden_bfs(tree: LatentTree, start: int | None) -> list[tuple[int, int]]:
    hidden = tree.hidden
    g = tree.graph().subgraph(hidden)
    order: list[tuple[int, int]] = []
    seen: set[int] = set()
    starts = ([start] if start is not None else []) + hidden
    for s in starts:
        if s in seen:
            continue
        component = nx.node_connected_component(g, s)
        seen |= component
        order.extend(nx.bfs_edges(g, s, sort_neighbors=sorted))
    return order


def align_in_group(sub: LocalSubtree, reference: int | None = None) -> PermutationMap:
    """Permutations that put every triplet of ``sub`` into one labelling."""
    pm = PermutationMap()
    for w in sub.hidden:
        home = sub.triplets[w][0]
        ref_view = sub.children[w][0]
        for idx, extra in enumerate(sub.triplets[w][1:], start=1):
            perm, ambiguous = _column_match(home.view(ref_view), extra.view(ref_view))
            pm.perms[(w, idx)] = perm
            if ambiguous:
                pm.ambiguous.append((w, idx))
                logger.warning(f"hidden node {w}: ambiguous alignment of triplet {idx}")

    tree = assemble_local(sub, pm)
    start = reference if reference is not None else sub.reference_hidden()
    for u, v in _hidden_bfs(tree, start):
        joint = tree.priors[u][:, None] * tree.conditional(u, v).T
        perm = linear_sum_assignment(joint, maximize=True)[1]
        tree.relabel(v, perm)
        pm.perms[(v, 0)] = perm
    return pm


def align_out_group(
    tree_i: LatentTree, tree_j: LatentTree, v_i: int, v_j: int, h1: int, h2: int
) -> OutGroupAlignment:
    """Permutation for group j's labels so the h1-h2 joint has the identity as its best matching.

    ``h1`` is group i's hidden node next to ``h2`` (group j's) on the merged
    leader path. Both directions of the edge are estimated through the leader
    on the far side and averaged into one joint.
    """
    try:
        a_vj_h1 = tree_i.conditional_along(h1, v_j)
        a_vj_h2 = tree_j.conditional_along(h2, v_j)
        a_vi_h1 = tree_i.conditional_along(h1, v_i)
        a_vi_h2 = tree_j.conditional_along(h2, v_i)
    except (ModelError, nx.NetworkXException) as exc:
        raise AlignmentError(f"cannot align across leaders {v_i}-{v_j}: {exc}") from exc
    e_hat = np.linalg.pinv(a_vj_h2) @ a_vj_h1  # E[h2 | h1]
    f_hat = np.linalg.pinv(a_vi_h1) @ a_vi_h2  # E[h1 | h2]
    joint = 0.5 * (tree_i.priors[h1][:, None] * e_hat.T + f_hat * tree_j.priors[h2][None, :])
    perm = linear_sum_assignment(joint, maximize=True)[1]
    projected = joint[:, perm]
    rows = projected.sum(axis=1, keepdims=True)
    normalized = projected / np.where(np.abs(rows) > 0, rows, 1.0)
    distance = float(np.max(np.abs(normalized - np.eye(len(perm)))))
    low = distance > PERMUTATION_CONFIDENCE
    if low:
        logger.warning(
            f"cross-group alignment {v_i}-{v_j} is {distance:.3f} from a permutation"
        )
    return OutGroupAlignment(perm, joint, distance, low)


def reference_leader(mst: MstGraph, leaders: list[int]) -> int:
    return min(leaders, key=lambda n: (-mst.degree(n), n))


@dataclass
class AlignedGroups:
    trees: dict[int, LatentTree]
    reference: int
    crossings: dict[tuple[int, int], tuple[int, int]]  # leader-edge -> (h1, h2), h1 aligned first
    in_group: dict[int, PermutationMap]
    out_group: dict[int, OutGroupAlignment]
    low_confidence: list[str]


def align_groups(merged: MergeResult, mst: MstGraph) -> AlignedGroups:
    """In-group alignment everywhere, then cross-group alignment outward from the reference."""
    in_group: dict[int, PermutationMap] = {}
    trees: dict[int, LatentTree] = {}
    low: list[str] = []
    for leader, sub in sorted(merged.subtrees.items()):
        pm = align_in_group(sub)
        in_group[leader] = pm
        trees[leader] = assemble_local(sub, pm)
        low.extend(f"ambiguous in-group match at hidden {w}, triplet {i}" for w, i in pm.ambiguous)

    leaders = sorted(merged.subtrees)
    reference = reference_leader(mst, leaders)
    leader_graph = nx.Graph()
    leader_graph.add_nodes_from(leaders)
    leader_graph.add_edges_from(merged.plan.leader_edges)

    crossings: dict[tuple[int, int], tuple[int, int]] = {}
    out_group: dict[int, OutGroupAlignment] = {}
    for i, j in nx.bfs_edges(leader_graph, reference, sort_neighbors=sorted):
        sub_i, sub_j = merged.subtrees[i], merged.subtrees[j]
        path = union_paths(sub_i, sub_j, i, j)
        hid_i = [n for n in path[1:-1] if n in sub_i.children]
        hid_j = [n for n in path[1:-1] if n in sub_j.children]
        if not hid_i or not hid_j:
            low.append(
                f"leaders {i}-{j}: no hidden pair on the merged path, labels left as learned"
            )
            continue
        h1, h2 = hid_i[-1], hid_j[0]
        result = align_out_group(trees[i], trees[j], i, j, h1, h2)
        for h in sub_j.hidden:
            trees[j].relabel(h, result.perm)
        crossings[edge_key(i, j)] = (h1, h2)
        out_group[j] = result
        if result.low_confidence:
            low.append(f"cross-group alignment {i}-{j} off by {result.distance:.3f}")
    return AlignedGroups(trees, reference, crossings, in_group, out_group, low)


# ---------------------------------------------------------------------------
# Final parameters
# ---------------------------------------------------------------------------
def _reverse(m: np.ndarray, prior_a: np.ndarray, prior_b: np.ndarray) -> np.ndarray:
    """E[h_a | h_b] from E[h_b | h_a] by Bayes."""
    return (prior_a[:, None] * m.T) / prior_b[None, :]


def finalize_parameters(
    merged: MergeResult, aligned: AlignedGroups, observed_dims: list[int]
) -> FinalModel:
    """Global tree with one transition per edge, rooted at the reference hidden node."""
    started = time.perf_counter()
    warnings: list[str] = []
    k = next(iter(merged.subtrees.values())).k
    hidden = sorted({h for sub in merged.subtrees.values() for h in sub.hidden})

    combined = LatentTree.empty(k, observed_dims)
    for h in hidden:
        combined.add_hidden(h)
    for a, b in sorted(merged.edges):
        combined.add_edge(a, b)

    # hidden node -> (prior, residual of its home triplet)
    homes: dict[int, tuple[np.ndarray, float]] = {}
    for leader, sub in sorted(merged.subtrees.items()):
        for h in sub.hidden:
            residual = sub.triplets[h][0].residual
            if h not in homes or residual < homes[h][1]:
                homes[h] = (aligned.trees[leader].priors[h], residual)
    for h, (prior, _) in homes.items():
        combined.priors[h] = prior

    candidates: dict[tuple[int, int], list[tuple[float, np.ndarray]]] = {}
    for leader, sub in sorted(merged.subtrees.items()):
        tree = aligned.trees[leader]
        for (w, o), idx in sub.estimates.items():
            if edge_key(w, o) in merged.edges:
                entry = (sub.triplets[w][idx].residual, tree.params[(w, o)])
                candidates.setdefault((w, o), []).append(entry)

    for (i, j), (h1, h2) in sorted(aligned.crossings.items()):
        if edge_key(h1, h2) not in merged.edges:
            continue
        side_1 = i if h1 in merged.subtrees[i].children else j
        side_2 = j if side_1 == i else i
        t1, t2 = aligned.trees[side_1], aligned.trees[side_2]
        v1, v2 = side_1, side_2
        p1, p2 = t1.priors[h1], t2.priors[h2]
        e_hat = np.linalg.pinv(t2.conditional_along(h2, v2)) @ t1.conditional_along(h1, v2)
        f_hat = np.linalg.pinv(t1.conditional_along(h1, v1)) @ t2.conditional_along(h2, v1)
        r1, r2 = homes[h1][1], homes[h2][1]
        w, o = max(h1, h2), min(h1, h2)
        options = candidates.setdefault((w, o), [])
        if w == h1:
            options += [(r2, e_hat), (r1, _reverse(f_hat, p2, p1))]
        else:
            options += [(r1, f_hat), (r2, _reverse(e_hat, p1, p2))]

    for (w, o), options in sorted(candidates.items()):
        options.sort(key=lambda item: item[0])
        best = options[0][1]
        for _, other in options[1:]:
            gap = float(np.max(np.abs(other - best)))
            if gap > DUPLICATE_TOLERANCE:
                msg = f"duplicate estimates for edge {w}-{o} differ by {gap:.3g}"
                warnings.append(msg)
                logger.warning(msg)
        combined.params[(w, o)] = best

    missing = [
        e for e in sorted(merged.edges)
        if any(combined.is_hidden(n) for n in e)
        and e not in {edge_key(w, o) for w, o in combined.params}
    ]
    if missing:
        raise AlignmentError(f"no parameter estimate for edges {missing}")
    if not hidden:
        raise AlignmentError("merged tree has no hidden node to root the parameters at")

    root = merged.subtrees[aligned.reference].reference_hidden()
    if root is None or root not in combined.dims:
        root = hidden[0]
    oriented: dict[tuple[int, int], np.ndarray] = {}
    for u, v in nx.bfs_edges(combined.graph(), root, sort_neighbors=sorted):
        if not combined.is_hidden(u):
            warnings.append(f"edge {u}-{v} hangs below observed node {u}; left unparameterized")
            continue
        oriented[(u, v)] = combined.conditional(u, v).copy()
    combined.params = oriented

    final, mapping = _renumbered(combined, observed_dims)
    event(
        "finalize",
        hidden=len(hidden),
        edges=len(merged.edges),
        warnings=len(warnings),
        seconds=time.perf_counter() - started,
    )
    return FinalModel(final, mapping, warnings)


def _renumbered(tree: LatentTree, observed_dims: list[int]) -> tuple[LatentTree, dict[int, int]]:
    p = len(observed_dims)
    mapping = {i: i for i in range(p)}
    for offset, h in enumerate(tree.hidden):
        mapping[h] = p + offset
    out = LatentTree.empty(tree.k, observed_dims, family=tree.family, noise=tree.noise)
    for h in tree.hidden:
        out.add_hidden(mapping[h])
    for a, b in tree.edges:
        out.add_edge(mapping[a], mapping[b])
    out.params = {(mapping[a], mapping[b]): m for (a, b), m in tree.params.items()}
    out.priors = {mapping[h]: v for h, v in tree.priors.items()}
    return out, mapping
