"""Local recursive grouping: learn the latent subtree of one MST group.

Pairs of the active set are classified with the statistic
``phi(a, b; c) = d(a, c) - d(b, c)``: it equals ``d(a, b)`` for every witness
when ``b`` sits between ``a`` and the rest, and is constant strictly inside
``(-d(a, b), d(a, b))`` when ``a`` and ``b`` share a parent. Pairwise related
sets form families; each family is replaced by its parent, or by a new hidden node
whose distances follow from additivity. Every new hidden node is decomposed
on a triplet of its neighbours as soon as it appears, so later rounds can use
it as a view.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal

import networkx as nx
import numpy as np
import scipy.sparse as sp

from latree.config import CHUNK, EPSILON_RETRIES, RunConfig
from latree.distances import DistanceMatrix
from latree.errors import ModelError, NonConvergenceError
from latree.logging_setup import event
from latree.model import edge_key
from latree.moments import MomentSource, SampleMoments
from latree.mst import Group
from latree.tensor import TripletParams, decompose_triplet, posterior_hidden

logger = logging.getLogger("latree.lrg")

Relation = Literal["a-leaf-of-b", "b-leaf-of-a", "siblings", "unrelated"]


# ---------------------------------------------------------------------------
# Tests on distances
# ---------------------------------------------------------------------------
def phi(a: int, b: int, c: int, dist: DistanceMatrix) -> float:
    d_ac, d_bc = dist(a, c), dist(b, c)
    if math.isinf(d_ac) or math.isinf(d_bc):
        raise ValueError(f"phi({a}, {b}; {c}) involves an infinite distance")
    return d_ac - d_bc


@dataclass
class ActiveSet:
    nodes: list[int]
    round: int = 0

    def __len__(self) -> int:
        return len(self.nodes)


def _witness_slack(a: int, b: int, witnesses: list[int], dist: DistanceMatrix) -> np.ndarray:
    """Standard error of phi(a, b; c) per witness, ignoring the shared-path correlation."""
    return np.array([math.hypot(dist.noise(a, c), dist.noise(b, c)) for c in witnesses])


def _classify(
    a: int, b: int, nodes: list[int], dist: DistanceMatrix, eps: float, noise_z: float
) -> tuple[Relation, float]:
    """Relation of a pair and how far inside its tolerance it sits (lower is firmer)."""
    witnesses = [c for c in nodes if c not in (a, b)]
    if not witnesses:
        raise ValueError(f"no witness for pair ({a}, {b}); need at least 3 active nodes")
    d_ab = dist(a, b)
    values = np.array([phi(a, b, c, dist) for c in witnesses])
    slack = noise_z * _witness_slack(a, b, witnesses, dist)
    leaf_slack = np.hypot(slack, noise_z * dist.noise(a, b))
    for rel, target in (("a-leaf-of-b", d_ab), ("b-leaf-of-a", -d_ab)):
        excess = np.abs(values - target) - leaf_slack
        if np.max(excess) <= eps:
            return rel, float(np.max(excess))  # type: ignore[return-value]
    if np.any(slack > 0):
        weights = 1.0 / np.maximum(slack, 1e-12) ** 2
        center = float(np.sum(weights * values) / np.sum(weights))
    else:
        center = 0.5 * (values.max() + values.min())
    excess = np.abs(values - center) - slack
    inside = np.all((values > -d_ab + eps) & (values < d_ab - eps))
    if np.max(excess) <= 0.5 * eps and inside:
        return "siblings", float(np.max(excess))
    return "unrelated", math.inf


def classify_pair(
    a: int,
    b: int,
    active: ActiveSet | list[int],
    dist: DistanceMatrix,
    eps: float,
    noise_z: float = 0.0,
) -> Relation:
    """Leaf, sibling or no relation between ``a`` and ``b`` over the active witnesses.

    With standard errors on ``dist`` every witness gets ``noise_z`` of them
    as extra slack on top of ``eps``.
    """
    nodes = active.nodes if isinstance(active, ActiveSet) else list(active)
    return _classify(a, b, nodes, dist, eps, noise_z)[0]


def families_of(
    nodes: list[int],
    relations: dict[tuple[int, int], Relation],
    margins: dict[tuple[int, int], float],
) -> list[list[int]]:
    """Group related nodes so that every family is pairwise related.

    Pairs are joined firmest first; two families only merge when every
    cross pair is related, so one spurious relation cannot chain families.
    """
    family_of: dict[int, frozenset[int]] = {n: frozenset([n]) for n in nodes}
    for a, b in sorted(relations, key=lambda pair: (margins[pair], pair)):
        fa, fb = family_of[a], family_of[b]
        if fa == fb:
            continue
        if all(edge_key(x, y) in relations for x in fa for y in fb):
            merged = fa | fb
            for n in merged:
                family_of[n] = merged
    return sorted(sorted(f) for f in set(family_of.values()))


def introduce_hidden(
    node: int,
    siblings: list[int],
    witnesses: list[int],
    dist: DistanceMatrix,
    eps: float = 0.0,
    descendants: dict[int, set[int]] | None = None,
    noise_z: float = 0.0,
) -> tuple[DistanceMatrix, dict[int, float]]:
    """Extend ``dist`` with a parent ``node`` for ``siblings``.

    ``witnesses`` is the pool phi is averaged over (the active set; each pair
    skips itself). With standard errors on ``dist`` the average is weighted
    by inverse variance and the new row gets standard errors of its own.
    Returns the extended matrix and the sibling edge lengths.
    """
    if len(siblings) < 2:
        raise ValueError(f"need at least 2 siblings, got {siblings}")
    descendants = descendants or {}
    lengths: dict[int, float] = {}
    spread: dict[int, float] = {}
    for vi in siblings:
        estimates = []
        for vj in siblings:
            if vj == vi:
                continue
            pool = [c for c in witnesses if c not in (vi, vj)]
            if not pool:
                raise ValueError(f"no witness to place a parent above ({vi}, {vj})")
            values = np.array([phi(vi, vj, c, dist) for c in pool])
            slack = _witness_slack(vi, vj, pool, dist)
            weights = 1.0 / np.maximum(slack, 1e-12) ** 2 if np.all(slack > 0) else None
            phi_bar = float(np.average(values, weights=weights))
            estimates.append(0.5 * (dist(vi, vj) + phi_bar))
        length = float(np.mean(estimates))
        spread[vi] = float(np.mean([dist.noise(vi, vj) for vj in siblings if vj != vi]))
        if length < -(eps + noise_z * spread[vi]):
            raise ModelError(
                f"negative edge length {length:.3g} between {vi} and new hidden node {node}"
            )
        lengths[vi] = max(length, 0.0)

    row: dict[int, float] = {}
    noise: dict[int, float] = {}
    for other in dist.ids:
        if other in lengths:
            row[other] = lengths[other]
            noise[other] = spread[other]
            continue
        below = [v for v in siblings if other in descendants.get(v, {v})]
        if below:
            v = below[0]
            row[other] = dist(other, v) + lengths[v]
            noise[other] = math.hypot(dist.noise(other, v), spread[v])
        else:
            value = float(np.mean([dist(other, v) - lengths[v] for v in siblings]))
            row[other] = max(value, 0.0)
            noise[other] = float(np.mean([dist.noise(other, v) for v in siblings]))
    return dist.extended(node, row, noise), lengths


# ---------------------------------------------------------------------------
# Moments for hidden views
# ---------------------------------------------------------------------------
class HiddenViewMoments:
    """MomentSource that also answers for introduced hidden nodes.

    A hidden node ``u`` is read through a representative observed node ``x``
    of its subtree: ``E[h_u y^T] = pinv(E[y_x | h_u]) E[y_x y^T]`` for any
    ``y`` on the other side of ``u``. The self moment is ``diag(prior)``.
    """

    def __init__(self, base: MomentSource, k: int):
        self.base = base
        self.k = k
        self._rep: dict[int, tuple[int, np.ndarray]] = {}
        self._inv: dict[int, np.ndarray] = {}
        self._prior: dict[int, np.ndarray] = {}

    def add(self, node: int, rep: int, a_rep: np.ndarray, prior: np.ndarray) -> None:
        self._rep[node] = (rep, a_rep)
        self._inv[node] = np.linalg.pinv(a_rep)
        self._prior[node] = prior

    def representative(self, node: int) -> tuple[int, np.ndarray | None]:
        """(observed node, E[y_x | h_node]); the matrix is None for observed nodes."""
        return self._rep.get(node, (node, None))

    def dim(self, node: int) -> int:
        return self.k if node in self._rep else self.base.dim(node)

    def pair(self, a: int, b: int) -> np.ndarray:
        if a == b and a in self._prior:
            return np.diag(self._prior[a])
        xa, xb = self.representative(a)[0], self.representative(b)[0]
        m = self.base.pair(xa, xb)
        if a in self._inv:
            m = self._inv[a] @ m
        if b in self._inv:
            m = m @ self._inv[b].T
        return m

    def triple(self, a: int, b: int, c: int) -> np.ndarray:
        nodes = (a, b, c)
        t = self.base.triple(*(self.representative(n)[0] for n in nodes))
        for axis, node in enumerate(nodes):
            if node in self._inv:
                t = np.moveaxis(np.tensordot(self._inv[node], t, axes=(1, axis)), 0, axis)
        return t


class PosteriorViewMoments(HiddenViewMoments):
    """Hidden views as per-sample posteriors ``P(h_u | y_x)`` (discrete family only)."""

    def __init__(self, base: SampleMoments, k: int, chunk: int = CHUNK):
        if not isinstance(base, SampleMoments):
            raise ValueError("posterior hidden moments need sample data")
        super().__init__(base, k)
        self.samples = base.samples
        self.chunk = chunk
        self._posterior: dict[int, np.ndarray] = {}

    def add(self, node: int, rep: int, a_rep: np.ndarray, prior: np.ndarray) -> None:
        super().add(node, rep, a_rep, prior)
        x = self.samples.dense(rep)
        self._posterior[node] = posterior_hidden(x, a_rep, prior, "discrete")

    def _values(self, node: int, start: int = 0, stop: int | None = None):
        if node in self._posterior:
            return self._posterior[node][:, start:stop]
        return self.samples.dense(node, start, stop)

    def pair(self, a: int, b: int) -> np.ndarray:
        if a == b and a in self._prior:
            return np.diag(self._prior[a])
        if a not in self._posterior and b not in self._posterior:
            return self.base.pair(a, b)
        xa = self._posterior[a] if a in self._posterior else self.samples.values[a]
        xb = self._posterior[b] if b in self._posterior else self.samples.values[b]
        product = xa @ xb.T
        if sp.issparse(product):
            product = product.toarray()
        return np.asarray(product) / self.samples.n

    def triple(self, a: int, b: int, c: int) -> np.ndarray:
        if not any(n in self._posterior for n in (a, b, c)):
            return self.base.triple(a, b, c)
        n = self.samples.n
        out = np.zeros(tuple(self.dim(v) for v in (a, b, c)))
        for start in range(0, n, self.chunk):
            stop = min(start + self.chunk, n)
            out += np.einsum(
                "in,jn,kn->ijk",
                *(self._values(v, start, stop) for v in (a, b, c)),
                optimize=True,
            )
        return out / n


# ---------------------------------------------------------------------------
# Local subtree
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class HiddenProvenance:
    node: int
    children: tuple[int, ...]
    witness: int | None
    round: int
    home: tuple[int, int, int]


@dataclass
class LocalSubtree:
    leader: int
    members: tuple[int, ...]
    k: int
    dims: dict[int, int]
    edges: set[tuple[int, int]] = field(default_factory=set)
    hidden: list[int] = field(default_factory=list)
    children: dict[int, tuple[int, ...]] = field(default_factory=dict)
    triplets: dict[int, list[TripletParams]] = field(default_factory=dict)  # [0] is home
    estimates: dict[tuple[int, int], int] = field(default_factory=dict)  # (w, o) -> triplet idx
    provenance: dict[int, HiddenProvenance] = field(default_factory=dict)
    epsilon: float = 0.0
    rounds: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.dims)

    def is_hidden(self, node: int) -> bool:
        return node in self.children

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(sorted(self.edges))
        return g

    def neighbors(self, node: int) -> list[int]:
        return sorted(b if a == node else a for a, b in self.edges if node in (a, b))

    def path(self, a: int, b: int) -> list[int]:
        return nx.shortest_path(self.graph(), a, b)

    def reference_hidden(self) -> int | None:
        """The leader's hidden neighbour, else the lowest hidden id."""
        near = [n for n in self.neighbors(self.leader) if self.is_hidden(n)]
        if near:
            return near[0]
        return self.hidden[0] if self.hidden else None

    @property
    def has_parameters(self) -> bool:
        return bool(self.triplets)

    def debug_dump(self) -> dict:
        return {
            "leader": self.leader,
            "members": list(self.members),
            "epsilon": self.epsilon,
            "rounds": self.rounds,
            "edges": [list(e) for e in sorted(self.edges)],
            "hidden": [
                {
                    "id": h,
                    "children": list(self.provenance[h].children),
                    "witness": self.provenance[h].witness,
                    "round": self.provenance[h].round,
                    "test": "siblings",
                    "home_triplet": list(self.provenance[h].home),
                    "residuals": [t.residual for t in self.triplets.get(h, [])],
                    "low_confidence": any(t.low_confidence for t in self.triplets.get(h, [])),
                }
                for h in self.hidden
            ],
            "flags": list(self.flags),
        }


def _triplet_seed(seed: int, node: int, idx: int) -> int:
    return int(np.random.SeedSequence([seed, node, idx]).generate_state(1)[0])


def _group_active(
    nodes: list[int], dist: DistanceMatrix, eps: float, noise_z: float
) -> tuple[dict[tuple[int, int], Relation], list[list[int]]]:
    relations: dict[tuple[int, int], Relation] = {}
    margins: dict[tuple[int, int], float] = {}
    for a, b in itertools.combinations(nodes, 2):
        rel, margin = _classify(a, b, nodes, dist, eps, noise_z)
        if rel != "unrelated":
            relations[(a, b)] = rel
            margins[(a, b)] = margin
    return relations, families_of(nodes, relations, margins)


def _pick_parent(family: list[int], relations: dict[tuple[int, int], Relation]) -> int | None:
    counts: Counter[int] = Counter()
    for (a, b), rel in relations.items():
        if a not in family or b not in family:
            continue
        if rel == "a-leaf-of-b":
            counts[b] += 1
        elif rel == "b-leaf-of-a":
            counts[a] += 1
    if not counts:
        return None
    return min(counts, key=lambda n: (-counts[n], n))


def _decompose(
    views_source: HiddenViewMoments, views: tuple[int, int, int], node: int, idx: int,
    config: RunConfig,
) -> TripletParams:
    return decompose_triplet(
        views_source,
        views,
        config.k,
        restarts=config.restarts,
        iters=config.iters,
        tol=config.tol,
        seed=_triplet_seed(config.seed, node, idx),
    )


def _estimate_edges(sub: LocalSubtree, views: HiddenViewMoments, config: RunConfig) -> None:
    """Attach one estimate to every edge with a hidden endpoint."""
    for a, b in sorted(sub.edges):
        ends = [n for n in (a, b) if sub.is_hidden(n)]
        if not ends:
            sub.flags.append(f"edge {a}-{b} joins two observed nodes; no parameters")
            continue
        w = max(ends)
        o = b if w == a else a
        if o in sub.triplets[w][0].views:
            sub.estimates[(w, o)] = 0
            continue
        s = sub.children[w]
        idx = len(sub.triplets[w])
        sub.triplets[w].append(_decompose(views, (o, s[0], s[1]), w, idx, config))
        sub.estimates[(w, o)] = idx


def local_recursive_grouping(
    group: Group,
    dist: DistanceMatrix,
    moments: MomentSource | None,
    config: RunConfig,
    id_base: int | None = None,
) -> LocalSubtree:
    """Recover the latent subtree over ``group.members``.

    With ``moments=None`` only the structure is learned. Hidden ids are
    allocated from ``id_base`` upwards.
    """
    started = time.perf_counter()
    members = sorted(group.members)
    local = dist.submatrix(members)
    eps = config.epsilon_for(local.min_offdiagonal(), local.median_noise())
    noise_z = config.noise_z if local.stderr is not None else 0.0
    auto = config.epsilon == "auto"
    next_id = id_base if id_base is not None else len(dist.ids)
    sub = LocalSubtree(
        leader=group.leader,
        members=tuple(members),
        k=config.k,
        dims={m: (moments.dim(m) if moments is not None else 0) for m in members},
        epsilon=eps,
    )

    views: HiddenViewMoments | None = None
    if moments is not None:
        if config.hidden_moments == "posterior":
            if config.family != "discrete":
                raise ValueError("posterior hidden moments are only defined for discrete data")
            views = PosteriorViewMoments(moments, config.k)  # type: ignore[arg-type]
        else:
            views = HiddenViewMoments(moments, config.k)

    descendants: dict[int, set[int]] = {m: {m} for m in members}
    active = ActiveSet(list(members))
    while len(active) > 2:
        active.round += 1
        relations, families = _group_active(active.nodes, local, eps, noise_z)
        retries = 0
        while all(len(f) == 1 for f in families) and auto and retries < EPSILON_RETRIES:
            retries += 1
            eps *= 2.0
            relations, families = _group_active(active.nodes, local, eps, noise_z)
        if retries:
            sub.flags.append(f"round {active.round}: epsilon raised to {eps:.3g} after a stall")
            logger.info(f"group {group.leader}: epsilon {eps:.3g} in round {active.round}")
        if all(len(f) == 1 for f in families):
            raise NonConvergenceError(group.leader, active.nodes)
        survivors: list[int] = []
        for family in families:
            if len(family) == 1:
                survivors.append(family[0])
                continue
            parent = _pick_parent(family, relations)
            if parent is not None:
                for child in family:
                    if child != parent:
                        sub.edges.add(edge_key(parent, child))
                        descendants[parent] |= descendants[child]
                survivors.append(parent)
                continue

            h = next_id
            next_id += 1
            local, _ = introduce_hidden(
                h, family, active.nodes, local, eps, descendants, noise_z
            )
            witness = None
            if len(family) >= 3:
                home = (family[0], family[1], family[2])
            else:
                outside = [n for n in active.nodes if n not in family]
                witness = min(outside, key=lambda n: (local(family[0], n), n))
                home = (family[0], family[1], witness)
            sub.dims[h] = config.k
            sub.hidden.append(h)
            sub.children[h] = tuple(family)
            sub.provenance[h] = HiddenProvenance(h, tuple(family), witness, active.round, home)
            descendants[h] = {h}.union(*(descendants[c] for c in family))
            for child in family:
                sub.edges.add(edge_key(h, child))
            if views is not None:
                params = _decompose(views, home, h, 0, config)
                sub.triplets[h] = [params]
                s0 = family[0]
                rep, a_rep = views.representative(s0)
                a_rep = params.view(s0) if a_rep is None else a_rep @ params.view(s0)
                views.add(h, rep, a_rep, params.pi)
            survivors.append(h)

        if len(survivors) >= len(active):
            raise NonConvergenceError(group.leader, active.nodes)
        active.nodes = sorted(survivors)

    if len(active) == 2:
        sub.edges.add(edge_key(*active.nodes))
    sub.rounds = active.round
    sub.epsilon = eps
    if views is not None:
        _estimate_edges(sub, views, config)

    if not nx.is_tree(sub.graph()):
        raise ModelError(f"local subtree of leader {group.leader} is not a tree")
    event(
        "lrg",
        leader=group.leader,
        members=len(members),
        hidden=len(sub.hidden),
        rounds=sub.rounds,
        epsilon=eps,
        triplets=sum(len(t) for t in sub.triplets.values()),
        seconds=time.perf_counter() - started,
    )
    return sub
