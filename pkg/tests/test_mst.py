"""Minimum spanning tree, local groups and their statistics."""

import itertools

import networkx as nx
import numpy as np
import pytest

from latree.distances import DistanceMatrix
from latree.errors import DisconnectedGraphError
from latree.mst import Group, MstGraph, build_mst, extract_groups, group_stats
from latree.oracle import exact_distances, random_latent_tree, surrogate_contraction


def _random_distances(p: int, seed: int) -> DistanceMatrix:
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((p, p)) + 0.1, 1)
    return DistanceMatrix(upper + upper.T, list(range(p)))


def _brute_force_weight(dist: DistanceMatrix) -> float:
    p = len(dist.ids)
    pairs = list(itertools.combinations(range(p), 2))
    best = np.inf
    for chosen in itertools.combinations(pairs, p - 1):
        g = nx.Graph(chosen)
        if g.number_of_nodes() == p and nx.is_tree(g):
            best = min(best, sum(dist(a, b) for a, b in chosen))
    return best


class TestBuildMst:
    @pytest.mark.parametrize("p", [4, 5, 6])
    def test_weight_is_minimal(self, p):
        for seed in range(5):
            dist = _random_distances(p, seed)
            assert build_mst(dist).weight == pytest.approx(_brute_force_weight(dist))

    def test_prim_and_boruvka_agree(self):
        for seed in range(10):
            dist = _random_distances(12, seed)
            prim = build_mst(dist, "prim")
            boruvka = build_mst(dist, "boruvka", threads=3)
            assert prim.edges == boruvka.edges

    def test_ties_broken_by_ids(self):
        dist = DistanceMatrix(np.ones((4, 4)) - np.eye(4), [0, 1, 2, 3])
        expected = ((0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0))
        assert build_mst(dist, "prim").edges == expected
        assert build_mst(dist, "boruvka").edges == expected

    def test_exact_distances_give_the_surrogate_contraction(self):
        for seed in range(3):
            model = random_latent_tree(9, 2, dims=3, topology="random", seed=seed)
            observed = exact_distances(model).submatrix(range(9))
            assert build_mst(observed).edge_set() == surrogate_contraction(model)

    def test_disconnected_graph_reports_components(self):
        values = np.full((4, 4), np.inf)
        np.fill_diagonal(values, 0.0)
        values[0, 1] = values[1, 0] = 1.0
        values[2, 3] = values[3, 2] = 2.0
        with pytest.raises(DisconnectedGraphError) as info:
            build_mst(DistanceMatrix(values, [0, 1, 2, 3]), "boruvka")
        assert info.value.components == [[0, 1], [2, 3]]


class TestGroups:
    def _path_mst(self) -> MstGraph:
        # 0 - 1 - 2 - 3, plus 4 hanging off 1
        return MstGraph(
            nodes=(0, 1, 2, 3, 4),
            edges=((0, 1, 1.0), (1, 2, 1.0), (1, 4, 1.0), (2, 3, 1.0)),
        )

    def test_one_group_per_internal_node(self):
        groups = extract_groups(self._path_mst())
        assert groups == [Group(1, (0, 1, 2, 4)), Group(2, (1, 2, 3))]

    def test_needs_three_nodes(self):
        with pytest.raises(ValueError):
            extract_groups(MstGraph(nodes=(0, 1), edges=((0, 1, 1.0),)))

    def test_stats(self):
        stats = group_stats(self._path_mst())
        assert stats["gamma"] == 4
        assert stats["degree_histogram"] == {1: 3, 2: 1, 3: 1}

    def test_largest_group_is_bounded_by_degree_and_depth(self):
        topologies = ["balanced", "caterpillar", "random"]
        for seed in range(100):
            p = 8 + seed % 13
            model = random_latent_tree(p, 2, dims=3, topology=topologies[seed % 3], seed=seed)
            tree = model.tree
            dist = exact_distances(model)
            gamma = group_stats(build_mst(dist.submatrix(range(p))))["gamma"]

            g = tree.graph()
            max_degree = max(d for _, d in g.degree())
            hops = nx.multi_source_dijkstra_path_length(g, set(tree.observed))
            depth = max(hops[h] for h in tree.hidden)
            lengths = [dist(a, b) for a, b in tree.edges]
            ratio = max(lengths) / min(lengths)
            assert gamma <= max_degree ** (1 + ratio * depth), seed
