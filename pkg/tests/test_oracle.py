"""Synthetic model generator, sampler and exact moments."""

import networkx as nx
import numpy as np
import pytest

from latree.errors import ModelError
from latree.model import check_invariants
from latree.moments import pairwise_moment, triplet_moment
from latree.oracle import (
    ModelMoments,
    exact_moments,
    random_latent_tree,
    sample_model,
    surrogate_contraction,
)


class TestGenerator:
    @pytest.mark.parametrize("topology", ["balanced", "caterpillar", "random"])
    def test_topologies_are_valid(self, topology):
        for seed in range(4):
            model = random_latent_tree(11, 3, dims=4, topology=topology, seed=seed)
            tree = model.tree
            assert check_invariants(tree, atol=1e-9) == []
            assert tree.observed == list(range(11))
            for o in tree.observed:
                assert len(tree.neighbors(o)) == 1

    def test_every_draw_is_an_identifiable_model(self):
        topologies = ["balanced", "caterpillar", "random"]
        for seed in range(1000):
            p, k = 3 + seed % 14, 2 + seed % 2
            model = random_latent_tree(
                p, k, dims=k + seed % 4, topology=topologies[seed % 3], seed=seed
            )
            tree = model.tree
            assert check_invariants(tree, atol=1e-9) == [], seed
            assert all(len(tree.neighbors(o)) == 1 for o in tree.observed), seed
            assert max(len(tree.neighbors(h)) for h in tree.hidden) <= 4, seed

    def test_random_topology_respects_degree_cap(self):
        model = random_latent_tree(20, 2, dims=3, topology="random", max_degree=4, seed=2)
        assert max(len(model.tree.neighbors(h)) for h in model.tree.hidden) <= 4

    def test_hidden_transitions_are_diagonally_dominant(self, balanced_model):
        tree = balanced_model.tree
        for (a, b), m in tree.params.items():
            if tree.is_hidden(b):
                assert np.all(np.diag(m) > 0.7)

    def test_same_seed_same_model(self):
        a = random_latent_tree(6, 2, dims=3, seed=4)
        b = random_latent_tree(6, 2, dims=3, seed=4)
        for key, m in a.tree.params.items():
            np.testing.assert_array_equal(m, b.tree.params[key])

    def test_per_variable_dims(self):
        model = random_latent_tree(4, 2, dims=[2, 3, 4, 5], seed=0)
        assert model.dims == [2, 3, 4, 5]
        assert model.tree.conditional(5, 3).shape == (5, 2)

    def test_bad_requests(self):
        with pytest.raises(ModelError):
            random_latent_tree(2, 2)
        with pytest.raises(ModelError):
            random_latent_tree(5, 4, dims=3)
        with pytest.raises(ModelError):
            random_latent_tree(5, 2, dims=[3, 3])
        with pytest.raises(ModelError):
            random_latent_tree(5, 2, topology="star")
        with pytest.raises(ModelError):
            random_latent_tree(8, 2, topology="random", max_degree=2)


class TestSampling:
    def test_one_hot_shapes(self, balanced_model):
        samples = sample_model(balanced_model, 500, seed=3)
        assert samples.p == 8
        assert samples.n == 500
        for x in samples.values:
            np.testing.assert_array_equal(np.asarray(x.sum(axis=0)).ravel(), 1.0)

    def test_empirical_moments_approach_exact(self, star_model):
        samples = sample_model(star_model, 40_000, seed=8)
        np.testing.assert_allclose(
            pairwise_moment(samples, 0, 1).matrix, exact_moments(star_model, (0, 1)), atol=0.02
        )
        np.testing.assert_allclose(
            triplet_moment(samples, 0, 1, 2).tensor, exact_moments(star_model, (0, 1, 2)), atol=0.02
        )

    def test_gaussian_family(self):
        model = random_latent_tree(4, 2, dims=3, seed=1, family="gaussian", noise=0.3)
        samples = sample_model(model, 100_000, seed=2)
        np.testing.assert_allclose(
            pairwise_moment(samples, 0, 0).matrix, exact_moments(model, (0, 0)), atol=0.15
        )


class TestExactMoments:
    def test_pair_moment_is_a_joint_for_discrete(self, balanced_model):
        m = exact_moments(balanced_model, (0, 5))
        assert m.sum() == pytest.approx(1.0)

    def test_triple_needs_a_hidden_joining_node(self, balanced_model):
        with pytest.raises(ModelError):
            exact_moments(balanced_model, (0, 0, 1))

    def test_model_moments_transposes(self, balanced_model):
        source = ModelMoments(balanced_model)
        np.testing.assert_allclose(source.pair(5, 1), source.pair(1, 5).T)

    def test_unknown_node(self, balanced_model):
        with pytest.raises(ModelError):
            exact_moments(balanced_model, (0, 99))


class TestSurrogates:
    def test_contraction_is_a_spanning_tree_on_observed(self, balanced_model):
        edges = surrogate_contraction(balanced_model)
        g = nx.Graph(sorted(edges))
        assert sorted(g.nodes) == list(range(8))
        assert nx.is_tree(g)
