"""End-to-end learning: exact-moment recovery, determinism, reports, sample-size sweep."""

import numpy as np
import pytest

from latree.config import RunConfig
from latree.errors import LatentTreeError
from latree.evaluate import parameter_error, robinson_foulds
from latree.model import check_invariants
from latree.moments import SampleMoments
from latree.oracle import ModelMoments, random_latent_tree, sample_model
from latree.pipeline import id_blocks, learn
from latree.mst import Group


def _exact(model, **overrides):
    config = RunConfig(**{"k": model.k, "epsilon": 1e-7, "threads": 1, "seed": 0, **overrides})
    return learn(ModelMoments(model), config)


MODELS = [
    # (p, k, dims, topology, seed)
    (8, 2, 3, "balanced", 0),
    (10, 2, 2, "caterpillar", 1),
    (12, 2, 4, "random", 2),
    (9, 3, 3, "balanced", 3),
    (14, 3, 5, "random", 4),
    (16, 2, 3, "random", 5),
    (11, 3, 4, "caterpillar", 6),
    (13, 2, 5, "balanced", 7),
    (15, 3, 3, "random", 8),
    (8, 2, 2, "random", 9),
]

TOPOLOGIES = ["balanced", "caterpillar", "random"]


def _drawn_model(seed: int):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(8, 25))
    k = int(rng.choice([2, 3]))
    dims = int(rng.integers(k, 9))
    return random_latent_tree(p, k, dims=dims, topology=TOPOLOGIES[seed % 3], seed=seed)


class TestExactRecovery:
    @pytest.mark.parametrize("p,k,dims,topology,seed", MODELS)
    def test_structure_and_parameters(self, p, k, dims, topology, seed):
        model = random_latent_tree(p, k, dims=dims, topology=topology, seed=seed)
        result = _exact(model)
        assert robinson_foulds(result.tree, model.tree) == 0.0
        assert parameter_error(result.tree, model.tree).max_column_error <= 1e-6
        assert result.report["invariant_violations"] == []

    @pytest.mark.parametrize("seed", range(100))
    def test_drawn_models_up_to_24_variables(self, seed):
        model = _drawn_model(seed)
        result = _exact(model)
        assert robinson_foulds(result.tree, model.tree) == 0.0
        assert parameter_error(result.tree, model.tree).max_column_error <= 1e-6

    def test_hidden_ids_follow_observed(self, balanced_model):
        tree = _exact(balanced_model).tree
        assert tree.observed == list(range(8))
        assert tree.hidden == list(range(8, 8 + len(tree.hidden)))
        assert check_invariants(tree, atol=1e-6) == []

    def test_gaussian_family(self):
        model = random_latent_tree(9, 2, dims=4, topology="random", seed=3, family="gaussian")
        result = _exact(model, family="gaussian", noise=0.5)
        assert robinson_foulds(result.tree, model.tree) == 0.0
        assert parameter_error(result.tree, model.tree).max_column_error <= 1e-6
        assert result.tree.family == "gaussian"

    def test_per_variable_dims(self):
        model = random_latent_tree(8, 2, dims=[2, 3, 4, 5, 2, 3, 4, 5], seed=11)
        result = _exact(model)
        assert robinson_foulds(result.tree, model.tree) == 0.0
        assert parameter_error(result.tree, model.tree).max_column_error <= 1e-6


class TestDeterminism:
    def _doc(self, result):
        tree = result.tree
        return sorted(tree.edges), {key: m for key, m in sorted(tree.params.items())}

    def _same(self, a, b):
        edges_a, params_a = self._doc(a)
        edges_b, params_b = self._doc(b)
        assert edges_a == edges_b
        assert params_a.keys() == params_b.keys()
        for key in params_a:
            np.testing.assert_array_equal(params_a[key], params_b[key])

    def test_thread_count_does_not_change_output(self):
        model = random_latent_tree(14, 2, dims=3, topology="random", seed=12)
        self._same(_exact(model), _exact(model, threads=4))

    def test_mst_algorithm_does_not_change_output(self):
        model = random_latent_tree(12, 2, dims=3, topology="caterpillar", seed=13)
        self._same(_exact(model), _exact(model, mst_algorithm="boruvka"))

    def test_parallel_merge_does_not_change_output(self):
        model = random_latent_tree(12, 2, dims=3, topology="random", seed=14)
        self._same(_exact(model), _exact(model, merge_parallel=True, threads=3))


class TestReport:
    def test_report_fields(self, balanced_model):
        report = _exact(balanced_model).report
        assert report["p"] == 8
        assert report["hidden"] == 6
        assert report["groups"] >= 1
        assert set(report["stage_seconds"]) == {
            "distances", "mst", "lrg", "merge", "finalize", "total"
        }
        assert report["distances"]["infinite"] == 0
        assert report["warnings"] == []

    def test_observed_must_be_numbered_from_zero(self, balanced_model):
        with pytest.raises(ValueError):
            learn(ModelMoments(balanced_model), RunConfig(), observed=[1, 2, 3])


class TestIdBlocks:
    def test_blocks_are_disjoint(self):
        groups = [Group(1, (0, 1, 2)), Group(2, (1, 2, 3, 4)), Group(4, (2, 4, 5))]
        assert id_blocks(groups, 6) == [6, 9, 13]


@pytest.mark.slow
class TestSampleSizeSweep:
    SEEDS = range(10)

    def _rf(self, model, n: int, seed: int) -> float:
        config = RunConfig(k=2, threads=2, seed=seed)
        try:
            result = learn(SampleMoments(sample_model(model, n, seed=seed)), config)
        except LatentTreeError:
            return 1.0
        return robinson_foulds(result.tree, model.tree)

    def test_error_falls_with_more_samples(self):
        scores = {n: [] for n in (1_000, 10_000, 100_000)}
        for seed in self.SEEDS:
            model = random_latent_tree(20, 2, dims=6, topology="random", seed=100 + seed)
            for n in scores:
                scores[n].append(self._rf(model, n, seed))
        medians = [float(np.median(scores[n])) for n in sorted(scores)]
        assert medians == sorted(medians, reverse=True)
        assert sum(rf == 0.0 for rf in scores[100_000]) >= 8
