"""Union-path merging and label alignment."""

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from latree.config import RunConfig
from latree.errors import AlignmentError
from latree.lrg import LocalSubtree, local_recursive_grouping
from latree.merge import (
    PermutationMap,
    align_groups,
    align_in_group,
    align_out_group,
    assemble_local,
    merge_all,
    reference_leader,
    union_paths,
)
from latree.mst import Group, MstGraph
from latree.oracle import ModelMoments, exact_distances, random_latent_tree
from latree.pipeline import learn


def _structure_pair() -> tuple[LocalSubtree, LocalSubtree]:
    # group of leader 3: 3, 5, 6 around hidden 10
    sub_i = LocalSubtree(
        leader=3,
        members=(3, 5, 6),
        k=2,
        dims={3: 2, 5: 2, 6: 2, 10: 2},
        edges={(3, 10), (5, 10), (6, 10)},
        hidden=[10],
        children={10: (3, 5, 6)},
    )
    # group of leader 5: 3 - 12 - 11 - 5 with 7 under 12 and 8 under 11
    sub_j = LocalSubtree(
        leader=5,
        members=(3, 5, 7, 8),
        k=2,
        dims={3: 2, 5: 2, 7: 2, 8: 2, 11: 2, 12: 2},
        edges={(3, 12), (11, 12), (5, 11), (7, 12), (8, 11)},
        hidden=[11, 12],
        children={11: (5, 8), 12: (3, 7)},
    )
    return sub_i, sub_j


def _path_pair() -> tuple[LocalSubtree, LocalSubtree]:
    # MST path 0-1-2-3 splits into two groups that are already trees of observed nodes
    sub_a = LocalSubtree(
        leader=1, members=(0, 1, 2), k=2, dims={0: 2, 1: 2, 2: 2}, edges={(0, 1), (1, 2)}
    )
    sub_b = LocalSubtree(
        leader=2, members=(1, 2, 3), k=2, dims={1: 2, 2: 2, 3: 2}, edges={(1, 2), (2, 3)}
    )
    return sub_a, sub_b


def _cherries_subtree(cherries_model, exact_config) -> LocalSubtree:
    dist = exact_distances(cherries_model).submatrix([0, 1, 2, 3])
    return local_recursive_grouping(
        Group(1, (0, 1, 2, 3)), dist, ModelMoments(cherries_model), exact_config, id_base=10
    )


def _shuffle(k: int, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(k)
    return np.roll(perm, 1) if np.array_equal(perm, np.arange(k)) else perm


def _learned_models(k: int):
    config = RunConfig(k=k, epsilon=1e-7, threads=1, seed=0)
    for seed in range(40):
        topology = "caterpillar" if seed % 2 else "random"
        model = random_latent_tree(14, k, dims=k + 1, topology=topology, seed=seed)
        yield learn(ModelMoments(model), config)


class TestUnionPaths:
    def test_keeps_hidden_nodes_of_both_sides(self):
        sub_i, sub_j = _structure_pair()
        assert union_paths(sub_i, sub_j, 3, 5) == [3, 10, 12, 11, 5]

    def test_missing_leader(self):
        sub_i, sub_j = _structure_pair()
        with pytest.raises(AlignmentError):
            union_paths(sub_i, sub_j, 3, 7)


class TestMergeAll:
    def _mst(self) -> MstGraph:
        return MstGraph(
            nodes=(3, 5, 6, 7, 8),
            edges=((3, 5, 1.0), (3, 6, 1.0), (5, 7, 1.0), (5, 8, 1.0)),
        )

    def test_replaces_both_paths_with_the_union(self):
        merged = merge_all(list(_structure_pair()), self._mst())
        assert merged.edges == {(6, 10), (7, 12), (8, 11), (3, 10), (10, 12), (11, 12), (5, 11)}
        assert merged.plan.leader_edges == ((3, 5),)
        assert merged.plan.paths[(3, 5)] == [3, 10, 12, 11, 5]

    def test_parallel_planning_gives_the_same_tree(self):
        serial = merge_all(list(_structure_pair()), self._mst())
        parallel = merge_all(list(_structure_pair()), self._mst(), parallel=True, threads=2)
        assert serial.edges == parallel.edges

    def test_duplicate_leaders_rejected(self):
        sub_i, _ = _structure_pair()
        with pytest.raises(AlignmentError):
            merge_all([sub_i, sub_i], self._mst())


class TestInGroup:
    def test_extra_triplet_is_matched_to_home(self, cherries_model, exact_config):
        sub = _cherries_subtree(cherries_model, exact_config)
        sub.triplets[11][1] = sub.triplets[11][1].permuted(np.array([1, 0]))
        pm = align_in_group(sub)
        home, extra = sub.triplets[11][0], sub.triplets[11][1]
        matched = extra.permuted(pm.perms[(11, 1)])
        np.testing.assert_allclose(matched.view(2), home.view(2), atol=1e-6)
        assert pm.ambiguous == []

    def test_hidden_joint_has_identity_as_best_matching(self, cherries_model, exact_config):
        sub = _cherries_subtree(cherries_model, exact_config)
        tree = assemble_local(sub, align_in_group(sub))
        joint = tree.priors[10][:, None] * tree.conditional(10, 11).T
        np.testing.assert_array_equal(linear_sum_assignment(joint, maximize=True)[1], [0, 1])

    def test_structure_only_subtree_cannot_be_assembled(self):
        sub_i, _ = _structure_pair()
        with pytest.raises(AlignmentError):
            assemble_local(sub_i)

    def test_permutation_map_defaults_to_identity(self):
        np.testing.assert_array_equal(PermutationMap().get(4, 2, 3), [0, 1, 2])

    def test_subtree_without_hidden_nodes_assembles_empty(self):
        sub_a, _ = _path_pair()
        tree = assemble_local(sub_a, align_in_group(sub_a))
        assert tree.hidden == []
        assert tree.params == {}
        assert align_in_group(sub_a).perms == {}


class TestOutGroup:
    def _learned_with_crossing(self, exact_config):
        for seed in range(20):
            model = random_latent_tree(12, 2, dims=3, topology="caterpillar", seed=seed)
            result = learn(ModelMoments(model), exact_config)
            if result.aligned.crossings:
                return result
        pytest.fail("no model with two aligned groups")

    def test_injected_permutation_is_recovered(self, exact_config):
        result = self._learned_with_crossing(exact_config)
        subtrees = {s.leader: s for s in result.subtrees}
        (i, j), (h1, h2) = sorted(result.aligned.crossings.items())[0]
        side_1 = i if h1 in subtrees[i].children else j
        side_2 = j if side_1 == i else i
        tree_1 = result.aligned.trees[side_1]
        tree_2 = result.aligned.trees[side_2].copy()

        before = align_out_group(tree_1, tree_2, side_1, side_2, h1, h2)
        np.testing.assert_array_equal(before.perm, [0, 1])

        for h in subtrees[side_2].hidden:
            tree_2.relabel(h, [1, 0])
        after = align_out_group(tree_1, tree_2, side_1, side_2, h1, h2)
        np.testing.assert_array_equal(after.perm, [1, 0])
        assert after.distance == pytest.approx(before.distance, abs=1e-9)


class TestAlignmentTrials:
    TRIALS = 25

    @pytest.mark.parametrize("k", [2, 3])
    def test_in_group_undoes_injected_permutations(self, k):
        rng = np.random.default_rng(k)
        trials = 0
        for result in _learned_models(k):
            for sub in result.subtrees:
                for w in sub.hidden:
                    for idx in range(1, len(sub.triplets[w])):
                        before = align_in_group(sub).perms[(w, idx)]
                        shuffle = _shuffle(k, rng)
                        sub.triplets[w][idx] = sub.triplets[w][idx].permuted(shuffle)
                        after = align_in_group(sub).perms[(w, idx)]
                        np.testing.assert_array_equal(shuffle[after], before)
                        ref = sub.children[w][0]
                        matched = sub.triplets[w][idx].permuted(after)
                        np.testing.assert_allclose(
                            matched.view(ref), sub.triplets[w][0].view(ref), atol=1e-6
                        )
                        trials += 1
                        if trials == self.TRIALS:
                            return
        pytest.fail(f"only {trials} extra triplets to align")

    @pytest.mark.parametrize("k", [2, 3])
    def test_out_group_undoes_injected_permutations(self, k):
        rng = np.random.default_rng(10 + k)
        trials = 0
        for result in _learned_models(k):
            subtrees = {s.leader: s for s in result.subtrees}
            for (i, j), (h1, h2) in sorted(result.aligned.crossings.items()):
                side_1 = i if h1 in subtrees[i].children else j
                side_2 = j if side_1 == i else i
                tree_1 = result.aligned.trees[side_1]
                tree_2 = result.aligned.trees[side_2].copy()
                shuffle = _shuffle(k, rng)
                for h in subtrees[side_2].hidden:
                    tree_2.relabel(h, shuffle)
                found = align_out_group(tree_1, tree_2, side_1, side_2, h1, h2)
                np.testing.assert_array_equal(found.perm, np.argsort(shuffle))
                trials += 1
                if trials == self.TRIALS:
                    return
        pytest.fail(f"only {trials} cross-group edges to align")


class TestReferenceLeader:
    def test_highest_degree_then_lowest_id(self):
        mst = MstGraph(
            nodes=(0, 1, 2, 3, 4, 5),
            edges=((0, 1, 1.0), (0, 2, 1.0), (1, 3, 1.0), (1, 4, 1.0), (2, 5, 1.0)),
        )
        assert reference_leader(mst, [0, 1, 2]) == 1
        assert reference_leader(mst, [0, 2]) == 0


class TestAlignGroups:
    def test_groups_without_hidden_nodes_are_skipped(self):
        mst = MstGraph(nodes=(0, 1, 2, 3), edges=((0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.5)))
        merged = merge_all(list(_path_pair()), mst)
        assert merged.edges == {(0, 1), (1, 2), (2, 3)}
        aligned = align_groups(merged, mst)
        assert aligned.crossings == {}
        assert aligned.out_group == {}
        assert any("no hidden pair" in note for note in aligned.low_confidence)
