"""CLI: gen / learn / eval, JSON on stdout and exit codes."""

import json
import os

import pytest
from click.testing import CliRunner

from latree.cli import EXIT_DISCONNECTED, EXIT_INPUT, EXIT_NONCONVERGENCE, main
from latree.errors import DisconnectedGraphError, NonConvergenceError


@pytest.fixture
def runner():
    return CliRunner()


def _gen(runner, out, *extra):
    result = runner.invoke(
        main, ["gen", "--p", "8", "--k", "2", "--dims", "3", "--out", out, *extra]
    )
    assert result.exit_code == 0, result.output
    return json.loads(result.stdout)


class TestGen:
    def test_writes_model_and_samples(self, runner, tmp_path):
        out = str(tmp_path / "m")
        payload = _gen(runner, out, "--n", "100", "--seed", "3")
        assert payload["p"] == 8
        assert payload["hidden"] == 6
        assert os.path.exists(os.path.join(out, "model.json"))
        assert os.path.exists(os.path.join(out, "samples.csv"))
        assert payload["version"].startswith("latree ")

    def test_same_seed_same_files(self, runner, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        _gen(runner, a, "--n", "50", "--seed", "1")
        _gen(runner, b, "--n", "50", "--seed", "1")
        for name in ("model.json", "samples.csv"):
            with open(os.path.join(a, name)) as fa, open(os.path.join(b, name)) as fb:
                assert fa.read() == fb.read()

    def test_bad_dims(self, runner, tmp_path):
        result = runner.invoke(
            main, ["gen", "--p", "4", "--k", "2", "--dims", "a,b", "--out", str(tmp_path)]
        )
        assert result.exit_code == EXIT_INPUT

    def test_k_above_dims(self, runner, tmp_path):
        result = runner.invoke(
            main, ["gen", "--p", "4", "--k", "3", "--dims", "2", "--out", str(tmp_path)]
        )
        assert result.exit_code == EXIT_INPUT


class TestLearnAndEval:
    def test_exact_model_round(self, runner, tmp_path):
        model_dir = str(tmp_path / "m")
        _gen(runner, model_dir, "--seed", "4")
        model = os.path.join(model_dir, "model.json")
        out = str(tmp_path / "learned")
        result = runner.invoke(
            main,
            ["learn", "--exact-model", model, "--k", "2", "--epsilon", "1e-7", "--out", out,
             "--dump-distances", "--debug-groups"],
        )
        assert result.exit_code == 0, result.output
        report = json.loads(result.stdout)
        assert report["p"] == 8
        assert report["config"]["epsilon"] == 1e-7
        names = ("tree.json", "tree.dot", "tree.nwk", "mst.dot", "report.json", "distances.csv")
        for name in names:
            assert os.path.exists(os.path.join(out, name))
        assert os.listdir(os.path.join(out, "groups"))

        result = runner.invoke(main, ["eval", os.path.join(out, "tree.json"), model])
        assert result.exit_code == 0, result.output
        scores = json.loads(result.stdout)
        assert scores["rf"] == 0.0
        assert scores["param_max_err"] <= 1e-6

    def test_every_output_carries_the_run_config(self, runner, tmp_path):
        model_dir = str(tmp_path / "m")
        _gen(runner, model_dir, "--seed", "4", "--n", "50")
        with open(os.path.join(model_dir, "model.json")) as f:
            generator = json.load(f)["meta"]["generator"]
        assert generator["topology"] == "balanced"
        assert generator["n"] == 50
        assert generator["dims"] == 3
        with open(os.path.join(model_dir, "samples.csv")) as f:
            header = json.loads(f.readline())
        assert header["meta"]["generator"]["seed"] == 4

        out = str(tmp_path / "learned")
        result = runner.invoke(
            main,
            ["learn", "--exact-model", os.path.join(model_dir, "model.json"), "--k", "2",
             "--epsilon", "1e-7", "--out", out, "--dump-distances", "--debug-groups"],
        )
        assert result.exit_code == 0, result.output
        for name, prefix in (("tree.dot", "// latree "), ("mst.dot", "// latree "),
                             ("distances.csv", "# ")):
            with open(os.path.join(out, name)) as f:
                meta = json.loads(f.readline()[len(prefix):])
            assert meta["config"]["epsilon"] == 1e-7
            assert meta["version"].startswith("latree ")
        with open(os.path.join(out, "tree.nwk")) as f:
            comment, tree = f.read().splitlines()
        assert comment.startswith("[latree ") and comment.endswith("]")
        assert "config.k=2" in comment.split()
        assert tree.endswith(";")
        for name in os.listdir(os.path.join(out, "groups")):
            with open(os.path.join(out, "groups", name)) as f:
                assert json.load(f)["meta"]["config"]["k"] == 2

    def test_learn_from_samples(self, runner, tmp_path):
        model_dir = str(tmp_path / "m")
        result = runner.invoke(
            main,
            ["gen", "--p", "3", "--k", "2", "--dims", "4", "--n", "20000", "--seed", "2",
             "--out", model_dir],
        )
        assert result.exit_code == 0, result.output
        out = str(tmp_path / "learned")
        result = runner.invoke(
            main, ["learn", os.path.join(model_dir, "samples.csv"), "--k", "2", "--out", out]
        )
        assert result.exit_code == 0, result.output
        result = runner.invoke(
            main, ["eval", os.path.join(out, "tree.json"), os.path.join(model_dir, "model.json")]
        )
        assert json.loads(result.stdout)["rf"] == 0.0

    def test_threads_do_not_change_the_tree(self, runner, tmp_path):
        model_dir = str(tmp_path / "m")
        _gen(runner, model_dir, "--seed", "5")
        model = os.path.join(model_dir, "model.json")
        trees = []
        for threads in ("1", "4"):
            out = str(tmp_path / f"t{threads}")
            result = runner.invoke(
                main,
                ["learn", "--exact-model", model, "--k", "2", "--epsilon", "1e-7",
                 "--threads", threads, "--out", out],
            )
            assert result.exit_code == 0, result.output
            with open(os.path.join(out, "tree.json")) as f:
                doc = json.load(f)
            doc.pop("meta")
            trees.append(doc)
        assert trees[0] == trees[1]

    def test_needs_exactly_one_input(self, runner, tmp_path):
        result = runner.invoke(main, ["learn", "--k", "2", "--out", str(tmp_path)])
        assert result.exit_code == EXIT_INPUT

    def test_malformed_samples(self, runner, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text('{"p": 3, "dims": [2, 2, 2], "N": 2}\n0,0,0,1\nnot,a,row,x\n')
        result = runner.invoke(main, ["learn", str(path), "--k", "2", "--out", str(tmp_path)])
        assert result.exit_code == EXIT_INPUT
        assert "line 3" in result.stderr

    def test_invalid_option_value(self, runner, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text('{"p": 3, "dims": [2, 2, 2], "N": 1}\n0,0,0,1\n')
        result = runner.invoke(
            main, ["learn", str(path), "--k", "2", "--epsilon", "soon", "--out", str(tmp_path)]
        )
        assert result.exit_code == EXIT_INPUT

    def test_eval_leaf_mismatch(self, runner, tmp_path):
        small, big = str(tmp_path / "s"), str(tmp_path / "b")
        runner.invoke(main, ["gen", "--p", "3", "--k", "2", "--out", small])
        runner.invoke(main, ["gen", "--p", "5", "--k", "2", "--out", big])
        result = runner.invoke(
            main, ["eval", os.path.join(small, "model.json"), os.path.join(big, "model.json")]
        )
        assert result.exit_code == EXIT_INPUT


class TestExitCodes:
    def test_disconnected_graph(self, runner, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise DisconnectedGraphError([[0, 1], [2]])

        monkeypatch.setattr("latree.cli.learn", boom)
        model_dir = str(tmp_path / "m")
        runner.invoke(main, ["gen", "--p", "3", "--k", "2", "--out", model_dir])
        result = runner.invoke(
            main,
            ["learn", "--exact-model", os.path.join(model_dir, "model.json"), "--k", "2",
             "--out", str(tmp_path / "o")],
        )
        assert result.exit_code == EXIT_DISCONNECTED
        assert "disconnected" in result.stderr

    def test_non_convergence(self, runner, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise NonConvergenceError(4, [1, 2, 3])

        monkeypatch.setattr("latree.cli.learn", boom)
        model_dir = str(tmp_path / "m")
        runner.invoke(main, ["gen", "--p", "3", "--k", "2", "--out", model_dir])
        result = runner.invoke(
            main,
            ["learn", "--exact-model", os.path.join(model_dir, "model.json"), "--k", "2",
             "--out", str(tmp_path / "o")],
        )
        assert result.exit_code == EXIT_NONCONVERGENCE
