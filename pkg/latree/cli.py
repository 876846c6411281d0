"""Command line: ``gen``, ``learn`` and ``eval``.

stdout carries one JSON document per command; logs go to stderr.

Exit codes: 0 success; 1 bad input, I/O, validation or comparison errors;
2 disconnected distance graph; 3 local grouping did not converge.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
import uuid

import click
from pydantic import ValidationError

from latree.config import RunConfig
from latree.errors import (
    AlignmentError,
    DecompositionError,
    DisconnectedGraphError,
    LatentTreeError,
    NonConvergenceError,
)
from latree.evaluate import parameter_error, robinson_foulds
from latree.io import (
    read_group_map,
    read_model_json,
    read_samples,
    to_dot,
    to_newick,
    write_distance_csv,
    write_json,
    write_model_json,
    write_samples,
)
from latree.logging_setup import configure_logging, run_id_var
from latree.moments import SampleMoments
from latree.oracle import ModelMoments, random_latent_tree, sample_model
from latree.pipeline import learn
from version import __version__

logger = logging.getLogger("latree.cli")

VERSION = f"latree {__version__}"

EXIT_INPUT = 1
EXIT_DISCONNECTED = 2
EXIT_NONCONVERGENCE = 3


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DisconnectedGraphError as exc:
            _fail(EXIT_DISCONNECTED, str(exc))
        except NonConvergenceError as exc:
            _fail(EXIT_NONCONVERGENCE, str(exc))
        except (LatentTreeError, OSError, ValueError) as exc:
            # ValidationError is a ValueError
            _fail(EXIT_INPUT, str(exc))

    return wrapper


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, default=str))


def _meta(config: RunConfig | None = None, **extra) -> dict:
    meta = {"version": VERSION, **extra}
    if config is not None:
        meta["config"] = config.model_dump(mode="json")
    return meta


@click.group()
@click.version_option(__version__, prog_name="latree")
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL.")
@click.option("--log-format", type=click.Choice(["text", "json"]), default=None)
def main(log_level: str | None, log_format: str | None) -> None:
    """Learn linear latent tree models from multivariate data."""
    configure_logging(log_level, log_format)
    run_id_var.set(uuid.uuid4().hex[:8])


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------
def _parse_dims(raw: str | None) -> int | list[int] | None:
    if raw is None:
        return None
    try:
        values = [int(x) for x in raw.split(",")]
    except ValueError:
        raise ValueError(f"dims must be an integer or a comma list, got {raw!r}") from None
    return values[0] if len(values) == 1 else values


@main.command()
@click.option("--p", "p", type=int, required=True, help="Observed variables.")
@click.option("--k", "k", type=int, required=True, help="Hidden states.")
@click.option("--dims", default=None, help="Observed dimension, or a comma list of p values.")
@click.option(
    "--topology", type=click.Choice(["balanced", "caterpillar", "random"]), default="balanced"
)
@click.option("--max-degree", type=int, default=4, help="Degree cap for random topologies.")
@click.option("--family", type=click.Choice(["discrete", "gaussian"]), default="discrete")
@click.option("--noise", type=float, default=0.5, help="Gaussian observation noise.")
@click.option("--seed", type=int, default=0)
@click.option("--n", "n", type=int, default=None, help="Also draw this many samples.")
@click.option("--format", "fmt", type=click.Choice(["sparse", "dense"]), default="sparse")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".")
@_guarded
def gen(p, k, dims, topology, max_degree, family, noise, seed, n, fmt, out_dir) -> None:
    """Draw a random identifiable model (and optionally samples from it)."""
    model = random_latent_tree(
        p,
        k,
        dims=_parse_dims(dims),
        topology=topology,
        seed=seed,
        family=family,
        noise=noise,
        max_degree=max_degree,
    )
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.json")
    generator = {
        "p": p,
        "k": k,
        "dims": _parse_dims(dims),
        "topology": topology,
        "max_degree": max_degree,
        "family": family,
        "noise": noise,
        "seed": seed,
        "n": n,
        "format": fmt,
    }
    meta = _meta(generator=generator)
    write_model_json(model.tree, model_path, meta)
    samples_path = None
    if n is not None:
        samples_path = os.path.join(out_dir, "samples.csv")
        write_samples(sample_model(model, n, seed=seed), samples_path, fmt, meta)
    _emit(
        {
            "model": model_path,
            "samples": samples_path,
            "p": p,
            "hidden": len(model.tree.hidden),
            **_meta(),
        }
    )


# ---------------------------------------------------------------------------
# learn
# ---------------------------------------------------------------------------
@main.command("learn")
@click.argument("samples", required=False, type=click.Path(dir_okay=False))
@click.option("--exact-model", type=click.Path(dir_okay=False), default=None,
              help="Use the population moments of this model instead of samples.")
@click.option("--k", "k", type=int, required=True)
@click.option("--svd", "svd_mode", type=click.Choice(["exact", "randomized"]), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--epsilon", default="auto", help="Grouping tolerance, a number or 'auto'.")
@click.option("--restarts", type=int, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--tol", type=float, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--family", type=click.Choice(["discrete", "gaussian"]), default="discrete")
@click.option("--noise", type=float, default=0.5)
@click.option("--hidden-moments", type=click.Choice(["analytic", "posterior"]), default="analytic")
@click.option("--mst", "mst_algorithm", type=click.Choice(["prim", "boruvka"]), default="prim")
@click.option("--merge-parallel", is_flag=True, default=False)
@click.option("--group-map", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out")
@click.option("--dump-distances", is_flag=True, default=False)
@click.option("--debug-groups", is_flag=True, default=False)
@_guarded
def learn_cmd(samples, exact_model, out_dir, dump_distances, debug_groups, **options) -> None:
    """Learn structure and parameters from SAMPLES (or an exact model)."""
    if (samples is None) == (exact_model is None):
        _fail(EXIT_INPUT, "give either SAMPLES or --exact-model")
    overrides = {key: value for key, value in options.items() if value is not None}
    try:
        config = RunConfig(
            samples_path=samples,
            group_map_path=overrides.get("group_map"),
            out_dir=out_dir,
            **{key: value for key, value in overrides.items() if key != "group_map"},
        )
    except ValidationError as exc:
        _fail(EXIT_INPUT, f"invalid configuration: {exc}")

    if exact_model is not None:
        truth, _ = read_model_json(exact_model)
        source = ModelMoments(truth)
    else:
        group_map = read_group_map(config.group_map_path) if config.group_map_path else None
        source = SampleMoments(read_samples(samples, group_map))

    result = learn(source, config)
    meta = _meta(config, run_id=run_id_var.get())
    os.makedirs(out_dir, exist_ok=True)
    files = {
        "tree": os.path.join(out_dir, "tree.json"),
        "dot": os.path.join(out_dir, "tree.dot"),
        "newick": os.path.join(out_dir, "tree.nwk"),
        "mst": os.path.join(out_dir, "mst.dot"),
        "report": os.path.join(out_dir, "report.json"),
    }
    write_model_json(result.tree, files["tree"], meta)
    with open(files["dot"], "w") as f:
        f.write(to_dot(result.tree, meta=meta))
    with open(files["newick"], "w") as f:
        f.write(to_newick(result.tree, meta))
    with open(files["mst"], "w") as f:
        f.write(to_dot(result.mst, name="mst", meta=meta))
    if dump_distances:
        files["distances"] = os.path.join(out_dir, "distances.csv")
        write_distance_csv(result.distances, files["distances"], meta)
    if debug_groups:
        for sub in result.subtrees:
            path = os.path.join(out_dir, "groups", f"group_{sub.leader}.json")
            write_json({**sub.debug_dump(), "meta": meta}, path)
    report = {**result.report, "files": files, **meta}
    write_json(report, files["report"])
    _emit(report)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------
@main.command("eval")
@click.argument("tree1", type=click.Path(dir_okay=False))
@click.argument("tree2", type=click.Path(dir_okay=False))
@_guarded
def eval_cmd(tree1: str, tree2: str) -> None:
    """Compare an estimated TREE1 with a reference TREE2."""
    est, _ = read_model_json(tree1)
    truth, _ = read_model_json(tree2)
    rf = robinson_foulds(est, truth)
    param_err = None
    if rf == 0.0 and est.params and truth.params:
        try:
            param_err = parameter_error(est, truth).max_column_error
        except (AlignmentError, DecompositionError) as exc:
            logger.warning(f"parameter comparison skipped: {exc}")
    _emit({"rf": rf, "param_max_err": param_err})
