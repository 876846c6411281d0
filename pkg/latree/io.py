"""File formats: model JSON, sample files, group maps, DOT / Newick / distance exports."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import re
from collections.abc import Iterable
from typing import Literal

import networkx as nx
import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from latree.distances import DistanceMatrix
from latree.errors import ModelError, SampleFormatError
from latree.model import LatentTree, NodeKind, SampleSet
from latree.mst import MstGraph

logger = logging.getLogger("latree.io")

SampleFormat = Literal["sparse", "dense"]
GroupMap = dict[str, tuple[int, int]]

_DENSE_COLUMN = re.compile(r"^x(\d+)_(\d+)$")


# ---------------------------------------------------------------------------
# Model JSON
# ---------------------------------------------------------------------------
class NodeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int = Field(ge=0)
    kind: Literal["obs", "hid"]
    dim: int = Field(ge=1)


class ModelDoc(BaseModel):
    """On-disk model. ``params["a-b"]`` is E[y_b | h_a], ``dim(b) x k``."""

    model_config = ConfigDict(extra="forbid")

    k: int = Field(ge=1)
    family: Literal["discrete", "gaussian"] = "discrete"
    noise: float = Field(0.0, ge=0.0)
    nodes: list[NodeDoc]
    edges: list[tuple[int, int]]
    params: dict[str, list[list[float]]] = {}
    priors: dict[str, list[float]] = {}
    meta: dict = {}

    @field_validator("params")
    @classmethod
    def _edge_keys(cls, value: dict) -> dict:
        for key in value:
            parts = key.split("-")
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise ValueError(f"parameter key {key!r} is not 'parent-child'")
        return value


def tree_to_doc(tree: LatentTree, meta: dict | None = None) -> dict:
    doc = ModelDoc(
        k=tree.k,
        family=tree.family,
        noise=tree.noise,
        nodes=[NodeDoc(id=n, kind=tree.kinds[n], dim=tree.dims[n]) for n in sorted(tree.dims)],
        edges=sorted(tree.edges),
        params={f"{a}-{b}": m.tolist() for (a, b), m in sorted(tree.params.items())},
        priors={str(h): v.tolist() for h, v in sorted(tree.priors.items())},
        meta=meta or {},
    )
    return doc.model_dump(mode="json")


def doc_to_tree(data: dict) -> tuple[LatentTree, dict]:
    doc = ModelDoc.model_validate(data)
    dims = {n.id: n.dim for n in doc.nodes}
    kinds: dict[int, NodeKind] = {n.id: n.kind for n in doc.nodes}
    if len(dims) != len(doc.nodes):
        raise ModelError("duplicate node ids")
    tree = LatentTree(k=doc.k, dims=dims, kinds=kinds, family=doc.family, noise=doc.noise)
    for a, b in doc.edges:
        tree.add_edge(a, b)
    for key, rows in doc.params.items():
        a, b = (int(x) for x in key.split("-"))
        m = np.asarray(rows, dtype=float)
        if m.shape != (dims.get(b, -1), doc.k):
            raise ModelError(f"parameter {key} has shape {m.shape}")
        tree.params[(a, b)] = m
    for key, values in doc.priors.items():
        tree.priors[int(key)] = np.asarray(values, dtype=float)
    return tree, doc.meta


def write_model_json(tree: LatentTree, path: str, meta: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(tree_to_doc(tree, meta), f, indent=1)
        f.write("\n")


def read_model_json(path: str) -> tuple[LatentTree, dict]:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise SampleFormatError(f"{path}: invalid JSON: {exc.msg}", exc.lineno) from None
    return doc_to_tree(data)


# ---------------------------------------------------------------------------
# Group map
# ---------------------------------------------------------------------------
def read_group_map(path: str) -> GroupMap:
    """raw_feature_id,variable_id,coord rows; an optional header line is skipped."""
    mapping: GroupMap = {}
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if line_no == 1 and row[0].strip() == "raw_feature_id":
                continue
            if len(row) != 3:
                raise SampleFormatError(f"expected 3 columns, got {len(row)}", line_no)
            raw = row[0].strip()
            try:
                var, coord = int(row[1]), int(row[2])
            except ValueError:
                raise SampleFormatError("variable_id and coord must be integers", line_no) from None
            if var < 0 or coord < 0:
                raise SampleFormatError("variable_id and coord must be non-negative", line_no)
            if raw in mapping:
                raise SampleFormatError(f"raw feature {raw!r} mapped twice", line_no)
            mapping[raw] = (var, coord)
    return mapping


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------
class SparseHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p: int = Field(ge=1)
    dims: list[int]
    N: int = Field(ge=0)
    meta: dict | None = None

    @field_validator("dims")
    @classmethod
    def _positive(cls, value: list[int]) -> list[int]:
        if any(d < 1 for d in value):
            raise ValueError("every dimension must be >= 1")
        return value


def _read_sparse(
    lines: Iterable[str], group_map: GroupMap | None, first_line: int = 1
) -> SampleSet:
    lines = iter(lines)
    first = next(lines)
    try:
        header = SparseHeader.model_validate_json(first)
    except ValidationError as exc:
        raise SampleFormatError(f"invalid header: {exc.errors()[0]['msg']}", first_line) from None
    if len(header.dims) != header.p:
        raise SampleFormatError(
            f"header lists {len(header.dims)} dims for p={header.p}", first_line
        )

    entries: list[list[tuple[int, int, float]]] = [[] for _ in range(header.p)]
    width = 3 if group_map is not None else 4
    for line_no, row in enumerate(csv.reader(lines), start=first_line + 1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise SampleFormatError(f"expected {width} columns, got {len(row)}", line_no)
        try:
            sample = int(row[0])
            value = float(row[-1])
            if group_map is not None:
                raw = row[1].strip()
                if raw not in group_map:
                    raise SampleFormatError(f"raw feature {raw!r} not in group map", line_no)
                var, coord = group_map[raw]
            else:
                var, coord = int(row[1]), int(row[2])
        except ValueError:
            raise SampleFormatError(f"cannot parse row {row!r}", line_no) from None
        if not 0 <= sample < header.N:
            raise SampleFormatError(f"sample id {sample} outside [0, {header.N})", line_no)
        if not 0 <= var < header.p or not 0 <= coord < header.dims[var]:
            raise SampleFormatError(f"(variable {var}, coord {coord}) outside the header", line_no)
        if not np.isfinite(value):
            raise SampleFormatError("non-finite value", line_no)
        entries[var].append((coord, sample, value))

    values = []
    for var, rows in enumerate(entries):
        coords, samples, vals = (np.array(x) for x in zip(*rows)) if rows else ([], [], [])
        m = sp.coo_matrix((vals, (coords, samples)), shape=(header.dims[var], header.N))
        values.append(m.tocsr())  # duplicates are summed
    return SampleSet(tuple(values), header.N)


def _read_dense(
    lines: Iterable[str], group_map: GroupMap | None, first_line: int = 1
) -> SampleSet:
    reader = csv.reader(lines)
    try:
        columns = [c.strip() for c in next(reader)]
    except StopIteration:
        raise SampleFormatError("empty file", first_line) from None
    targets: list[tuple[int, int]] = []
    for name in columns:
        if group_map is not None:
            if name not in group_map:
                raise SampleFormatError(f"column {name!r} not in group map", first_line)
            targets.append(group_map[name])
            continue
        match = _DENSE_COLUMN.match(name)
        if match is None:
            raise SampleFormatError(
                f"column {name!r} is not of the form x<var>_<coord>", first_line
            )
        targets.append((int(match.group(1)), int(match.group(2))))
    if not targets:
        raise SampleFormatError("no columns", first_line)

    p = max(v for v, _ in targets) + 1
    dims = [0] * p
    for var, coord in targets:
        dims[var] = max(dims[var], coord + 1)
    present = set(targets)
    for var in range(p):
        for coord in range(dims[var]):
            if (var, coord) not in present and group_map is None:
                raise SampleFormatError(f"missing column x{var}_{coord}", first_line)
    if 0 in dims:
        empty = [v for v, d in enumerate(dims) if d == 0]
        raise SampleFormatError(f"variables {empty} have no columns", first_line)

    rows: list[np.ndarray] = []
    for line_no, row in enumerate(reader, start=first_line + 1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(columns):
            raise SampleFormatError(f"expected {len(columns)} values, got {len(row)}", line_no)
        try:
            parsed = np.array([float(cell) for cell in row])
        except ValueError:
            raise SampleFormatError(f"cannot parse row {row!r}", line_no) from None
        if not np.all(np.isfinite(parsed)):
            raise SampleFormatError("non-finite value", line_no)
        rows.append(parsed)

    data = np.array(rows).reshape(len(rows), len(columns))
    values = [np.zeros((d, len(rows))) for d in dims]
    for col, (var, coord) in enumerate(targets):
        values[var][coord] += data[:, col]
    return SampleSet(tuple(values), len(rows))


def read_samples(path: str, group_map: GroupMap | None = None) -> SampleSet:
    """Sparse (JSON header line first) or dense CSV, detected from the first byte.

    Leading ``#`` lines (the metadata the writers put there) are skipped;
    reported line numbers still count them.
    """
    with open(path, newline="") as f:
        first_line = 1
        line = f.readline()
        while line.startswith("#"):
            first_line += 1
            line = f.readline()
        if not line:
            raise SampleFormatError(f"{path} is empty", first_line)
        reader = _read_sparse if line.startswith("{") else _read_dense
        samples = reader(itertools.chain([line], f), group_map, first_line)
    logger.info(f"read {samples.n} samples of {samples.p} variables from {path}")
    empty = samples.empty_rows()
    if empty:
        shown = ", ".join(f"x{var}_{coord}" for var, coord in empty[:10])
        more = f" and {len(empty) - 10} more" if len(empty) > 10 else ""
        logger.warning(f"{len(empty)} coordinates are zero in every sample: {shown}{more}")
    return samples


def _comment_json(meta: dict) -> str:
    return json.dumps(meta, default=str, sort_keys=True, separators=(",", ":"))


def write_samples(
    samples: SampleSet, path: str, fmt: SampleFormat = "sparse", meta: dict | None = None
) -> None:
    """Write samples; ``meta`` goes into the sparse header or a leading ``#`` line."""
    with open(path, "w", newline="") as f:
        if fmt == "sparse":
            header: dict[str, object] = {"p": samples.p, "dims": samples.dims, "N": samples.n}
            if meta is not None:
                header["meta"] = meta
            f.write(json.dumps(header, default=str) + "\n")
            parts = []
            for var, x in enumerate(samples.values):
                coo = sp.coo_matrix(x)
                keep = coo.data != 0
                parts.append(
                    np.column_stack(
                        [coo.col[keep], np.full(keep.sum(), var), coo.row[keep], coo.data[keep]]
                    )
                )
            table = np.vstack(parts) if parts else np.zeros((0, 4))
            order = np.lexsort((table[:, 2], table[:, 1], table[:, 0]))
            writer = csv.writer(f)
            for sample, var, coord, value in table[order]:
                writer.writerow([int(sample), int(var), int(coord), _number(value)])
        elif fmt == "dense":
            if meta is not None:
                f.write(f"# {_comment_json(meta)}\n")
            writer = csv.writer(f)
            writer.writerow(
                [f"x{var}_{coord}" for var, d in enumerate(samples.dims) for coord in range(d)]
            )
            stacked = np.vstack([samples.dense(var) for var in range(samples.p)])
            for column in stacked.T:
                writer.writerow([_number(v) for v in column])
        else:
            raise ValueError(f"unknown sample format {fmt!r}")


def _number(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------
def _newick_comment(meta: dict) -> str:
    """``[latree key=value ...]`` with nested keys dotted and values as JSON scalars."""

    def flatten(prefix: str, value: object) -> list[tuple[str, object]]:
        if isinstance(value, dict):
            return [
                pair
                for key in sorted(value)
                for pair in flatten(f"{prefix}.{key}" if prefix else str(key), value[key])
            ]
        if isinstance(value, (list, tuple)):
            return [pair for i, v in enumerate(value) for pair in flatten(f"{prefix}.{i}", v)]
        return [(prefix, value)]

    fields = []
    for key, value in flatten("", meta):
        text = json.dumps(value, default=str)
        escaped = text.replace("[", "\\u005b").replace("]", "\\u005d")
        fields.append(f"{key}={escaped}")
    return f"[latree {' '.join(fields)}]"


def to_dot(
    graph: LatentTree | MstGraph, name: str = "latent_tree", meta: dict | None = None
) -> str:
    """DOT text; ``meta`` becomes a leading ``//`` comment."""
    lines = [f"graph {name} {{"]
    if meta is not None:
        lines.insert(0, f"// latree {_comment_json(meta)}")
    if isinstance(graph, MstGraph):
        lines.extend(f"  {n} [shape=box];" for n in graph.nodes)
        lines.extend(f'  {a} -- {b} [label="{w:.6g}"];' for a, b, w in graph.edges)
    else:
        for n in sorted(graph.dims):
            shape = "box" if graph.kinds[n] == "obs" else "circle"
            lines.append(f"  {n} [shape={shape}];")
        lines.extend(f"  {a} -- {b};" for a, b in sorted(graph.edges))
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_newick(tree: LatentTree, meta: dict | None = None) -> str:
    """Newick string rooted at the lowest hidden id; observed nodes keep their ids as labels.

    ``meta`` becomes a bracketed comment on the line before the tree.
    """
    g = tree.graph()
    hidden = tree.hidden
    root = hidden[0] if hidden else min(tree.dims)
    parent = dict(nx.bfs_predecessors(g, root))
    children: dict[int, list[int]] = {n: [] for n in g.nodes}
    for child, par in parent.items():
        children[par].append(child)
    text: dict[int, str] = {}
    for node in nx.dfs_postorder_nodes(g, root):
        label = "" if tree.kinds[node] == "hid" else str(node)
        kids = sorted(children[node])
        text[node] = f"({','.join(text[c] for c in kids)}){label}" if kids else label
    head = f"{_newick_comment(meta)}\n" if meta is not None else ""
    return head + text[root] + ";\n"


def write_distance_csv(dist: DistanceMatrix, path: str, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if meta is not None:
            f.write(f"# {_comment_json(meta)}\n")
        writer.writerow(["node", *dist.ids])
        for i, node in enumerate(dist.ids):
            writer.writerow([node, *("inf" if np.isinf(v) else _number(v) for v in dist.values[i])])


def write_json(obj: object, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, default=str)
        f.write("\n")
