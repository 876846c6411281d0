"""Multivariate information distance and the parallel all-pairs matrix."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from latree.config import ALPHA, CLAMP_TOLERANCE, SINGULAR_FLOOR
from latree.logging_setup import event
from latree.model import SampleSet
from latree.moments import MomentSource, SampleMoments, randomized_svd_rank_k, svd_rank_k

logger = logging.getLogger("latree.distances")

# Nodes per side of one unit of work in the all-pairs stage.
TILE = 32


@dataclass
class DistanceMatrix:
    """Symmetric distances between node ids; may grow as hidden nodes appear.

    ``stderr`` holds jackknife standard errors when the distances came from
    samples and were asked for, else None.
    """

    values: np.ndarray
    ids: list[int]
    infinite: int = 0
    clamped: int = 0
    fallbacks: int = 0
    stderr: np.ndarray | None = None
    _index: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._index = {node: i for i, node in enumerate(self.ids)}

    def __contains__(self, node: int) -> bool:
        return node in self._index

    def __call__(self, a: int, b: int) -> float:
        return float(self.values[self._index[a], self._index[b]])

    def noise(self, a: int, b: int) -> float:
        """Standard error of d(a, b), 0 when unknown."""
        if self.stderr is None:
            return 0.0
        return float(self.stderr[self._index[a], self._index[b]])

    def submatrix(self, nodes: Iterable[int]) -> DistanceMatrix:
        nodes = list(nodes)
        idx = np.ix_([self._index[n] for n in nodes], [self._index[n] for n in nodes])
        stderr = None if self.stderr is None else self.stderr[idx].copy()
        return DistanceMatrix(self.values[idx].copy(), nodes, stderr=stderr)

    def extended(
        self, node: int, row: Mapping[int, float], noise: Mapping[int, float] | None = None
    ) -> DistanceMatrix:
        """Copy with one more node; ``row`` must give its distance to every existing node."""
        n = len(self.ids)
        values = np.zeros((n + 1, n + 1))
        values[:n, :n] = self.values
        for other, value in row.items():
            i = self._index[other]
            values[i, n] = values[n, i] = value
        stderr = None
        if self.stderr is not None:
            stderr = np.zeros((n + 1, n + 1))
            stderr[:n, :n] = self.stderr
            for other, value in (noise or {}).items():
                i = self._index[other]
                stderr[i, n] = stderr[n, i] = value
        return DistanceMatrix(
            values, [*self.ids, node], self.infinite, self.clamped, stderr=stderr
        )

    def min_offdiagonal(self) -> float:
        n = len(self.ids)
        if n < 2:
            return 0.0
        mask = ~np.eye(n, dtype=bool)
        return float(self.values[mask].min())

    def median_noise(self) -> float | None:
        """Median finite off-diagonal standard error, None when unknown."""
        if self.stderr is None or len(self.ids) < 2:
            return None
        upper = self.stderr[np.triu_indices(len(self.ids), 1)]
        finite = upper[np.isfinite(upper)]
        return float(np.median(finite)) if finite.size else None


def _log_volume(m: np.ndarray, k: int) -> float:
    """Log of the top-k singular value product of M.

    Equals log|det M| when M is k x k. Using the top-k product for wider
    blocks keeps leaf edges positive when observed dimension exceeds k.
    """
    s = sla.svdvals(m)
    if s[k - 1] <= SINGULAR_FLOOR:
        return -math.inf
    return float(np.sum(np.log(s[:k])))


def nonzero_block(m: np.ndarray) -> np.ndarray:
    """``m`` without its all-zero rows and columns; singular values are unchanged."""
    rows = np.flatnonzero(np.abs(m).sum(axis=1))
    cols = np.flatnonzero(np.abs(m).sum(axis=0))
    if len(rows) == m.shape[0] and len(cols) == m.shape[1]:
        return m
    return m[np.ix_(rows, cols)]


def sketch_fits(m_ab: np.ndarray, k: int, alpha: float = ALPHA) -> bool:
    """Whether the randomized SVD can run on the nonzero block of ``m_ab``."""
    return math.ceil(alpha * k) <= min(nonzero_block(m_ab).shape)


def info_distance(
    m_ab: np.ndarray,
    m_aa: np.ndarray,
    m_bb: np.ndarray,
    k: int,
    svd_mode: str = "exact",
    alpha: float = ALPHA,
    seed: int = 0,
) -> float:
    """-log( prod_{i<=k} sigma_i(M_ab) / sqrt(vol(M_aa) vol(M_bb)) ).

    Returns +inf when sigma_k(M_ab) is below the singularity floor. Raw value,
    negatives are left to the caller. Randomized mode sketches the nonzero
    block of M_ab and runs the exact SVD when that block is narrower than
    the sketch.
    """
    for name, m in (("M_ab", m_ab), ("M_aa", m_aa), ("M_bb", m_bb)):
        if not np.all(np.isfinite(m)):
            raise ValueError(f"{name} has non-finite entries")
    if k > min(*m_ab.shape, *m_aa.shape, *m_bb.shape):
        raise ValueError(f"k={k} exceeds moment dimensions")

    if svd_mode == "randomized" and sketch_fits(m_ab, k, alpha):
        s = randomized_svd_rank_k(nonzero_block(m_ab), k, alpha=alpha, seed=seed).s
    else:
        s = svd_rank_k(m_ab, k).s
    if s[k - 1] <= SINGULAR_FLOOR:
        return math.inf
    denominator = 0.5 * (_log_volume(m_aa, k) + _log_volume(m_bb, k))
    if math.isinf(denominator):
        return math.inf
    return denominator - float(np.sum(np.log(s)))


def batched_distances(
    blocks: list[np.ndarray], vol_a: np.ndarray, vol_b: np.ndarray, k: int
) -> np.ndarray:
    """Exact distances for many cross moments; blocks of one shape share an SVD call.

    ``vol_a`` and ``vol_b`` are the log volumes of the self moments, per block.
    """
    out = np.empty(len(blocks))
    by_shape: dict[tuple[int, ...], list[int]] = {}
    for idx, m in enumerate(blocks):
        by_shape.setdefault(m.shape, []).append(idx)
    for idxs in by_shape.values():
        s = np.linalg.svd(np.stack([blocks[i] for i in idxs]), compute_uv=False)[:, :k]
        logs = np.sum(np.log(np.maximum(s, SINGULAR_FLOOR)), axis=1)
        values = 0.5 * (vol_a[idxs] + vol_b[idxs]) - logs
        values[(s[:, k - 1] <= SINGULAR_FLOOR) | ~np.isfinite(values)] = math.inf
        out[idxs] = values
    return out


def _pair_seed(seed: int, a: int, b: int) -> int:
    return int(np.random.SeedSequence([seed, a, b]).generate_state(1)[0])


def _tiles(p: int) -> list[tuple[range, range]]:
    starts = range(0, p, TILE)
    return [
        (range(r, min(r + TILE, p)), range(c, min(c + TILE, p)))
        for r in starts
        for c in starts
        if c >= r
    ]


class _Tile:
    """The pairs (i < j) of one tile and where their blocks sit in a stacked moment."""

    def __init__(self, rows: range, cols: range, dims: list[int]):
        self.rows, self.cols = rows, cols
        self.pairs = [(i, j) for i in rows for j in cols if i < j]
        self._row_at = np.concatenate([[0], np.cumsum([dims[i] for i in rows])])
        self._col_at = np.concatenate([[0], np.cumsum([dims[j] for j in cols])])

    def slices(self, stacked: np.ndarray) -> list[np.ndarray]:
        out = []
        for i, j in self.pairs:
            r, c = i - self.rows.start, j - self.cols.start
            rows = slice(self._row_at[r], self._row_at[r + 1])
            cols = slice(self._col_at[c], self._col_at[c + 1])
            out.append(stacked[rows, cols])
        return out


def _block_bounds(n: int, blocks: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, blocks + 1).astype(int)
    return [(int(s), int(e)) for s, e in zip(edges, edges[1:]) if e > s]


def all_pairs_distances(
    samples: SampleSet | MomentSource,
    k: int,
    svd_mode: str = "exact",
    alpha: float = ALPHA,
    seed: int = 0,
    threads: int = 1,
    nodes: list[int] | None = None,
    stderr_blocks: int = 0,
) -> DistanceMatrix:
    """Information distances between all observed nodes, fanned out over tiles.

    Each tile of node pairs is one task: with samples it is one stacked
    cross-moment product and one batched SVD per block shape. Every cell is
    computed by exactly one task from read-only inputs, so the result does
    not depend on ``threads``.

    With ``stderr_blocks >= 2`` and sample input, delete-one-block jackknife
    standard errors are attached as ``stderr`` (always from exact SVDs).
    """
    source = SampleMoments(samples) if isinstance(samples, SampleSet) else samples
    if nodes is None:
        nodes = list(source.observed)  # type: ignore[attr-defined]
    p = len(nodes)
    if p < 3:
        raise ValueError(f"need at least 3 observed nodes, got {p}")
    dims = [source.dim(n) for n in nodes]
    if k > min(dims):
        raise ValueError(f"k={k} exceeds moment dimensions")
    stacked = isinstance(source, SampleMoments)
    started = time.perf_counter()

    def moments_of(tile: _Tile) -> list[np.ndarray]:
        if stacked:
            block = source.block([nodes[i] for i in tile.rows], [nodes[j] for j in tile.cols])
            blocks = tile.slices(block)
        else:
            blocks = [source.pair(nodes[i], nodes[j]) for i, j in tile.pairs]
        for m in blocks:
            if not np.all(np.isfinite(m)):
                raise ValueError("M_ab has non-finite entries")
        return blocks

    def run(tile: _Tile) -> list[tuple[int, int, float, bool]]:
        if not tile.pairs:
            return []
        blocks = moments_of(tile)
        values = np.empty(len(tile.pairs))
        fallback = np.zeros(len(tile.pairs), dtype=bool)
        exact: list[int] = []
        for idx, (i, j) in enumerate(tile.pairs):
            if svd_mode != "randomized":
                exact.append(idx)
            elif not sketch_fits(blocks[idx], k, alpha):
                exact.append(idx)
                fallback[idx] = True
            else:
                a, b = nodes[i], nodes[j]
                values[idx] = info_distance(
                    blocks[idx], selfs[i], selfs[j], k, "randomized", alpha, _pair_seed(seed, a, b)
                )
        if exact:
            rows = np.array([tile.pairs[idx][0] for idx in exact])
            cols = np.array([tile.pairs[idx][1] for idx in exact])
            chosen = [blocks[idx] for idx in exact]
            values[exact] = batched_distances(chosen, vols[rows], vols[cols], k)
        return [
            (i, j, float(values[idx]), bool(fallback[idx])) for idx, (i, j) in enumerate(tile.pairs)
        ]

    tiles = [_Tile(rows, cols, dims) for rows, cols in _tiles(p)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        selfs = list(pool.map(lambda n: source.pair(n, n), nodes))
        for n, m in zip(nodes, selfs):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"self moment of node {n} has non-finite entries")
        vols = np.array([_log_volume(m, k) for m in selfs])
        results = list(pool.map(run, tiles))
        stderr = None
        if stderr_blocks >= 2 and stacked:
            stderr = _jackknife(source, nodes, dims, tiles, selfs, k, stderr_blocks, pool)

    pairs = p * (p - 1) // 2
    values = np.zeros((p, p))
    infinite = clamped = fallbacks = 0
    for batch in results:
        for i, j, value, fallback in batch:
            fallbacks += fallback
            if math.isinf(value):
                infinite += 1
            elif value < 0:
                if value < -CLAMP_TOLERANCE:
                    clamped += 1
                value = 0.0
            values[i, j] = values[j, i] = value

    if infinite:
        logger.warning(f"{infinite} of {pairs} pairwise distances are infinite")
    event(
        "distances",
        p=p,
        pairs=pairs,
        tiles=len(tiles),
        infinite=infinite,
        clamped=clamped,
        svd_fallbacks=fallbacks,
        stderr_blocks=stderr_blocks if stderr is not None else None,
        threads=threads,
        seconds=time.perf_counter() - started,
    )
    return DistanceMatrix(values, list(nodes), infinite, clamped, fallbacks, stderr)


def _jackknife(
    source: SampleMoments,
    nodes: list[int],
    dims: list[int],
    tiles: list[_Tile],
    selfs: list[np.ndarray],
    k: int,
    blocks: int,
    pool: ThreadPoolExecutor,
) -> np.ndarray | None:
    """Delete-one-block jackknife standard errors of every distance."""
    n = source.samples.n
    bounds = _block_bounds(n, blocks)
    if len(bounds) < 2:
        logger.warning(f"{n} samples are too few for {blocks} jackknife blocks")
        return None
    sizes = np.array([e - s for s, e in bounds], dtype=float)
    # log volumes of every node's self moment with block b left out
    loo_vols = np.empty((len(bounds), len(nodes)))
    for idx, node in enumerate(nodes):
        for b, (s, e) in enumerate(bounds):
            part = source.block([node], [node], s, e)
            loo = (n * selfs[idx] - sizes[b] * part) / (n - sizes[b])
            loo_vols[b, idx] = _log_volume(loo, k)

    def run(tile: _Tile) -> list[tuple[int, int, float]]:
        if not tile.pairs:
            return []
        rows = [nodes[i] for i in tile.rows]
        cols = [nodes[j] for j in tile.cols]
        sums = [source.block(rows, cols, s, e) * (e - s) for s, e in bounds]
        total = np.sum(sums, axis=0)
        ia = np.array([i for i, _ in tile.pairs])
        ib = np.array([j for _, j in tile.pairs])
        reps = np.array(
            [
                batched_distances(
                    tile.slices((total - part) / (n - size)), loo_vols[b, ia], loo_vols[b, ib], k
                )
                for b, (part, size) in enumerate(zip(sums, sizes))
            ]
        )
        finite = np.all(np.isfinite(reps), axis=0)
        safe = np.where(finite, reps, 0.0)
        spread = safe - safe.mean(axis=0)
        se = np.sqrt((len(bounds) - 1) / len(bounds) * np.sum(spread**2, axis=0))
        se[~finite] = math.inf
        return [(i, j, float(v)) for (i, j), v in zip(tile.pairs, se)]

    stderr = np.zeros((len(nodes), len(nodes)))
    for batch in pool.map(run, tiles):
        for i, j, value in batch:
            stderr[i, j] = stderr[j, i] = value
    return stderr
