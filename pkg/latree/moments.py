"""Empirical second/third moments and rank-k SVD (exact and sketched)."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from latree.config import CHUNK
from latree.errors import ModelError
from latree.model import SampleSet


@dataclass(frozen=True)
class SecondMoment:
    matrix: np.ndarray
    pair: tuple[int, int]
    n: int


@dataclass(frozen=True)
class ThirdMoment:
    tensor: np.ndarray
    triple: tuple[int, int, int]
    n: int


@dataclass(frozen=True)
class RankKFactors:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


class MomentSource(Protocol):
    """Anything that can answer cross moments between nodes."""

    def dim(self, node: int) -> int: ...

    def pair(self, a: int, b: int) -> np.ndarray: ...

    def triple(self, a: int, b: int, c: int) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Empirical moments
# ---------------------------------------------------------------------------
def pairwise_moment(samples: SampleSet, a: int, b: int) -> SecondMoment:
    """(1/N) sum_n y_a y_b^T. Sparse inputs only touch nonzeros."""
    if samples.n == 0:
        raise ModelError("cannot estimate moments from zero samples")
    if a > b:
        flipped = pairwise_moment(samples, b, a)
        return SecondMoment(flipped.matrix.T.copy(), (a, b), samples.n)
    xa, xb = samples.values[a], samples.values[b]
    product = xa @ xb.T
    if sp.issparse(product):
        product = product.toarray()
    return SecondMoment(np.asarray(product, dtype=float) / samples.n, (a, b), samples.n)


def triplet_moment(
    samples: SampleSet, a: int, b: int, c: int, chunk: int = CHUNK
) -> ThirdMoment:
    """(1/N) sum_n y_a (x) y_b (x) y_c, accumulated over sample blocks."""
    if samples.n == 0:
        raise ModelError("cannot estimate moments from zero samples")
    if len({a, b, c}) != 3:
        raise ModelError(f"triplet moment needs distinct nodes, got {(a, b, c)}")
    dims = samples.dims
    out = np.zeros((dims[a], dims[b], dims[c]))
    for start in range(0, samples.n, chunk):
        stop = min(start + chunk, samples.n)
        out += np.einsum(
            "in,jn,kn->ijk",
            samples.dense(a, start, stop),
            samples.dense(b, start, stop),
            samples.dense(c, start, stop),
            optimize=True,
        )
    return ThirdMoment(out / samples.n, (a, b, c), samples.n)


class SampleMoments:
    """MomentSource over a SampleSet; safe to share across threads.

    Pair and triple moments are memoized by their sorted node ids, so LRG
    rounds and the tensor stage reuse what earlier stages computed. Callers
    get copies and may modify them.
    """

    def __init__(self, samples: SampleSet, chunk: int = CHUNK):
        self.samples = samples
        self.chunk = chunk
        self._pairs: dict[tuple[int, int], np.ndarray] = {}
        self._triples: dict[tuple[int, int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def observed(self) -> list[int]:
        return list(range(self.samples.p))

    def dim(self, node: int) -> int:
        return self.samples.dims[node]

    @property
    def cached(self) -> int:
        with self._lock:
            return len(self._pairs) + len(self._triples)

    def pair(self, a: int, b: int) -> np.ndarray:
        key = (min(a, b), max(a, b))
        with self._lock:
            m = self._pairs.get(key)
        if m is None:
            m = pairwise_moment(self.samples, *key).matrix
            with self._lock:
                m = self._pairs.setdefault(key, m)
        return m.copy() if a <= b else m.T.copy()

    def triple(self, a: int, b: int, c: int) -> np.ndarray:
        x, y, z = sorted((a, b, c))
        key = (x, y, z)
        with self._lock:
            t = self._triples.get(key)
        if t is None:
            t = triplet_moment(self.samples, x, y, z, chunk=self.chunk).tensor
            with self._lock:
                t = self._triples.setdefault(key, t)
        axes = tuple(key.index(n) for n in (a, b, c))
        return np.transpose(t, axes).copy()

    def stacked(
        self, nodes: list[int], start: int = 0, stop: int | None = None
    ) -> np.ndarray | sp.spmatrix:
        """Rows of ``nodes`` one above the other, restricted to samples [start, stop)."""
        parts = [self.samples.values[n][:, start:stop] for n in nodes]
        if any(sp.issparse(x) for x in parts):
            return sp.vstack([sp.csr_matrix(x) for x in parts], format="csr")
        return np.vstack([np.asarray(x, dtype=float) for x in parts])

    def block(
        self, rows: list[int], cols: list[int], start: int = 0, stop: int | None = None
    ) -> np.ndarray:
        """Stacked cross moment of ``rows`` against ``cols`` over samples [start, stop).

        Not memoized: a tile of the distance stage asks for it once.
        """
        stop = self.samples.n if stop is None else stop
        if stop <= start:
            raise ModelError("cannot estimate moments from zero samples")
        product = self.stacked(rows, start, stop) @ self.stacked(cols, start, stop).T
        if sp.issparse(product):
            product = product.toarray()
        return np.asarray(product, dtype=float) / (stop - start)


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------
def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First nonzero entry of every U column positive; V follows."""
    for j in range(u.shape[1]):
        nonzero = np.flatnonzero(np.abs(u[:, j]) > 1e-14)
        if nonzero.size and u[nonzero[0], j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, v


def svd_rank_k(m: np.ndarray, k: int) -> RankKFactors:
    """Best rank-k factors with a deterministic sign convention."""
    m = m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float)
    if k < 1 or k > min(m.shape):
        raise ValueError(f"k={k} exceeds matrix dimensions {m.shape}")
    u, s, vt = sla.svd(m, full_matrices=False, lapack_driver="gesdd")
    u, v = _fix_signs(u[:, :k].copy(), vt[:k].T.copy())
    return RankKFactors(u, s[:k].copy(), v)


def randomized_svd_rank_k(
    m: np.ndarray | sp.spmatrix,
    k: int,
    alpha: float = 3.0,
    seed: int = 0,
    power_iters: int = 1,
) -> RankKFactors:
    """Rank-k SVD from a sparse sign sketch.

    The sketch is ``S = D Phi``: ``D`` a Rademacher diagonal and ``Phi`` a
    0/1 matrix with exactly one nonzero per row, ``ceil(alpha k)`` columns,
    rows spread evenly over the columns. ``M S`` spans the dominant range,
    a few power steps sharpen it, and the SVD of the small projection
    ``Q^T M`` gives the factors.
    """
    rows, cols = m.shape
    width = int(math.ceil(alpha * k))
    if k < 1 or width > min(rows, cols):
        raise ValueError(
            f"sketch width {width} (alpha={alpha}, k={k}) exceeds dimensions {m.shape}"
        )
    row_mass = np.asarray(abs(m).sum(axis=1)).ravel()
    col_mass = np.asarray(abs(m).sum(axis=0)).ravel()
    if np.any(row_mass == 0) or np.any(col_mass == 0):
        raise ValueError("matrix has an all-zero row or column; drop it before sketching")

    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=cols)
    buckets = rng.permutation(cols) % width
    sketch = sp.csr_matrix((signs, (np.arange(cols), buckets)), shape=(cols, width))

    y = m @ sketch
    y = y.toarray() if sp.issparse(y) else np.asarray(y)
    q, _ = np.linalg.qr(y)
    for _ in range(power_iters):
        z = m.T @ q
        z, _ = np.linalg.qr(np.asarray(z))
        y = m @ z
        q, _ = np.linalg.qr(np.asarray(y))
    b = np.asarray(m.T @ q).T
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u, v = _fix_signs((q @ ub[:, :k]).copy(), vt[:k].T.copy())
    return RankKFactors(u, s[:k].copy(), v)
