"""Triplet parameter recovery with a whitened, deflated tensor power method.

For three views joined at one hidden node,

    E[y_a (x) y_b (x) y_c] = sum_r pi_r A_a[:, r] (x) A_b[:, r] (x) A_c[:, r].

Views a and b are mapped onto view c with ``T_a = M_cb pinv(M_ab)`` and
``T_b = M_ca pinv(M_ba)``, which gives the symmetric pair
``M2 = C diag(pi) C^T`` and ``M3 = sum_r pi_r c_r^(x3)``. Whitening with
``W = U S^-1/2`` from the top-k SVD of M2 turns M3 into an orthogonally
decomposable k x k x k tensor with eigenvalues ``1/sqrt(pi_r)``. Columns of C
come back as ``lambda_r U S^1/2 theta_r``; A and B follow from
``M_ac pinv(C)^T diag(1/pi)`` and ``M_bc pinv(C)^T diag(1/pi)``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from latree.config import ITERS, PRIOR_CLAMP, RESTARTS, SINGULAR_FLOOR, TOL
from latree.errors import DecompositionError
from latree.moments import MomentSource, svd_rank_k

logger = logging.getLogger("latree.tensor")


@dataclass(frozen=True)
class TripletParams:
    views: tuple[int, int, int]
    a: tuple[np.ndarray, np.ndarray, np.ndarray]  # E[y_view | h], one column per state
    pi: np.ndarray
    residual: float
    low_confidence: bool = False
    notes: tuple[str, ...] = field(default=())

    def view(self, node: int) -> np.ndarray:
        return self.a[self.views.index(node)]

    def permuted(self, perm: np.ndarray) -> TripletParams:
        """New state r is old state ``perm[r]``."""
        perm = np.asarray(perm)
        return replace(self, a=tuple(m[:, perm] for m in self.a), pi=self.pi[perm])


@dataclass(frozen=True)
class Whitener:
    w: np.ndarray  # d x k, W^T M2 W = I
    unwhiten: np.ndarray  # d x k, pinv(W^T)

    @classmethod
    def from_moment(cls, m2: np.ndarray, k: int) -> Whitener:
        factors = svd_rank_k(m2, k)
        if factors.s[-1] <= SINGULAR_FLOOR:
            raise DecompositionError("second moment has rank below k; cannot whiten")
        root = np.sqrt(factors.s)
        return cls(factors.u / root, factors.u * root)


def _pinv_k(m: np.ndarray, k: int) -> np.ndarray:
    factors = svd_rank_k(m, k)
    if factors.s[-1] <= SINGULAR_FLOOR:
        raise DecompositionError("cross moment has rank below k")
    return (factors.v / factors.s) @ factors.u.T


def symmetrize_views(
    t3: np.ndarray, m_ab: np.ndarray, m_ac: np.ndarray, m_bc: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Map views a and b onto view c; returns the symmetric (M2, M3) pair."""
    t_a = m_bc.T @ _pinv_k(m_ab, k)
    t_b = m_ac.T @ _pinv_k(m_ab.T, k)
    m2 = t_a @ m_ab @ t_b.T
    m2 = 0.5 * (m2 + m2.T)
    m3 = np.einsum("ijk,ai,bj->abk", t3, t_a, t_b)
    return m2, m3


def _symmetric_part(t: np.ndarray) -> np.ndarray:
    perms = list(itertools.permutations(range(3)))
    return sum(np.transpose(t, p) for p in perms) / len(perms)


def tensor_power_method(
    t: np.ndarray, k: int, restarts: int, iters: int, tol: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Robust power iteration with deflation. Returns (lambdas, thetas as columns).

    Each component keeps the restart with the smallest deflation residual.
    """
    t = t.copy()
    lambdas = np.zeros(k)
    thetas = np.zeros((k, k))
    for comp in range(k):
        start = rng.normal(size=(restarts, k))
        theta = start / np.linalg.norm(start, axis=1, keepdims=True)
        for _ in range(iters):
            nxt = np.einsum("ijk,lj,lk->li", t, theta, theta)
            norms = np.linalg.norm(nxt, axis=1, keepdims=True)
            nxt = np.where(norms > 0, nxt / np.where(norms > 0, norms, 1.0), theta)
            done = np.max(np.abs(nxt - theta)) < tol
            theta = nxt
            if done:
                break
        values = np.einsum("ijk,li,lj,lk->l", t, theta, theta, theta)
        # ||T - lam theta^3||^2 = ||T||^2 - lam^2 for unit theta and lam = T(theta, theta, theta)
        residuals = np.sum(t**2) - values**2
        pick = int(np.argmin(residuals))
        best = theta[pick] if values[pick] >= 0 else -theta[pick]
        for _ in range(iters):
            nxt = np.einsum("ijk,j,k->i", t, best, best)
            norm = np.linalg.norm(nxt)
            if norm == 0:
                break
            nxt = nxt / norm
            done = np.max(np.abs(nxt - best)) < tol
            best = nxt
            if done:
                break
        lam = float(np.einsum("ijk,i,j,k->", t, best, best, best))
        lambdas[comp] = lam
        thetas[:, comp] = best
        t = t - lam * np.einsum("i,j,k->ijk", best, best, best)
    return lambdas, thetas


def _canonical_order(pi: np.ndarray, mats: tuple[np.ndarray, ...]) -> np.ndarray:
    stacked = np.vstack(mats)
    return np.array(
        sorted(range(pi.size), key=lambda r: (-pi[r], tuple(stacked[:, r].tolist()))), dtype=int
    )


def decompose_triplet(
    source: MomentSource,
    views: tuple[int, int, int],
    k: int,
    restarts: int = RESTARTS,
    iters: int = ITERS,
    tol: float = TOL,
    seed: int = 0,
) -> TripletParams:
    """Recover E[y|h] for the three views and the prior of their joining hidden node."""
    a, b, c = views
    t3 = source.triple(a, b, c)
    m_ab, m_ac, m_bc = source.pair(a, b), source.pair(a, c), source.pair(b, c)
    if k > min(t3.shape):
        raise DecompositionError(f"k={k} exceeds view dimensions {t3.shape}")

    m2, m3 = symmetrize_views(t3, m_ab, m_ac, m_bc, k)
    whitener = Whitener.from_moment(m2, k)
    w = whitener.w
    tw = _symmetric_part(np.einsum("ijk,ia,jb,kc->abc", m3, w, w, w))

    rng = np.random.default_rng(seed)
    lambdas, thetas = tensor_power_method(tw, k, restarts, iters, tol, rng)

    notes: list[str] = []
    low_confidence = False
    if k > 1:
        ordered = np.sort(lambdas)
        gap = float(np.min(np.diff(ordered)))
        if gap < tol:
            low_confidence = True
            notes.append(f"eigen-gap {gap:.3g} below tolerance")
    if np.any(np.abs(lambdas) <= SINGULAR_FLOOR):
        raise DecompositionError("tensor power method returned a zero eigenvalue")

    pi = np.sign(lambdas) / lambdas**2
    pi = pi / pi.sum()
    if np.any(pi < -PRIOR_CLAMP):
        raise DecompositionError(f"negative prior component {pi.min():.3g}")
    if np.any(pi < 0):
        notes.append("clamped tiny negative prior components")
        pi = np.clip(pi, 0.0, None)
        pi = pi / pi.sum()

    mat_c = (whitener.unwhiten @ thetas) * lambdas
    inv_ct = np.linalg.pinv(mat_c).T / np.maximum(pi, SINGULAR_FLOOR)
    mat_a = m_ac @ inv_ct
    mat_b = m_bc @ inv_ct

    order = _canonical_order(pi, (mat_a, mat_b, mat_c))
    pi = pi[order]
    mats = (mat_a[:, order], mat_b[:, order], mat_c[:, order])
    recon = np.einsum("r,ir,jr,kr->ijk", pi, *mats)
    residual = float(np.linalg.norm(t3 - recon))
    if low_confidence:
        logger.warning(f"triplet {views}: low-confidence decomposition ({'; '.join(notes)})")
    return TripletParams(tuple(views), mats, pi, residual, low_confidence, tuple(notes))


def posterior_hidden(
    x: np.ndarray,
    a: np.ndarray,
    pi: np.ndarray,
    family: str | None,
    noise: float = 1.0,
) -> np.ndarray:
    """P(h | y) for one observation (``d``) or a batch (``d x N``)."""
    single = x.ndim == 1
    obs = x[:, None] if single else x
    if family == "discrete":
        loglik = obs.T @ np.log(np.clip(a, 1e-300, None))
    elif family == "gaussian":
        sq = ((obs[:, :, None] - a[:, None, :]) ** 2).sum(axis=0)
        loglik = -sq / (2.0 * noise**2)
    else:
        raise ValueError(f"posterior needs a declared observation family, got {family!r}")
    logpost = loglik + np.log(np.clip(pi, 1e-300, None))[None, :]
    post = np.exp(logpost - logsumexp(logpost, axis=1, keepdims=True)).T
    return post[:, 0] if single else post
