"""Context partition of the label space and the context-identification head.

The partition is spectral clustering of the label co-occurrence graph:
co-occurrence counts -> symmetric affinity -> normalized Laplacian -> the
eigenvectors of its smallest eigenvalues -> k-means on the row-normalized
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import LinearLayer
from .tensor import DimensionError, Tensor

NO_CONTEXT = -1
ISOLATED_DEGREE = 1e-8
JACOBI_TOL = 1e-10


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class CooccurrenceMatrix:
    S: np.ndarray
    e: np.ndarray
    n_count: np.ndarray


@dataclass(frozen=True)
class SpectralEmbedding:
    P: np.ndarray
    D: np.ndarray
    L: np.ndarray
    normalized_laplacian: np.ndarray
    eigenvalues: np.ndarray  # the K smallest, ascending
    F: np.ndarray  # C x K eigenvectors before row normalization
    F_hat: np.ndarray  # rows L2-normalized when row_normalized
    row_normalized: bool = True


@dataclass(frozen=True)
class ContextPartition:
    K: int
    assignment: np.ndarray
    inertia: float = 0.0
    eigenvalues: Optional[np.ndarray] = None

    def blocks(self) -> list[list[int]]:
        return [[int(c) for c in np.flatnonzero(self.assignment == k)] for k in range(self.K)]

    def to_json(self) -> dict:
        eig = [] if self.eigenvalues is None else [float(v) for v in self.eigenvalues]
        return {"K": int(self.K), "assignment": [int(a) for a in self.assignment], "eigenvalues": eig}


def build_cooccurrence(y_labeled: np.ndarray, literal_only: bool = False) -> CooccurrenceMatrix:
    """``S[k, l] = e[k, l] / n_k`` from labeled data.

    ``n_k`` counts images containing label ``k``; with ``literal_only`` it
    counts images whose only positive label is ``k``. Rows with ``n_k = 0`` are 0.
    """
    y = np.asarray(y_labeled, dtype=np.int64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("build_cooccurrence needs at least one labeled row")
    e = y.T @ y
    if literal_only:
        n_count = y[y.sum(axis=1) == 1].sum(axis=0)
    else:
        n_count = np.diag(e).copy()
    S = np.zeros(e.shape, dtype=np.float64)
    nz = n_count > 0
    S[nz] = e[nz] / n_count[nz, None]
    np.fill_diagonal(S, 0.0)
    return CooccurrenceMatrix(S, e, n_count)


def affinity(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"affinity needs a square matrix, got {S.shape}")
    P = (S + S.T) / 2.0
    np.fill_diagonal(P, 0.0)
    return P


def jacobi_eigh(A: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns ascending eigenvalues and unit eigenvectors as columns. Each
    vector's largest-magnitude entry (first one on ties) is made positive.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {A.shape}")
    V = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(A)))
    offdiag = ~np.eye(n, dtype=bool)
    eps = np.finfo(np.float64).eps
    for _ in range(max_sweeps):
        # measured directly: ||A||^2 - ||diag||^2 cancels down to ~sqrt(eps)
        off = float(np.linalg.norm(A[offdiag]))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= eps * 1e-3 * (abs(A[p, p]) + abs(A[q, q])):
                    A[p, q] = A[q, p] = 0.0
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = float(np.linalg.norm(A[offdiag]))
        if off > tol * scale:
            raise NumericError(f"Jacobi did not converge: off-diagonal norm {off:.3e}")
    vals = np.diag(A).copy()
    order = np.argsort(vals, kind="stable")
    vals, V = vals[order], V[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return vals, V


def normalized_laplacian(P: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(D, L, D^-1/2 L D^-1/2)``; zero-degree vertices get a tiny degree."""
    deg = P.sum(axis=1)
    deg = np.where(deg > 0, deg, ISOLATED_DEGREE)
    D = np.diag(deg)
    L = D - P
    inv_sqrt = 1.0 / np.sqrt(deg)
    Ln = inv_sqrt[:, None] * L * inv_sqrt[None, :]
    # symmetrize away rounding so the eigensolver sees an exactly symmetric input
    Ln = (Ln + Ln.T) / 2.0
    return D, L, Ln


def spectral_embed(P: np.ndarray, K: int, row_normalize: bool = True) -> SpectralEmbedding:
    P = np.asarray(P, dtype=np.float64)
    C = P.shape[0]
    if not 1 <= K <= C:
        raise ValueError(f"need 1 <= K <= C, got K={K}, C={C}")
    D, L, Ln = normalized_laplacian(P)
    vals, vecs = jacobi_eigh(Ln)
    F = vecs[:, :K]
    F_hat = F
    if row_normalize:
        norms = np.linalg.norm(F, axis=1, keepdims=True)
        F_hat = np.where(norms > 0, F / np.where(norms > 0, norms, 1.0), 0.0)
    return SpectralEmbedding(P, D, L, Ln, vals[:K], F, F_hat, row_normalize)


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, K):
        d2 = _sq_dists(X, X[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in chosen]
            chosen.append(rest[0])
            continue
        chosen.append(int(rng.choice(n, p=d2 / total)))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float) -> tuple[np.ndarray, float]:
    K = centers.shape[0]
    prev = np.inf
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        assign = np.argmin(d2, axis=1)  # first minimum: lowest cluster id on ties
        for k in range(K):
            members = assign == k
            if members.any():
                centers[k] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(X)), assign]))
                centers[k] = X[far]
                assign[far] = k
        inertia = float(_sq_dists(X, centers)[np.arange(len(X)), assign].sum())
        if inertia == 0.0 or abs(prev - inertia) <= tol * prev:
            break
        prev = inertia
    d2 = _sq_dists(X, centers)
    assign = np.argmin(d2, axis=1)
    return assign, float(d2[np.arange(len(X)), assign].sum())


def _canonical(assign: np.ndarray, K: int) -> np.ndarray:
    """Renumber clusters by the order in which they first appear."""
    mapping: dict[int, int] = {}
    for a in assign:
        if int(a) not in mapping:
            mapping[int(a)] = len(mapping)
    for k in range(K):
        mapping.setdefault(k, len(mapping))
    return np.array([mapping[int(a)] for a in assign], dtype=np.int64)


def kmeans(X: np.ndarray, K: int, seed: int = 0, n_restarts: int = 10, max_iter: int = 300, tol: float = 1e-8) -> ContextPartition:
    """k-means++ seeded Lloyd iterations; the lowest-inertia restart wins (first on ties)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not 1 <= K <= X.shape[0]:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={X.shape[0]}")
    rng = np.random.default_rng(seed)
    best_assign, best_inertia = None, np.inf
    for _ in range(n_restarts):
        assign, inertia = _lloyd(X, _kmeans_pp(X, K, rng), max_iter, tol)
        if inertia < best_inertia:
            best_assign, best_inertia = assign, inertia
    return ContextPartition(K, _canonical(best_assign, K), best_inertia)


def fiedler_sweep(P: np.ndarray, emb: Optional[SpectralEmbedding] = None) -> np.ndarray:
    """Best normalized-cut threshold of the second random-walk eigenvector ``D^-1/2 f_2``.

    Every split point of the sorted vector is scored with :func:`ncut_value`;
    the first minimum wins. Needs at least two vertices.
    """
    P = np.asarray(P, dtype=np.float64)
    C = P.shape[0]
    if C < 2:
        raise ValueError("fiedler_sweep needs at least two vertices")
    emb = emb if emb is not None and emb.F.shape[1] >= 2 else spectral_embed(P, 2)
    f = emb.F[:, 1] / np.sqrt(np.diag(emb.D))
    order = np.argsort(f, kind="stable")
    best, best_val = None, np.inf
    for i in range(1, C):
        a = np.zeros(C, dtype=np.int64)
        a[order[i:]] = 1
        v = ncut_value(P, a)
        if v < best_val:
            best, best_val = a, v
    return _canonical(best, 2)


def partition_affinity(P: np.ndarray, K: int, seed: int = 0) -> ContextPartition:
    """Spectral clustering of an affinity matrix.

    For ``K = 2`` the k-means split competes with the Fiedler sweep cut and the
    lower normalized cut is kept (k-means on ties).
    """
    P = np.asarray(P, dtype=np.float64)
    emb = spectral_embed(P, K)
    part = kmeans(emb.F_hat, K, seed=seed)
    assignment = part.assignment
    if K == 2:
        swept = fiedler_sweep(P, emb)
        if ncut_value(P, swept) < ncut_value(P, assignment):
            assignment = swept
    return ContextPartition(K, assignment, part.inertia, emb.eigenvalues)


def context_partition(y_labeled: np.ndarray, K: int, seed: int = 0, literal_only: bool = False) -> ContextPartition:
    co = build_cooccurrence(y_labeled, literal_only=literal_only)
    return partition_affinity(affinity(co.S), K, seed)


def ncut_value(P: np.ndarray, assignment: np.ndarray) -> float:
    """Normalized cut: sum over clusters of cut(A, rest) / vol(A)."""
    P = np.asarray(P, dtype=np.float64)
    deg = P.sum(axis=1)
    total = 0.0
    for k in np.unique(assignment):
        inside = assignment == k
        vol = deg[inside].sum()
        cut = P[np.ix_(inside, ~inside)].sum()
        total += cut / vol if vol > 0 else 0.0
    return float(total)


def assign_context_labels(y_labeled: np.ndarray, partition: ContextPartition) -> np.ndarray:
    """Majority context among an image's positive labels; ties go to the lowest id.

    Images without positives get ``NO_CONTEXT``.
    """
    y = np.asarray(y_labeled)
    out = np.full(y.shape[0], NO_CONTEXT, dtype=np.int64)
    for i, row in enumerate(y):
        clusters = partition.assignment[np.flatnonzero(row == 1)]
        if clusters.size:
            out[i] = int(np.argmax(np.bincount(clusters, minlength=partition.K)))
    return out


class ContextHead(LinearLayer):
    """Linear map of the global feature to K context logits (softmax applied in forward)."""

    def __init__(self, d: int, K: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__(d, K, rng, std=std)
        self.K = K


def context_forward(g, head: ContextHead) -> Tensor:
    g = g if isinstance(g, Tensor) else T.tensor(g)
    if g.shape[-1] != head.d_in:
        raise DimensionError(f"context head expects width {head.d_in}, got {g.shape}")
    return T.softmax(head(g), axis=-1)


def context_pseudo(q_a: np.ndarray, tau: float = 0.9) -> list[tuple[int, int]]:
    """``(row, argmax)`` for rows whose confidence strictly exceeds ``tau``."""
    q = np.asarray(q_a)
    keep = np.flatnonzero(q.max(axis=1) > tau)
    return [(int(i), int(np.argmax(q[i]))) for i in keep]
