"""Rank-factorization formulation with penalty enforcement.

A rank deficient embedding is written ``A_hat + dA_hat = U V`` with ``U``
of size ``N x R`` (orthonormal columns) and ``V`` of size ``R x M``.  The
penalty objective

    Phi(U, V) = |A_hat - U V|^2 + rho * Gamma(U V) + rho * |U^T U - I|^2

adds the squared distance of ``dA_hat`` from the conforming embeddings and
the orthogonality defect.  :func:`coordinate_descent` minimizes it block by
block; it serves as an initializer for the Newton solver and as a test
vehicle, not as a fast solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

from .embedding import REmbedding, r_embed
from .polycore import MatrixPolynomial
from .structure import PerturbationStructure, _slot_index, gamma, \
    project_embedding

__all__ = [
    "RankFactorization",
    "SeparationReport",
    "penalty_objective",
    "coordinate_descent",
    "separation_check",
]


@dataclass(frozen=True, eq=False)
class RankFactorization:
    U: np.ndarray
    V: np.ndarray
    rho: float
    objective: tuple
    deltaA: MatrixPolynomial
    structure: PerturbationStructure
    Ahat: np.ndarray
    mu: int

    @property
    def R(self) -> int:
        return self.U.shape[1]

    @property
    def dAhat(self) -> np.ndarray:
        """``U V - A_hat``."""
        return self.U @ self.V - self.Ahat


def _unpack(Ahat, structure: PerturbationStructure):
    if isinstance(Ahat, REmbedding):
        return np.asarray(Ahat.matrix, dtype=float), Ahat.mu
    return (np.asarray(Ahat, dtype=float),
            structure.n * structure.d + 1)


def penalty_objective(U, V, Ahat, structure: PerturbationStructure,
                      rho: float) -> float:
    """Exact value of ``Phi(U, V)``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    mat, mu = _unpack(Ahat, structure)
    UV = U @ V
    orth = U.T @ U - np.eye(U.shape[1])
    return float(np.sum((mat - UV) ** 2)
                 + rho * gamma(UV, structure, REmbedding(mat, structure.n,
                                                         structure.d, mu))
                 + rho * np.sum(orth ** 2))


def _structure_operator(structure: PerturbationStructure, N: int, M: int,
                        mu: int):
    """``(L, o)`` with ``Gamma = |L vec(Y) - o|^2`` for ``Y = U V - A_hat``.

    ``vec`` is row-major; ``L = I - Pi`` where ``Pi`` averages each free
    slot over its Toeplitz copies, and ``o`` embeds the fixed offsets.
    """
    idx = _slot_index(structure.n, structure.d, mu).ravel()
    free = structure.free.ravel()
    Pi = np.zeros((N * M, N * M))
    for slot in np.unique(idx[idx >= 0]):
        if free[slot]:
            where = np.flatnonzero(idx == slot)
            Pi[np.ix_(where, where)] = 1.0 / where.size
    o = np.where(idx >= 0, structure.offset.ravel()[np.maximum(idx, 0)], 0.0)
    o[(idx >= 0) & free[np.maximum(idx, 0)]] = 0.0
    return np.eye(N * M) - Pi, o


def _lsq(blocks, rhs) -> np.ndarray:
    return np.linalg.lstsq(np.vstack(blocks), np.concatenate(rhs),
                           rcond=None)[0]


def coordinate_descent(Ahat, structure: PerturbationStructure,
                       R: int | None = None, rho: float | None = None,
                       iters: int = 200, U0=None, V0=None,
                       tol: float = 1e-15) -> RankFactorization:
    """Block coordinate descent on ``Phi``.

    Each sweep minimizes exactly over ``V`` (linear least squares with
    ``U`` fixed), then over ``U`` ignoring the orthogonality penalty, and
    finally replaces ``U = W P`` by its polar factor ``W`` while ``V``
    absorbs ``P``.  The last move leaves ``U V`` unchanged and zeroes the
    orthogonality defect, so ``Phi`` never increases.  Starts from the
    truncated SVD unless ``U0, V0`` are given.
    """
    mat, mu = _unpack(Ahat, structure)
    N, M = mat.shape
    R = M - 1 if R is None else int(R)
    if not 1 <= R <= M - 1:
        raise ValueError(f"R must lie in [1, {M - 1}]")
    rho = 1e3 * float(np.sum(mat ** 2)) if rho is None else float(rho)
    if U0 is None:
        W, s, Vt = np.linalg.svd(mat, full_matrices=False)
        U, V = W[:, :R], s[:R, None] * Vt[:R]
    else:
        U, V = np.asarray(U0, float), np.asarray(V0, float)
    L, o = _structure_operator(structure, N, M, mu)
    a = mat.ravel()
    sr = np.sqrt(rho)
    emb = REmbedding(mat, structure.n, structure.d, mu)
    hist = [penalty_objective(U, V, emb, structure, rho)]
    for _ in range(iters):
        # V-step: vec(U V) = kron(U, I_M) vec(V)
        KU = np.kron(U, np.eye(M))
        V = _lsq([KU, sr * (L @ KU)], [a, sr * (L @ a + o)]).reshape(R, M)
        # U-step: vec(U V) = kron(I_N, V^T) vec(U)
        KV = np.kron(np.eye(N), V.T)
        U = _lsq([KV, sr * (L @ KV)], [a, sr * (L @ a + o)]).reshape(N, R)
        W, P = scipy.linalg.polar(U)
        U, V = W, P @ V
        hist.append(penalty_objective(U, V, emb, structure, rho))
        if hist[-2] - hist[-1] <= tol * max(1.0, hist[-2]):
            break
    _, dA = project_embedding(U @ V - mat, structure, mu)
    return RankFactorization(U, V, rho, tuple(hist), dA, structure, mat, mu)


@dataclass(frozen=True)
class SeparationReport:
    distances: np.ndarray
    threshold: float
    classes: tuple
    violations: tuple

    @property
    def passed(self) -> bool:
        return not self.violations


def separation_check(perturbations, Ahat, same_tol: float = 1e-8,
                     tol: float = 1e-6) -> SeparationReport:
    """Pairwise spectral distances between converged perturbations.

    ``perturbations`` holds embedded ``dA_hat`` matrices or
    ``MatrixPolynomial`` perturbations (embedded with the width of
    ``Ahat``).  Solutions closer than ``same_tol`` form one class;
    distinct classes closer than ``sigma_min(A_hat) - tol`` are reported as
    violations.
    """
    mat = getattr(Ahat, "matrix", Ahat)
    mu = getattr(Ahat, "mu", None)
    mats = []
    for p in perturbations:
        if isinstance(p, MatrixPolynomial):
            p = r_embed(p, mu).matrix
        mats.append(np.asarray(p, dtype=float))
    k = len(mats)
    D = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            D[i, j] = D[j, i] = np.linalg.norm(mats[i] - mats[j], 2)
    # classes are connected components of the "same solution" graph
    _, comp = scipy.sparse.csgraph.connected_components(
        scipy.sparse.csr_matrix(D <= same_tol), directed=False)
    labels = [int(c) for c in comp]
    thresh = float(scipy.linalg.svdvals(mat)[-1])
    bad = tuple((i, j, float(D[i, j])) for i in range(k)
                for j in range(i + 1, k)
                if labels[i] != labels[j] and D[i, j] < thresh - tol)
    return SeparationReport(D, thresh, tuple(labels), bad)
