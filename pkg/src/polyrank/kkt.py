"""Constraint residuals, Jacobian and Lagrangian Hessian.

The unknowns are ``x = (free coefficients of dA in vec order, b_1, ...,
b_r)`` with each kernel column in the reduced coordinates of its
:class:`~polyrank.embedding.MinimalEmbedding`.  The constraints are::

    reduced(A_hat + dA_hat) b_j = 0        for every column j
    N(b_j) . b_j - 1 = 0                   one row per column

and the Lagrangian is ``L = |dA|_F^2 + lambda . M(x)``.

Assembly only indexes, adds and multiplies, so ``x`` and ``lambda`` may be
float arrays or object arrays of extended-precision numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg

from .embedding import MinimalEmbedding, minimal_embed, r_embed
from .polycore import MatrixPolynomial, PolyVector, _vec_order
from .structure import (NormalizationSpec, PerturbationStructure,
                        _slot_index, normalization_row)

__all__ = [
    "KKTProblem",
    "ResidualSystem",
    "KKTMatrices",
    "SecondOrderReport",
    "residual",
    "jacobian",
    "hessian_lagrangian",
    "grad_lagrangian",
    "lagrangian",
    "kkt_matrices",
    "check_second_order",
]


@dataclass(frozen=True, eq=False)
class KKTProblem:
    """Everything that fixes the shape of the constrained problem."""

    A: MatrixPolynomial
    structure: PerturbationStructure
    layouts: tuple
    normalization: NormalizationSpec

    def __post_init__(self):
        object.__setattr__(self, "layouts", tuple(self.layouts))
        if self.structure.free.shape != self.A.coeffs.shape:
            raise ValueError("structure does not match the matrix shape")
        if not self.layouts:
            raise ValueError("need at least one kernel column")
        if (self.normalization.kind != "column"
                and len(self.normalization.pivots) != len(self.layouts)):
            raise ValueError("need one pivot per kernel column")

    @classmethod
    def build(cls, A: MatrixPolynomial, structure: PerturbationStructure,
              kernel_degrees: Sequence[Sequence[int]],
              normalization: NormalizationSpec,
              pinned: Sequence | None = None) -> "KKTProblem":
        pinned = [()] * len(kernel_degrees) if pinned is None else pinned
        layouts = [minimal_embed(A, degs, structure, pins)
                   for degs, pins in zip(kernel_degrees, pinned)]
        return cls(A, structure, layouts, normalization)

    @property
    def r(self) -> int:
        return len(self.layouts)

    @property
    def n_dA(self) -> int:
        return self.structure.free_count

    @cached_property
    def x_slices(self) -> tuple:
        """Slice of ``x`` for dA, then one per kernel column."""
        out, pos = [slice(0, self.n_dA)], self.n_dA
        for lay in self.layouts:
            out.append(slice(pos, pos + lay.col_map.size))
            pos += lay.col_map.size
        return tuple(out)

    @cached_property
    def residual_slices(self) -> tuple:
        """One slice per kernel block, then one for the normalization rows."""
        out, pos = [], 0
        for lay in self.layouts:
            out.append(slice(pos, pos + lay.row_map.size))
            pos += lay.row_map.size
        out.append(slice(pos, pos + self.r))
        return tuple(out)

    @property
    def n_x(self) -> int:
        return self.x_slices[-1].stop

    @property
    def n_residual(self) -> int:
        return self.residual_slices[-1].stop

    @cached_property
    def _free_vec(self) -> np.ndarray:
        return self.structure.free_vec_mask()

    @cached_property
    def _free_slots(self) -> np.ndarray:
        """Flat coefficient slot of each free dA coordinate."""
        return _vec_order(self.A.n, self.A.d)[self._free_vec]

    @cached_property
    def _slots(self) -> tuple:
        """Per layout, the coefficient slot behind each reduced entry."""
        full = _slot_index(self.A.n, self.A.d, self.layouts[0].mu)
        return tuple(full[np.ix_(lay.row_map, lay.col_map)]
                     for lay in self.layouts)

    @cached_property
    def _psi_free(self) -> tuple:
        return tuple(lay.psi_index[:, self._free_vec]
                     for lay in self.layouts)

    def coefficients(self, x) -> np.ndarray:
        """Flat coefficients of ``A + dA`` in the dtype of ``x``."""
        x = np.asarray(x)
        c = (self.A.coeffs + self.structure.offset).ravel().astype(x.dtype)
        c[self._free_slots] = c[self._free_slots] + x[self.x_slices[0]]
        return c

    def blocks(self, x) -> list:
        """Reduced ``A_hat + dA_hat`` for every kernel column."""
        c = self.coefficients(x)
        zero = c.dtype.type(0) if c.dtype != object else 0
        return [np.where(S >= 0, c[np.maximum(S, 0)], zero)
                for S in self._slots]

    def perturbation(self, x) -> MatrixPolynomial:
        return self.structure.to_perturbation(np.asarray(x)[self.x_slices[0]])

    def kernel_vectors(self, x) -> list:
        return [np.asarray(x)[s] for s in self.x_slices[1:]]

    def kernel_polys(self, x) -> list[PolyVector]:
        return [lay.to_polyvector(b)
                for lay, b in zip(self.layouts, self.kernel_vectors(x))]

    def pack(self, dA: MatrixPolynomial | None, kernels) -> np.ndarray:
        """Assemble ``x`` from a perturbation and reduced kernel vectors."""
        v = (np.zeros(self.n_dA) if dA is None
             else self.structure.from_perturbation(dA))
        return np.concatenate([v] + [np.asarray(b, dtype=float)
                                     for b in kernels])

    def perturbed_embedding(self, x) -> np.ndarray:
        return r_embed(self.A + self.perturbation(x)).matrix


@dataclass(frozen=True, eq=False)
class ResidualSystem:
    """Stacked constraint residuals with their block layout."""

    values: np.ndarray
    blocks: tuple

    @property
    def kernel(self) -> np.ndarray:
        return self.values[:self.blocks[-1].start]

    @property
    def normalization(self) -> np.ndarray:
        return self.values[self.blocks[-1]]

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def _norm_rows(x, problem: KKTProblem) -> list:
    return [normalization_row(problem.normalization, c, lay, b)
            for c, (lay, b) in enumerate(zip(problem.layouts,
                                             problem.kernel_vectors(x)))]


def residual(x, problem: KKTProblem) -> ResidualSystem:
    x = _as_array(x)
    if x.size != problem.n_x:
        raise ValueError(f"x has length {x.size}, layout expects "
                         f"{problem.n_x}")
    parts = [blk @ b for blk, b in zip(problem.blocks(x),
                                       problem.kernel_vectors(x))]
    parts.append(np.array([nrow @ b - 1.0 for nrow, b in
                           zip(_norm_rows(x, problem),
                               problem.kernel_vectors(x))]))
    return ResidualSystem(np.concatenate(parts), problem.residual_slices)


def jacobian(x, problem: KKTProblem) -> np.ndarray:
    """Closed-form Jacobian of :func:`residual` with respect to ``x``.

    Kernel block ``j`` holds ``psi(b_j)`` under the dA columns and the
    reduced ``A_hat + dA_hat`` under column ``j``; normalization rows only
    touch their own column.
    """
    x = _as_array(x)
    J = np.zeros((problem.n_residual, problem.n_x), dtype=x.dtype)
    xs, rs = problem.x_slices, problem.residual_slices
    bs = problem.kernel_vectors(x)
    for c, (blk, idx, b) in enumerate(zip(problem.blocks(x),
                                          problem._psi_free, bs)):
        J[rs[c], xs[0]] = np.where(idx >= 0, b[np.maximum(idx, 0)], 0)
        J[rs[c], xs[c + 1]] = blk
    nrows = _norm_rows(x, problem)
    scale = 2.0 if problem.normalization.kind == "column" else 1.0
    for c, nrow in enumerate(nrows):
        J[rs[-1].start + c, xs[c + 1]] = scale * nrow
    return J


def _as_array(v) -> np.ndarray:
    v = np.asarray(v)
    return v if v.dtype == object else v.astype(float)


def _coupling(lam_block, layout: MinimalEmbedding, free_vec) -> np.ndarray:
    """``d^2 (lam . kernel residual) / d dA d b`` for one column."""
    idx = layout.psi_index[:, free_vec]
    lam_block = np.asarray(lam_block)
    C = np.zeros((idx.shape[1], layout.col_map.size), dtype=lam_block.dtype)
    r, p = np.nonzero(idx >= 0)
    np.add.at(C, (p, idx[r, p]), lam_block[r])
    return C


def hessian_lagrangian(x, lam, problem: KKTProblem) -> np.ndarray:
    """Hessian of the Lagrangian in ``x``: ``2 I`` on dA, bilinear
    coupling between dA and each kernel column."""
    lam = _as_array(lam)
    if lam.size != problem.n_residual:
        raise ValueError("multiplier length does not match residual length")
    xs, rs = problem.x_slices, problem.residual_slices
    H = np.zeros((problem.n_x, problem.n_x), dtype=lam.dtype)
    H[xs[0], xs[0]] = 2.0 * np.eye(problem.n_dA)
    for c, lay in enumerate(problem.layouts):
        C = _coupling(lam[rs[c]], lay, problem._free_vec)
        H[xs[0], xs[c + 1]] = C
        H[xs[c + 1], xs[0]] = C.T
        if problem.normalization.kind == "column":
            lam_n = lam[rs[-1].start + c]
            H[xs[c + 1], xs[c + 1]] = 2.0 * lam_n * np.eye(C.shape[1])
    return H


def lagrangian(x, lam, problem: KKTProblem) -> float:
    x = _as_array(x)
    v = x[problem.x_slices[0]]
    off = problem.structure.offset
    return (np.dot(v, v) + float(np.sum(off**2))
            + np.dot(lam, residual(x, problem).values))


def grad_lagrangian(x, lam, problem: KKTProblem,
                    J: np.ndarray | None = None) -> np.ndarray:
    """Stacked ``(grad_x L, M(x))``."""
    x = _as_array(x)
    lam = _as_array(lam)
    J = jacobian(x, problem) if J is None else J
    gx = J.T @ lam
    gx[problem.x_slices[0]] += 2.0 * x[problem.x_slices[0]]
    return np.concatenate([gx, residual(x, problem).values])


@dataclass(frozen=True, eq=False)
class KKTMatrices:
    J: np.ndarray
    H: np.ndarray
    K: np.ndarray
    gradL: np.ndarray


def kkt_matrices(x, lam, problem: KKTProblem) -> KKTMatrices:
    J = jacobian(x, problem)
    H = hessian_lagrangian(x, lam, problem)
    m = J.shape[0]
    K = np.block([[H, J.T], [J, np.zeros((m, m), dtype=J.dtype)]])
    return KKTMatrices(J, H, K, grad_lagrangian(x, lam, problem, J))


@dataclass(frozen=True)
class SecondOrderReport:
    """Reduced-Hessian test at a candidate KKT point.

    ``status`` is ``"sufficient"`` when the Hessian restricted to the
    Jacobian nullspace is positive definite, ``"necessary"`` when it is only
    semidefinite and ``"indefinite"`` otherwise.
    """

    min_eigenvalue: float
    status: str
    jacobian_rank: int
    jacobian_rows: int
    jacobian_sigma_min: float
    nullity: int

    @property
    def full_row_rank(self) -> bool:
        return self.jacobian_rank == self.jacobian_rows

    def as_dict(self) -> dict:
        return {
            "min_eigenvalue": self.min_eigenvalue,
            "status": self.status,
            "jacobian_rank": self.jacobian_rank,
            "jacobian_rows": self.jacobian_rows,
            "jacobian_sigma_min": self.jacobian_sigma_min,
            "full_row_rank": self.full_row_rank,
            "nullity": self.nullity,
        }


def check_second_order(x, lam, problem: KKTProblem,
                       tol: float = 1e-10) -> SecondOrderReport:
    J = jacobian(x, problem)
    H = hessian_lagrangian(x, lam, problem)
    s = scipy.linalg.svdvals(J)
    rtol = max(J.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > rtol))
    Z = scipy.linalg.null_space(J, rcond=rtol / s[0] if s.size and s[0]
                                else None)
    if Z.shape[1] == 0:
        min_eig = np.inf
    else:
        R = Z.T @ H @ Z
        min_eig = float(np.linalg.eigvalsh(0.5 * (R + R.T))[0])
    scale = max(1.0, float(np.abs(H).max()))
    if min_eig > tol * scale:
        status = "sufficient"
    elif min_eig >= -tol * scale:
        status = "necessary"
    else:
        status = "indefinite"
    sig = float(s[min(J.shape) - 1]) if J.shape[0] <= J.shape[1] else 0.0
    return SecondOrderReport(min_eig, status, rank, J.shape[0], sig,
                             Z.shape[1])
