"""Real block-Toeplitz embeddings of matrix polynomials.

With ``mu = n d + 1`` a matrix polynomial ``A`` maps to the
``n (mu + d) x n mu`` matrix whose ``(i, j)`` block is the convolution
matrix of ``A_ij``.  Polynomial products ``A b`` with ``deg b < mu`` then
become matrix-vector products on stacked coefficient vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .polycore import MatrixPolynomial, PolyVector

__all__ = [
    "REmbedding",
    "MinimalEmbedding",
    "phi",
    "default_mu",
    "r_embed",
    "r_embed_vector",
    "unembed_vector",
    "minimal_embed",
    "psi",
    "distance_lower_bound",
]


def default_mu(n: int, d: int) -> int:
    """Kernel width ``n d + 1``; every singular ``A`` has a kernel vector
    of degree below it."""
    return n * d + 1


def phi(a, mu: int) -> np.ndarray:
    """Convolution matrix of the scalar polynomial ``a``.

    Returns the ``(mu + deg a) x mu`` Toeplitz matrix with column ``k``
    holding the coefficients of ``a`` shifted down by ``k`` rows, so that
    ``phi(a, mu) @ b`` is the coefficient vector of ``a * b``.

    >>> phi([1.0, 2.0], 2)
    array([[1., 0.],
           [2., 1.],
           [0., 2.]])
    """
    if mu < 1:
        raise ValueError("mu must be at least 1")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    T = np.zeros((mu + a.size - 1, mu))
    for k in range(mu):
        T[k:k + a.size, k] = a
    return T


@dataclass(frozen=True, eq=False)
class REmbedding:
    """The block-Toeplitz matrix of a matrix polynomial plus its shape."""

    matrix: np.ndarray
    n: int
    d: int
    mu: int

    @property
    def N(self) -> int:
        return self.n * (self.mu + self.d)

    @property
    def M(self) -> int:
        return self.n * self.mu


def r_embed(A: MatrixPolynomial, mu: int | None = None) -> REmbedding:
    n, d = A.n, A.d
    mu = default_mu(n, d) if mu is None else mu
    Ahat = np.block([[phi(A.coeffs[:, i, j], mu) for j in range(n)]
                     for i in range(n)])
    Ahat.setflags(write=False)
    return REmbedding(Ahat, n, d, mu)


def r_embed_vector(b: PolyVector, mu: int) -> np.ndarray:
    """Stack ``b_1,0 .. b_1,mu-1, ..., b_n,mu-1`` (zero padded)."""
    out = np.zeros((b.n, mu))
    for i, e in enumerate(b.entries):
        nz = np.flatnonzero(e)
        if nz.size and nz[-1] >= mu:
            raise ValueError(f"entry {i} has degree {nz[-1]} >= mu = {mu}")
        m = min(e.size, mu)
        out[i, :m] = e[:m]
    return out.ravel()


def unembed_vector(bhat, n: int, mu: int | None = None) -> PolyVector:
    bhat = np.asarray(bhat, dtype=float)
    mu = bhat.size // n if mu is None else mu
    if bhat.size != n * mu:
        raise ValueError("embedded vector length is not n * mu")
    return PolyVector(tuple(bhat.reshape(n, mu)))


def coefficient_pattern(A: MatrixPolynomial, structure=None) -> np.ndarray:
    """Structural support of ``A + dA`` as a ``(d+1, n, n)`` boolean array.

    A coefficient is structurally present if the structure leaves it free,
    or if its fixed value ``A + offset`` is nonzero.  Without a structure
    every coefficient counts as free.
    """
    if structure is None:
        return np.ones(A.coeffs.shape, dtype=bool)
    return structure.free | ((A.coeffs + structure.offset) != 0)


@dataclass(frozen=True, eq=False)
class MinimalEmbedding:
    """Embedding of ``A`` restricted to one kernel column's free coefficients.

    ``col_map`` lists, for each free kernel coefficient ``(j, k)``, its
    column ``j * mu + k`` in the full embedding; ``row_map`` lists the
    retained equation rows ``i * (mu + d) + m``.  Rows that vanish for
    every admissible ``A + dA`` and kernel vector are dropped.
    """

    matrix: np.ndarray
    row_map: np.ndarray
    col_map: np.ndarray
    n: int
    d: int
    mu: int
    forced: tuple = ()

    @property
    def shape(self):
        return (self.row_map.size, self.col_map.size)

    @cached_property
    def kernel_coords(self) -> np.ndarray:
        """``(entry, power)`` pair for every reduced column."""
        return np.column_stack(np.divmod(self.col_map, self.mu))

    @cached_property
    def kernel_degrees(self) -> tuple:
        """Highest free power per kernel entry (``-1`` if the entry is
        pinned to zero)."""
        degs = [-1] * self.n
        for j, k in self.kernel_coords:
            degs[j] = max(degs[j], int(k))
        return tuple(degs)

    @cached_property
    def row_coords(self) -> np.ndarray:
        """``(entry, power)`` pair for every retained equation."""
        return np.column_stack(np.divmod(self.row_map, self.mu + self.d))

    @cached_property
    def psi_index(self) -> np.ndarray:
        """Kernel coordinate multiplying each vec(A) coefficient, per row.

        Entry ``[r, p]`` is the reduced kernel index ``q`` with
        ``psi(b)[r, p] = b[q]``, or ``-1`` when the product is absent.
        """
        n, d = self.n, self.d
        where = np.full((self.n, self.mu), -1)
        where[self.kernel_coords[:, 0], self.kernel_coords[:, 1]] = \
            np.arange(self.col_map.size)
        idx = np.full((self.row_map.size, (d + 1) * n * n), -1)
        for r, (i, m) in enumerate(self.row_coords):
            for j in range(n):
                for l in range(d + 1):
                    k = m - l
                    if 0 <= k < self.mu and where[j, k] >= 0:
                        # vec index of coefficient (i, j, l)
                        idx[r, (j * n + i) * (d + 1) + l] = where[j, k]
        idx.setflags(write=False)
        return idx

    def position(self, entry: int, power: int) -> int:
        """Reduced index of kernel coefficient ``(entry, power)``."""
        hits = np.flatnonzero(self.col_map == entry * self.mu + power)
        if hits.size != 1:
            raise KeyError(f"({entry}, {power}) is not a free kernel "
                           f"coefficient")
        return int(hits[0])

    def to_polyvector(self, bred) -> PolyVector:
        """Expand a reduced kernel vector into a :class:`PolyVector`."""
        bred = np.asarray(bred, dtype=float)
        ents = [np.zeros(k + 1) for k in self.kernel_degrees]
        for val, (j, k) in zip(bred, self.kernel_coords):
            ents[j][k] = val
        return PolyVector(tuple(ents))

    def from_polyvector(self, b: PolyVector, strict: bool = True
                        ) -> np.ndarray:
        """Reduced coordinates of ``b``.

        With ``strict`` any nonzero coefficient outside the layout is an
        error; otherwise such coefficients are dropped.
        """
        ents = list(b.entries) + [np.zeros(0)] * (self.n - b.n)
        full = np.zeros((self.n, self.mu))
        for i, e in enumerate(ents[:self.n]):
            m = min(e.size, self.mu)
            full[i, :m] = e[:m]
            if strict and np.any(e[m:] != 0):
                raise ValueError(f"entry {i} exceeds degree {self.mu - 1}")
        full = full.ravel()
        if strict and np.any(np.delete(full, self.col_map) != 0):
            raise ValueError("vector has coefficients outside the layout")
        return full[self.col_map]

    def embed_full(self, bred) -> np.ndarray:
        out = np.zeros(self.n * self.mu)
        out[self.col_map] = bred
        return out

    def reduce(self, Ahat: np.ndarray) -> np.ndarray:
        """Restrict a full embedding matrix to this layout."""
        return Ahat[np.ix_(self.row_map, self.col_map)]


def minimal_embed(A: MatrixPolynomial, deg_bounds: Sequence[int],
                  structure=None, pinned: Sequence = (),
                  mu: int | None = None) -> MinimalEmbedding:
    """Reduced embedding for a kernel column with per-entry degree bounds.

    A bound of ``-1`` pins that kernel entry to zero and ``pinned`` lists
    further ``(entry, power)`` coefficients held at zero.  Equations are
    classified by the sparsity pattern of ``A + dA`` alone, never by the
    numerical values, so the layout is the same at every iterate:

    * an equation with a single term whose matrix coefficient is fixed and
      nonzero forces that kernel coefficient to zero; the coefficient is
      dropped (recorded in ``forced``) and the classification repeats;
    * equations with no remaining terms are dropped.
    """
    n, d = A.n, A.d
    mu = default_mu(n, d) if mu is None else mu
    deg_bounds = tuple(int(k) for k in deg_bounds)
    if len(deg_bounds) != n:
        raise ValueError(f"expected {n} degree bounds, got {len(deg_bounds)}")
    if any(k >= mu or k < -1 for k in deg_bounds):
        raise ValueError(f"degree bounds must lie in [-1, {mu - 1}]")
    active = np.zeros((n, mu), dtype=bool)
    for j, k in enumerate(deg_bounds):
        active[j, :k + 1] = True
    for j, k in pinned:
        active[j, k] = False
    pat = coefficient_pattern(A, structure)
    fixed = (np.zeros_like(pat) if structure is None
             else pat & ~structure.free)

    def terms(i, m):
        return [(j, m - l) for j in range(n) for l in range(d + 1)
                if pat[l, i, j] and 0 <= m - l < mu and active[j, m - l]]

    forced = []
    changed = True
    while changed:
        changed = False
        for i in range(n):
            for m in range(mu + d):
                t = terms(i, m)
                if len(t) == 1:
                    j, k = t[0]
                    if fixed[m - k, i, j]:
                        active[j, k] = False
                        forced.append((j, k))
                        changed = True
    cols = np.flatnonzero(active.ravel())
    if cols.size == 0:
        raise ValueError("kernel layout has no free coefficients")
    rows = np.array([i * (mu + d) + m for i in range(n)
                     for m in range(mu + d) if terms(i, m)], dtype=int)
    full = r_embed(A, mu).matrix
    mat = full[np.ix_(rows, cols)]
    mat.setflags(write=False)
    return MinimalEmbedding(mat, rows, cols, n, d, mu, tuple(forced))


def psi(bhat, layout: MinimalEmbedding) -> np.ndarray:
    """Matrix with ``psi(b) @ vectorize(A) == reduced(A_hat) @ b``.

    ``bhat`` is in the layout's reduced coordinates; columns follow the full
    vec order of ``A`` (``n^2 (d+1)`` of them).
    """
    bhat = np.asarray(bhat, dtype=float)
    if bhat.size != layout.col_map.size:
        raise ValueError("kernel vector does not match layout")
    idx = layout.psi_index
    return np.where(idx >= 0, bhat[np.maximum(idx, 0)], 0.0)


def distance_lower_bound(A: MatrixPolynomial) -> float:
    """``sigma_min(A_hat) / sqrt(mu)``.

    No perturbation with smaller Frobenius norm can make ``A`` singular.
    """
    E = r_embed(A)
    s = np.linalg.svd(E.matrix, compute_uv=False)
    return float(s[-1] / np.sqrt(E.mu))
