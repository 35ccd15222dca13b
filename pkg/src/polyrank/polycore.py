"""Matrix polynomials with real coefficients and polynomial vectors.

A matrix polynomial ``A = A_0 + A_1 t + ... + A_d t^d`` is stored densely as
an array of shape ``(d + 1, n, n)`` indexed ``[k, i, j]``.  A polynomial
vector stores one coefficient array per entry; an entry with degree bound
``-1`` is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "MatrixPolynomial",
    "PolyVector",
    "frobenius_norm",
    "apply",
    "vectorize",
    "unvectorize",
]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MatrixPolynomial:
    """Square ``n x n`` matrix polynomial of degree at most ``d``.

    The degree bound is whatever ``coeffs.shape[0] - 1`` says; it is never
    shrunk by trimming trailing zero coefficients.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 3 or c.shape[1] != c.shape[2] or c.shape[0] < 1:
            raise ValueError(
                f"coefficients must have shape (d+1, n, n), got {c.shape}")
        object.__setattr__(self, "coeffs", _frozen(c))

    @classmethod
    def from_coefficients(cls, matrices: Sequence) -> "MatrixPolynomial":
        """Build from a list ``[A_0, ..., A_d]``; rectangular input is
        zero-padded to square."""
        mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in matrices]
        if not mats:
            raise ValueError("need at least one coefficient matrix")
        shape = mats[0].shape
        if any(m.shape != shape for m in mats):
            raise ValueError("coefficient matrices differ in shape")
        n = max(shape)
        c = np.zeros((len(mats), n, n))
        for k, m in enumerate(mats):
            c[k, :shape[0], :shape[1]] = m
        return cls(c)

    @classmethod
    def zeros(cls, n: int, d: int) -> "MatrixPolynomial":
        return cls(np.zeros((d + 1, n, n)))

    @classmethod
    def identity(cls, n: int, d: int = 0) -> "MatrixPolynomial":
        c = np.zeros((d + 1, n, n))
        c[0] = np.eye(n)
        return cls(c)

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @property
    def d(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def degree(self) -> int:
        """Actual degree (-1 for the zero polynomial)."""
        nz = np.flatnonzero(np.any(self.coeffs != 0, axis=(1, 2)))
        return int(nz[-1]) if nz.size else -1

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.coeffs[:, i, j]

    def __call__(self, t):
        """Evaluate at a scalar point."""
        return sum(self.coeffs[k] * t**k for k in range(self.d + 1))

    def __add__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        if self.coeffs.shape != other.coeffs.shape:
            raise ValueError("shape mismatch")
        return MatrixPolynomial(self.coeffs + other.coeffs)

    def __sub__(self, other: "MatrixPolynomial") -> "MatrixPolynomial":
        return self + (-other)

    def __neg__(self) -> "MatrixPolynomial":
        return MatrixPolynomial(-self.coeffs)

    def __mul__(self, c: float) -> "MatrixPolynomial":
        return MatrixPolynomial(float(c) * self.coeffs)

    __rmul__ = __mul__

    def allclose(self, other: "MatrixPolynomial", **kw) -> bool:
        return (self.coeffs.shape == other.coeffs.shape
                and np.allclose(self.coeffs, other.coeffs, **kw))

    def __repr__(self):
        return f"MatrixPolynomial(n={self.n}, d={self.d})"


@dataclass(frozen=True, eq=False)
class PolyVector:
    """Column vector of ``n`` polynomials, each with its own degree bound."""

    entries: tuple

    def __post_init__(self):
        ents = tuple(_frozen(np.atleast_1d(np.asarray(e, dtype=float))
                             if np.size(e) else np.zeros(0))
                     for e in self.entries)
        object.__setattr__(self, "entries", ents)

    @classmethod
    def zeros(cls, deg_bounds: Sequence[int]) -> "PolyVector":
        return cls(tuple(np.zeros(max(int(k), -1) + 1) for k in deg_bounds))

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def deg_bounds(self) -> tuple:
        return tuple(len(e) - 1 for e in self.entries)

    @property
    def degree(self) -> int:
        """Actual degree, ignoring zero leading coefficients (-1 if zero)."""
        degs = [int(np.flatnonzero(e)[-1]) for e in self.entries
                if np.any(e != 0)]
        return max(degs) if degs else -1

    def coefficient_vector(self) -> np.ndarray:
        """All stored coefficients, entry by entry."""
        if not self.entries:
            return np.zeros(0)
        return np.concatenate(self.entries)

    def norm(self) -> float:
        return float(np.linalg.norm(self.coefficient_vector()))

    def __mul__(self, c: float) -> "PolyVector":
        return PolyVector(tuple(float(c) * e for e in self.entries))

    __rmul__ = __mul__

    def __repr__(self):
        return f"PolyVector(deg_bounds={self.deg_bounds})"


def frobenius_norm(A) -> float:
    """Coefficient Frobenius norm of a matrix polynomial or polynomial vector.

    >>> frobenius_norm(MatrixPolynomial.identity(4))
    2.0
    """
    if isinstance(A, PolyVector):
        return A.norm()
    return float(np.sqrt(np.sum(A.coeffs**2)))


def apply(A: MatrixPolynomial, b: PolyVector) -> PolyVector:
    """Exact product ``A(t) b(t)``.

    Every result entry has degree bound ``d + max(deg_bounds(b))``.
    """
    if b.n != A.n:
        raise ValueError(f"dimension mismatch: A is {A.n}x{A.n}, b has "
                         f"{b.n} entries")
    top = max(b.deg_bounds, default=-1)
    if top < 0:
        return PolyVector.zeros([-1] * A.n)
    out = np.zeros((A.n, A.d + top + 1))
    for i in range(A.n):
        for j, bj in enumerate(b.entries):
            if bj.size:
                c = np.convolve(A.coeffs[:, i, j], bj)
                out[i, :c.size] += c
    return PolyVector(tuple(out))


def _vec_order(n: int, d: int) -> np.ndarray:
    """Flat indices into a ``(d+1, n, n)`` array, listed in vec order.

    vec order runs over columns j, then rows i, then coefficient k fastest.
    """
    idx = np.arange((d + 1) * n * n).reshape(d + 1, n, n)
    return idx.transpose(2, 1, 0).ravel()


def vectorize(A: MatrixPolynomial, mask: np.ndarray | None = None
              ) -> np.ndarray:
    """Stack coefficients as (A_110, ..., A_11d, A_210, ..., A_nnd).

    With a boolean ``mask`` of shape ``(d+1, n, n)`` only the masked
    coefficients are returned, still in vec order.
    """
    order = _vec_order(A.n, A.d)
    flat = A.coeffs.ravel()[order]
    if mask is None:
        return flat.copy()
    return flat[np.asarray(mask, dtype=bool).ravel()[order]]


def unvectorize(v, n: int, d: int, mask: np.ndarray | None = None,
                fill: MatrixPolynomial | None = None) -> MatrixPolynomial:
    """Inverse of :func:`vectorize`.

    Coefficients outside ``mask`` are taken from ``fill`` (zero if absent).
    """
    order = _vec_order(n, d)
    flat = (np.zeros((d + 1) * n * n) if fill is None
            else fill.coeffs.ravel().copy())
    v = np.asarray(v, dtype=float)
    if mask is None:
        if v.size != order.size:
            raise ValueError("vector length does not match n^2 (d+1)")
        flat[order] = v
    else:
        sel = order[np.asarray(mask, dtype=bool).ravel()[order]]
        if v.size != sel.size:
            raise ValueError("vector length does not match mask")
        flat[sel] = v
    return MatrixPolynomial(flat.reshape(d + 1, n, n))
