"""Perturbation structures, structural enforcement and kernel normalization.

A :class:`PerturbationStructure` says which coefficients of ``dA`` the
solver may move.  Fixed coefficients of ``dA`` are pinned to ``offset``
(zero for linear structures; nonzero values give affine structures).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import MinimalEmbedding, phi
from .polycore import MatrixPolynomial, _vec_order

__all__ = [
    "PerturbationStructure",
    "NormalizationSpec",
    "structure_degree_preserving",
    "structure_entry_degree_preserving",
    "structure_support_preserving",
    "read_mask_file",
    "write_mask_file",
    "project_embedding",
    "gamma",
    "normalization_row",
    "NORMALIZATIONS",
]


def _ro(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PerturbationStructure:
    """Free/fixed flags over the coefficients ``(k, i, j)`` of ``dA``."""

    free: np.ndarray
    offset: np.ndarray = None

    def __post_init__(self):
        free = np.asarray(self.free, dtype=bool)
        if free.ndim != 3 or free.shape[1] != free.shape[2]:
            raise ValueError("mask must have shape (d+1, n, n)")
        off = (np.zeros(free.shape) if self.offset is None
               else np.asarray(self.offset, dtype=float))
        if off.shape != free.shape:
            raise ValueError("offset shape does not match mask")
        off = np.where(free, 0.0, off)
        object.__setattr__(self, "free", _ro(free, bool))
        object.__setattr__(self, "offset", _ro(off, float))

    @property
    def n(self) -> int:
        return self.free.shape[1]

    @property
    def d(self) -> int:
        return self.free.shape[0] - 1

    @property
    def free_count(self) -> int:
        return int(self.free.sum())

    @property
    def is_linear(self) -> bool:
        return not np.any(self.offset)

    def free_vec_mask(self) -> np.ndarray:
        """Boolean selector of free coefficients in vec order."""
        return self.free.ravel()[_vec_order(self.n, self.d)]

    def fix(self, k=None, i=None, j=None) -> "PerturbationStructure":
        """Copy with the selected coefficients made fixed (at zero).

        ``None`` selects everything along that axis, so ``fix(k=1)`` pins
        the whole degree-one coefficient matrix.
        """
        free = self.free.copy()
        sl = tuple(slice(None) if v is None else v for v in (k, i, j))
        free[sl] = False
        return PerturbationStructure(free, self.offset)

    def __and__(self, other: "PerturbationStructure"):
        return PerturbationStructure(self.free & other.free, self.offset)

    def contains(self, other: "PerturbationStructure") -> bool:
        """True when every coefficient free in ``other`` is free here."""
        return bool(np.all(self.free[other.free]))

    def conforms(self, dA: MatrixPolynomial, atol: float = 0.0) -> bool:
        fixed = ~self.free
        return bool(np.all(np.abs(dA.coeffs[fixed] - self.offset[fixed])
                           <= atol))

    def to_perturbation(self, v) -> MatrixPolynomial:
        """``dA`` from its free coefficients (vec order) plus the offsets."""
        order = _vec_order(self.n, self.d)
        flat = self.offset.ravel().copy()
        flat[order[self.free_vec_mask()]] = v
        return MatrixPolynomial(flat.reshape(self.free.shape))

    def from_perturbation(self, dA: MatrixPolynomial) -> np.ndarray:
        order = _vec_order(self.n, self.d)
        return dA.coeffs.ravel()[order[self.free_vec_mask()]]

    def describe(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "free": int(self.free_count),
            "fixed_nonzero": int(np.count_nonzero(self.offset)),
        }


def structure_degree_preserving(A: MatrixPolynomial) -> PerturbationStructure:
    """Every coefficient up to the matrix degree is free."""
    return PerturbationStructure(np.ones(A.coeffs.shape, dtype=bool))


def structure_entry_degree_preserving(A: MatrixPolynomial
                                      ) -> PerturbationStructure:
    """``deg dA_ij <= deg A_ij`` entrywise; zero entries stay zero."""
    c = A.coeffs
    nz = c != 0
    # highest nonzero power per entry, -1 for zero entries
    top = np.where(nz.any(axis=0),
                   c.shape[0] - 1 - np.argmax(nz[::-1], axis=0), -1)
    k = np.arange(c.shape[0])[:, None, None]
    return PerturbationStructure(k <= top[None])


def structure_support_preserving(A: MatrixPolynomial) -> PerturbationStructure:
    """Only the nonzero coefficients of ``A`` may move."""
    return PerturbationStructure(A.coeffs != 0)


def read_mask_file(path, A: MatrixPolynomial) -> PerturbationStructure:
    """Parse lines ``i j k FREE|FIXED [value]`` (1-based ``i, j``; 0-based
    ``k``).  Unlisted coefficients are free (degree-preserving default)."""
    free = np.ones(A.coeffs.shape, dtype=bool)
    off = np.zeros(A.coeffs.shape)
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) not in (4, 5):
            raise ValueError(f"{path}:{lineno}: expected 'i j k FREE|FIXED "
                             f"[value]', got {raw!r}")
        try:
            i, j, k = int(tok[0]) - 1, int(tok[1]) - 1, int(tok[2])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad index in {raw!r}") \
                from None
        if not (0 <= i < A.n and 0 <= j < A.n and 0 <= k <= A.d):
            raise ValueError(f"{path}:{lineno}: coefficient ({i + 1}, "
                             f"{j + 1}, {k}) out of range")
        flag = tok[3].upper()
        if flag == "FREE":
            if len(tok) == 5:
                raise ValueError(f"{path}:{lineno}: FREE takes no value")
            free[k, i, j] = True
            off[k, i, j] = 0.0
        elif flag == "FIXED":
            free[k, i, j] = False
            off[k, i, j] = float(tok[4]) if len(tok) == 5 else 0.0
        else:
            raise ValueError(f"{path}:{lineno}: unknown flag {tok[3]!r}")
    return PerturbationStructure(free, off)


def write_mask_file(path, structure: PerturbationStructure) -> None:
    lines = []
    for k in range(structure.d + 1):
        for i in range(structure.n):
            for j in range(structure.n):
                if structure.free[k, i, j]:
                    lines.append(f"{i + 1} {j + 1} {k} FREE")
                else:
                    lines.append(f"{i + 1} {j + 1} {k} FIXED "
                                 f"{float(structure.offset[k, i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _slot_index(n: int, d: int, mu: int) -> np.ndarray:
    """Coefficient slot of every embedding entry, ``-1`` off the band.

    Slots are flat indices into a ``(d+1, n, n)`` coefficient array.
    """
    N, M = n * (mu + d), n * mu
    idx = np.full((N, M), -1)
    for i in range(n):
        for j in range(n):
            for l in range(d + 1):
                T = phi(np.eye(d + 1)[l], mu).astype(bool)
                blk = idx[i * (mu + d):(i + 1) * (mu + d),
                          j * mu:(j + 1) * mu]
                blk[T] = (l * n + i) * n + j
    return idx


def project_embedding(X: np.ndarray, structure: PerturbationStructure,
                      mu: int) -> tuple[np.ndarray, MatrixPolynomial]:
    """Nearest embedding of a structure-conforming polynomial to ``X``.

    Free slots take the mean of their Toeplitz copies, fixed slots take the
    offset and off-band entries become zero.  Returns the projected matrix
    and the polynomial it embeds.
    """
    n, d = structure.n, structure.d
    idx = _slot_index(n, d, mu)
    band = idx >= 0
    sums = np.bincount(idx[band], weights=X[band], minlength=(d + 1) * n * n)
    coeffs = (sums / mu).reshape(d + 1, n, n)
    coeffs = np.where(structure.free, coeffs, structure.offset)
    P = np.zeros_like(X, dtype=float)
    P[band] = coeffs.ravel()[idx[band]]
    return P, MatrixPolynomial(coeffs)


def gamma(UV: np.ndarray, structure: PerturbationStructure,
          Ahat) -> float:
    """Squared distance of ``UV - Ahat`` from the conforming embeddings.

    ``UV = Ahat + dAhat``, so this vanishes exactly when ``dAhat`` embeds a
    perturbation that conforms to ``structure``.
    """
    mat = getattr(Ahat, "matrix", Ahat)
    mu = getattr(Ahat, "mu", None)
    if mu is None:
        mu = structure.n * structure.d + 1
    if np.shape(UV) != mat.shape:
        raise ValueError("UV and Ahat differ in shape")
    dA = UV - mat
    P, _ = project_embedding(dA, structure, mu)
    return float(np.sum((dA - P) ** 2))


NORMALIZATIONS = ("pivot", "column", "monic")


@dataclass(frozen=True)
class NormalizationSpec:
    """How each kernel column is scaled.

    ``pivots[c]`` is the ``(entry, power)`` coordinate of column ``c``'s
    pivot.  ``pivot`` pins that coefficient to one, ``monic`` pins the
    leading coefficient of the pivot entry to one and ``column`` asks for
    unit coefficient norm.
    """

    kind: str = "pivot"
    pivots: tuple = field(default_factory=tuple)
    notes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.kind!r}; expected "
                             f"one of {NORMALIZATIONS}")
        object.__setattr__(self, "pivots",
                           tuple((int(e), int(p)) for e, p in self.pivots))


def _pivot_position(spec: NormalizationSpec, column: int,
                    layout: MinimalEmbedding) -> int:
    if column >= len(spec.pivots):
        raise ValueError(f"no pivot recorded for kernel column {column}")
    entry, power = spec.pivots[column]
    if spec.kind == "monic":
        if not 0 <= entry < layout.n:
            raise ValueError(f"pivot entry {entry} out of range")
        power = layout.kernel_degrees[entry]
    hits = np.flatnonzero(layout.col_map == entry * layout.mu + power)
    if hits.size != 1:
        raise ValueError(f"pivot ({entry}, {power}) of column {column} is "
                         f"not a free kernel coefficient")
    return int(hits[0])


def normalization_row(spec: NormalizationSpec, column: int,
                      layout: MinimalEmbedding, bhat=None) -> np.ndarray:
    """The vector ``N`` with residual ``N @ bhat - 1`` for one column.

    For ``column`` normalization this is ``bhat`` itself, so the residual
    reads ``|bhat|^2 - 1``.
    """
    size = layout.col_map.size
    if spec.kind == "column":
        if bhat is None:
            raise ValueError("column normalization needs the current vector")
        bhat = np.asarray(bhat, dtype=float)
        if bhat.size != size:
            raise ValueError("kernel vector does not match layout")
        return bhat.copy()
    row = np.zeros(size)
    row[_pivot_position(spec, column, layout)] = 1.0
    return row


def pivot_position(spec: NormalizationSpec, column: int,
                   layout: MinimalEmbedding) -> int:
    """Reduced kernel index of column ``column``'s normalized coefficient."""
    return _pivot_position(spec, column, layout)
