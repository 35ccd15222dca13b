"""Kernel initialization and Newton-type iterations on the KKT system.

The pipeline is

1. pick kernel degree bounds and an initial kernel basis from the SVD of
   the embedding (:func:`select_kernel_degrees`, :func:`init_kernel_svd`),
   strip approximate common content (:func:`make_primitive`) and bring the
   basis to column echelon form (:func:`cref_reduce`);
2. optionally run a variable-projection Levenberg-Marquardt phase on the
   kernel alone (``damped=True``);
3. iterate regularized Newton steps on the full KKT system until the step
   is negligible, then certify feasibility and first-order optimality.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .embedding import (default_mu, distance_lower_bound, minimal_embed,
                        phi, psi, r_embed, unembed_vector)
from .kkt import (KKTProblem, SecondOrderReport, _coupling,
                  check_second_order, grad_lagrangian, jacobian,
                  kkt_matrices)
from .polycore import MatrixPolynomial, PolyVector, frobenius_norm
from .structure import (NormalizationSpec, PerturbationStructure,
                        pivot_position, structure_degree_preserving)

__all__ = [
    "SolverError",
    "RigidStructureError",
    "SingularKKTError",
    "Tolerances",
    "KernelSpec",
    "SolverState",
    "SolveReport",
    "select_kernel_degrees",
    "init_kernel_svd",
    "make_primitive",
    "approximate_gcd",
    "cref_reduce",
    "choose_pivots",
    "init_lambda",
    "least_squares_perturbation",
    "newton_step",
    "regularized_step",
    "damped_step",
    "projected_lm",
    "quadratic_proxy",
    "solve",
]

log = logging.getLogger("polyrank")


class SolverError(RuntimeError):
    pass


class RigidStructureError(SolverError, ValueError):
    """The structure leaves no coefficient free to move."""


class SingularKKTError(SolverError):
    """The KKT matrix is singular to working precision."""


@dataclass(frozen=True)
class Tolerances:
    tol_step: float = 1e-12
    tol_feas: float = 1e-10
    tol_kkt: float = 1e-9
    max_iter: int = 100
    patience: int = 5
    rcond: float = 1e-12
    lambda_warn: float = 1e-2
    # variable-projection phase
    lm_max_iter: int = 500
    handoff: float = 1e-6
    # KKT damping
    tau0: float = 1e-3
    tau_min: float = 1e-12
    tau_max: float = 1e12


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Initial kernel basis with its layout decisions.

    ``pinned[c]`` lists ``(entry, power)`` coefficients of column ``c``
    held at zero (other columns' pivots, or a preserved zero pattern).
    """

    vectors: tuple
    deg_bounds: tuple
    pivots: tuple
    pinned: tuple
    notes: tuple = ()

    @property
    def r(self) -> int:
        return len(self.vectors)


@dataclass
class SolverState:
    x: np.ndarray
    lam: np.ndarray
    mu_k: float = 0.0
    iter: int = 0
    step_norm: float = np.inf
    tau: float = 0.0
    nu: float = 2.0
    history: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class SolveReport:
    deltaA: MatrixPolynomial
    kernel: tuple
    distance: float
    lowerBound: float
    converged: bool
    iterations: int
    firstOrderResidual: float
    feasibility: float
    secondOrder: SecondOrderReport | None
    failure: str | None
    history: tuple
    kernel_degrees: tuple
    normalization: NormalizationSpec
    structure: PerturbationStructure
    lam: np.ndarray
    x: np.ndarray
    problem: KKTProblem
    noise_floor: float = 0.0
    start: tuple = ()
    notes: tuple = ()

    @property
    def quadratic(self) -> bool:
        """Quadratic-order proxy on the Newton-phase steps."""
        return quadratic_proxy(self.step_norms, self.noise_floor)

    @property
    def step_norms(self) -> list:
        return [h["step_norm"] for h in self.history
                if h["phase"] not in ("projected-lm", "init", "trim")]

    def as_dict(self) -> dict:
        """JSON-ready summary."""
        return {
            "converged": self.converged,
            "failure": self.failure,
            "distance": self.distance,
            "lowerBound": self.lowerBound,
            "iterations": self.iterations,
            "firstOrderResidual": self.firstOrderResidual,
            "feasibility": self.feasibility,
            "noiseFloor": self.noise_floor,
            "quadratic": self.quadratic,
            "secondOrder": (None if self.secondOrder is None
                            else self.secondOrder.as_dict()),
            "deltaA": self.deltaA.coeffs.tolist(),
            "kernel": [[e.tolist() for e in b.entries] for b in self.kernel],
            "kernelDegrees": [list(k) for k in self.kernel_degrees],
            "normalization": {"kind": self.normalization.kind,
                              "pivots": [list(p) for p in
                                         self.normalization.pivots]},
            "structure": self.structure.describe(),
            "history": [dict(h) for h in self.history],
            "notes": list(self.notes),
        }


# ---------------------------------------------------------------- init

def _as_bounds(n: int, bounds) -> tuple:
    if np.isscalar(bounds):
        return (int(bounds),) * n
    bounds = tuple(int(k) for k in bounds)
    if len(bounds) != n:
        raise ValueError(f"expected {n} degree bounds, got {len(bounds)}")
    return bounds


def select_kernel_degrees(A: MatrixPolynomial, r: int = 1,
                          structure: PerturbationStructure | None = None,
                          cluster_ratio: float = 2.0) -> tuple:
    """Smallest uniform kernel degree bound compatible with the near kernel.

    The singular values of the full embedding within ``cluster_ratio`` of
    the smallest form the numerical near kernel.  The returned bound is the
    smallest ``delta`` whose reduced embedding has at least ``r`` singular
    values below that threshold; a kernel vector of lower degree would
    have to show up there.  Bounds whose reduced system has at least as
    many equations as free coefficients are skipped; without a cluster the
    largest remaining bound is returned.
    """
    n, d = A.n, A.d
    mu = default_mu(n, d)
    free = (A.coeffs.size if structure is None else structure.free_count)
    smin = scipy.linalg.svdvals(r_embed(A).matrix)[-1]
    thresh = cluster_ratio * max(smin, np.finfo(float).tiny)
    admissible = []
    for delta in range(mu):
        try:
            lay = minimal_embed(A, (delta,) * n, structure)
        except ValueError:
            # fixed nonzero coefficients eliminated every kernel coefficient
            continue
        # with as many equations as free coefficients a generic kernel
        # pins dA (typically to -A), which is a degenerate critical point
        if lay.col_map.size < r or r * lay.row_map.size >= free:
            continue
        admissible.append(delta)
        s = scipy.linalg.svdvals(lay.matrix)
        s = np.concatenate([s, np.zeros(max(0, lay.col_map.size - s.size))])
        if np.sum(s <= thresh) >= r:
            return (delta,) * n
    return ((admissible[-1] if admissible else 0),) * n


def init_kernel_svd(A: MatrixPolynomial, r: int = 1, deg_bounds=None,
                    structure: PerturbationStructure | None = None) -> list:
    """Right singular vectors of the smallest ``r`` singular values.

    The embedding is reduced to ``deg_bounds`` (``mu - 1`` everywhere by
    default) before the SVD, so the vectors respect those bounds.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    mu = default_mu(A.n, A.d)
    bounds = _as_bounds(A.n, mu - 1 if deg_bounds is None else deg_bounds)
    lay = minimal_embed(A, bounds, structure)
    if r >= lay.col_map.size:
        raise ValueError(f"r = {r} leaves no room in a kernel layout with "
                         f"{lay.col_map.size} coefficients")
    _, _, Vt = np.linalg.svd(lay.matrix)
    return [lay.to_polyvector(Vt[-1 - k]) for k in range(r)]


def _trim(e: np.ndarray, tol: float = 0.0) -> np.ndarray:
    nz = np.flatnonzero(np.abs(e) > tol)
    return e[:nz[-1] + 1] if nz.size else e[:0]


def _divide(b: PolyVector, g: np.ndarray):
    """Least-squares quotients of every entry by ``g`` and their residual."""
    dg = g.size - 1
    out, res = [], 0.0
    for e in b.entries:
        e = _trim(e)
        if e.size == 0:
            out.append(e)
            continue
        if e.size - 1 < dg:
            return None, np.inf
        T = phi(g, e.size - dg)
        q = np.linalg.lstsq(T, e, rcond=None)[0]
        res += float(np.sum((T @ q - e) ** 2))
        out.append(q)
    return PolyVector(tuple(out)), np.sqrt(res)


def approximate_gcd(p, q, tol: float) -> np.ndarray:
    """Approximate GCD of two scalar polynomials (ascending coefficients).

    The degree is the largest ``k`` whose Sylvester subresultant matrix has
    smallest singular value at most ``tol``; cofactors come from its null
    vector and the divisor from a least-squares fit to both inputs.
    """
    p, q = _trim(np.asarray(p, float)), _trim(np.asarray(q, float))
    dp, dq = p.size - 1, q.size - 1
    for k in range(min(dp, dq), 0, -1):
        S = np.hstack([phi(p, dq - k + 1), -phi(q, dp - k + 1)])
        _, s, Vt = np.linalg.svd(S)
        if s[-1] > tol:
            continue
        v, u = Vt[-1][:dq - k + 1], Vt[-1][dq - k + 1:]
        # p v = q u with p = g u, q = g v
        T = np.vstack([phi(u, k + 1), phi(v, k + 1)])
        g = np.linalg.lstsq(T, np.concatenate([p, q]), rcond=None)[0]
        return g / np.linalg.norm(g)
    return np.ones(1)


def make_primitive(b: PolyVector, tol: float | None = None) -> PolyVector:
    """Remove approximate common content from the entries of ``b``.

    The candidate content is the approximate GCD of the two entries with
    the largest norms; it is accepted if dividing every entry by it leaves
    a residual of at most ``tol`` (default ``1e-8 |b|``).
    """
    nb = b.norm()
    if nb <= np.finfo(float).tiny:
        raise ValueError("kernel vector is numerically zero")
    tol = 1e-8 * nb if tol is None else tol
    nonzero = [i for i, e in enumerate(b.entries) if np.any(e != 0)]
    if len(nonzero) < 2:
        e = _trim(b.entries[nonzero[0]])
        if e.size <= 1:
            return b
        # a single nonzero entry is primitive once reduced to a constant
        ents = [np.zeros(0)] * b.n
        ents[nonzero[0]] = np.array([np.linalg.norm(e)])
        return PolyVector(tuple(ents))
    order = sorted(nonzero, key=lambda i: -np.linalg.norm(b.entries[i]))
    p, q = b.entries[order[0]], b.entries[order[1]]
    g = approximate_gcd(p, q, tol)
    if g.size <= 1:
        return b
    quot, res = _divide(b, g)
    if quot is None or res > tol:
        return b
    return quot


def choose_pivots(bhats: Sequence[np.ndarray]) -> tuple[list, list]:
    """Greedy distinct largest-magnitude pivots.

    Returns the pivot index per column and a list of notes for columns whose
    largest coefficient was already taken.
    """
    used, piv, notes = set(), [], []
    for c, v in enumerate(bhats):
        order = np.argsort(-np.abs(v), kind="stable")
        pick = next(int(i) for i in order if int(i) not in used)
        if pick != int(order[0]):
            notes.append(f"column {c}: largest coefficient already a pivot, "
                         f"using next largest")
        used.add(pick)
        piv.append(pick)
    return piv, notes


def cref_reduce(vectors: Sequence[PolyVector], rtol: float = 1e-10
                ) -> KernelSpec:
    """Column reduced echelon form of the embedded kernel basis.

    If the basis is already in echelon form (each column has a coefficient
    where all other columns vanish) it is only rescaled; otherwise a
    Gauss-Jordan elimination with greedy largest-magnitude pivots is
    applied.  Each column ends with a one at its pivot and zeros at the
    other columns' pivots.
    """
    vectors = list(vectors)
    if not vectors:
        raise ValueError("need at least one kernel vector")
    n = vectors[0].n
    width = max(max(b.deg_bounds) for b in vectors) + 1
    bounds = [tuple(max(b.deg_bounds[i] for b in vectors)
                    for i in range(n))] * len(vectors)
    B = np.zeros((n * width, len(vectors)))
    for c, b in enumerate(vectors):
        for i, e in enumerate(b.entries):
            B[i * width:i * width + e.size, c] = e
    r = B.shape[1]
    scale = np.linalg.norm(B, axis=0)
    if np.any(scale == 0):
        raise ValueError("kernel basis contains a zero column")
    notes = []
    piv = None
    if r > 1:
        nz = np.abs(B) > 0
        cand = []
        for c in range(r):
            alone = nz[:, c] & ~np.delete(nz, c, axis=1).any(axis=1)
            cand.append(np.flatnonzero(alone))
        if all(len(k) for k in cand):
            piv = [int(k[np.argmax(np.abs(B[k, c]))]) for c, k in
                   enumerate(cand)]
    if piv is None:
        piv = []
        for c in range(r):
            col = B[:, c].copy()
            col[piv] = 0.0
            if np.linalg.norm(col) <= rtol * scale[c]:
                raise ValueError("kernel vectors are numerically dependent")
            order = np.argsort(-np.abs(col), kind="stable")
            piv.append(int(order[0]))
            B[:, c] /= B[piv[-1], c]
            for o in range(r):
                if o != c:
                    B[:, o] -= B[piv[-1], o] * B[:, c]
                    B[piv[-1], o] = 0.0
    for c in range(r):
        B[:, c] /= B[piv[c], c]
    out = []
    for c in range(r):
        cols = B[:, c].reshape(n, width)
        out.append(PolyVector(tuple(cols[i, :bounds[c][i] + 1]
                                    for i in range(n))))
    pivots = tuple(divmod(p, width) for p in piv)
    pinned = tuple(tuple(pivots[o] for o in range(r) if o != c)
                   for c in range(r))
    return KernelSpec(tuple(out), tuple(bounds), pivots, pinned,
                      tuple(notes))


def _spec_from_vectors(vectors, deg_bounds=None, support: bool = False
                       ) -> KernelSpec:
    """Kernel spec for a user-supplied basis, used as given."""
    vectors = list(vectors)
    n = vectors[0].n
    if deg_bounds is None:
        bounds = tuple(tuple(len(_trim(e)) - 1 for e in b.entries)
                       for b in vectors)
    else:
        bounds = _norm_bounds(deg_bounds, n, len(vectors))
    width = max(max(max(bd) for bd in bounds), 0) + 1
    flat = []
    for b in vectors:
        v = np.zeros(n * width)
        for i, e in enumerate(b.entries):
            e = _trim(e)
            v[i * width:i * width + e.size] = e
        flat.append(v)
    piv, notes = choose_pivots(flat)
    pivots = tuple(divmod(p, width) for p in piv)
    pinned = []
    for b, bd in zip(vectors, bounds):
        pins = []
        if support:
            for i, e in enumerate(b.entries):
                for k in range(bd[i] + 1):
                    if k >= e.size or e[k] == 0:
                        pins.append((i, k))
        pinned.append(tuple(pins))
    return KernelSpec(tuple(vectors), tuple(bounds), pivots, tuple(pinned),
                      tuple(notes))


def _norm_bounds(deg_bounds, n: int, r: int) -> tuple:
    if np.isscalar(deg_bounds):
        return ((int(deg_bounds),) * n,) * r
    deg_bounds = list(deg_bounds)
    if deg_bounds and np.isscalar(deg_bounds[0]):
        return (_as_bounds(n, deg_bounds),) * r
    if len(deg_bounds) != r:
        raise ValueError(f"expected degree bounds for {r} kernel columns")
    return tuple(_as_bounds(n, b) for b in deg_bounds)


# ---------------------------------------------------------------- helpers

def _scale_kernel(b: np.ndarray, kind: str, piv: int) -> np.ndarray:
    if kind == "column":
        return b / np.linalg.norm(b)
    if b[piv] == 0:
        raise SolverError("initial kernel vanishes at its pivot")
    return b / b[piv]


def least_squares_perturbation(problem: KKTProblem, kernels) -> np.ndarray:
    """Minimum-norm free coefficients of ``dA`` annihilating the kernels.

    Solves ``psi(b) v = -reduced(A_hat + offset_hat) b`` stacked over the
    columns; returns ``v`` (exact when the system is consistent).
    """
    P, c = _stacked(problem, kernels)
    return -np.linalg.lstsq(P, c, rcond=None)[0]


def _stacked(problem: KKTProblem, kernels):
    base = r_embed(problem.A + problem.perturbation(
        np.zeros(problem.n_x))).matrix
    free = problem._free_vec
    P = np.vstack([psi(b, lay)[:, free]
                   for lay, b in zip(problem.layouts, kernels)])
    c = np.concatenate([lay.reduce(base) @ b
                        for lay, b in zip(problem.layouts, kernels)])
    return P, c


def init_lambda(x, problem: KKTProblem, warn: float | None = 1e-2):
    """Least-squares multipliers from ``grad_x L = 0``.

    Returns ``(lambda, residual)``; a residual above ``warn`` signals a
    poor initial point.
    """
    x = np.asarray(x, dtype=float)
    J = jacobian(x, problem)
    rhs = np.zeros(problem.n_x)
    rhs[problem.x_slices[0]] = -2.0 * x[problem.x_slices[0]]
    lam, *_ = np.linalg.lstsq(J.T, rhs, rcond=None)
    res = float(np.linalg.norm(J.T @ lam - rhs))
    if warn is not None and res > warn:
        warnings.warn(f"multiplier least-squares residual {res:.3g} "
                      f"exceeds {warn:g}; initial point may be poor",
                      RuntimeWarning, stacklevel=2)
    return lam, res


def _record(state: SolverState, problem: KKTProblem, gradL, phase: str,
            **extra) -> None:
    x = state.x
    entry = {
        "iter": state.iter,
        "phase": phase,
        "dA_norm": frobenius_norm(problem.perturbation(x)),
        "residual_norm": float(np.linalg.norm(gradL[problem.n_x:])),
        "gradL_norm": float(np.linalg.norm(gradL)),
        "step_norm": float(state.step_norm),
        "mu_k": float(state.mu_k),
        "tau": float(state.tau),
    }
    entry.update(extra)
    state.history.append(entry)
    log.debug("iter %(iter)d [%(phase)s] |dA|=%(dA_norm).10g "
              "|M|=%(residual_norm).3e |gradL|=%(gradL_norm).3e "
              "step=%(step_norm).3e", entry)


def _advance(state: SolverState, problem: KKTProblem, step) -> SolverState:
    nx = problem.n_x
    return replace(state, x=state.x + step[:nx], lam=state.lam + step[nx:],
                   iter=state.iter + 1,
                   step_norm=float(np.linalg.norm(step)),
                   history=state.history)


# ---------------------------------------------------------------- steps

def newton_step(state: SolverState, problem: KKTProblem) -> SolverState:
    """Plain Newton step on the KKT system.

    Raises :class:`SingularKKTError` when the KKT matrix is singular to
    working precision.
    """
    km = kkt_matrices(state.x, state.lam, problem)
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            step = scipy.linalg.solve(km.K, -km.gradL, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            raise SingularKKTError(str(exc)) from None
    new = _advance(state, problem, step)
    new.mu_k = 0.0
    return new


def _bordered(km, mu_k: float, tau: float = 0.0) -> np.ndarray:
    m = km.J.shape[0]
    K = km.K.copy()
    if mu_k:
        K[-m:, -m:] -= mu_k * np.eye(m)
    if tau:
        nx = km.H.shape[0]
        K[:nx, :nx] += tau * np.eye(nx)
    return K


def _solve_bordered(K, rhs, rcond: float) -> np.ndarray:
    # truncated least squares: a rank-deficient J (r > 1) would otherwise
    # let the step wander along its null directions
    return np.linalg.lstsq(K, rhs, rcond=rcond)[0]


def regularized_step(state: SolverState, problem: KKTProblem,
                     rcond: float = 1e-12) -> SolverState:
    """Newton step on the bordered system with ``-mu_k I`` in the multiplier
    block, ``mu_k = |grad L|_1``."""
    km = kkt_matrices(state.x, state.lam, problem)
    mu_k = float(np.abs(km.gradL).sum())
    step = _solve_bordered(_bordered(km, mu_k), -km.gradL, rcond)
    new = _advance(state, problem, step)
    new.mu_k = mu_k
    return new


def damped_step(state: SolverState, problem: KKTProblem,
                tol: Tolerances = Tolerances()) -> SolverState:
    """Regularized step with ``tau I`` added to ``H``.

    ``tau`` grows until the merit ``|grad L|_2`` decreases; after an
    accepted step it drops to at most the new merit.  Raises :class:`SolverError` once ``tau``
    exceeds ``tol.tau_max``.
    """
    km = kkt_matrices(state.x, state.lam, problem)
    g0 = float(np.linalg.norm(km.gradL))
    mu_k = float(np.abs(km.gradL).sum())
    tau, nu = max(state.tau, tol.tau_min), state.nu
    nx = problem.n_x
    # merit values this small are rounding noise and cannot be improved
    floor = 100.0 * np.finfo(float).eps * max(
        1.0, float(np.linalg.norm(state.x)), float(np.linalg.norm(state.lam)))
    while True:
        step = _solve_bordered(_bordered(km, mu_k, tau), -km.gradL,
                               tol.rcond)
        trial_x, trial_l = state.x + step[:nx], state.lam + step[nx:]
        g1 = float(np.linalg.norm(grad_lagrangian(trial_x, trial_l,
                                                  problem)))
        if g1 < g0 or g1 <= floor:
            new = _advance(state, problem, step)
            new.mu_k = mu_k
            # tying tau to the merit keeps the local rate quadratic
            new.tau = max(min(tau / 3.0, g1), tol.tau_min)
            new.nu = 2.0
            return new
        tau = max(tau, tol.tau_min) * nu
        nu *= 2.0
        if tau > tol.tau_max:
            raise SolverError("diverged: damping parameter exceeded its "
                              "maximum")


# ---------------------------------------------------------------- projected LM

def _projected(z, problem: KKTProblem, fixed, fixed_val):
    """Residual ``v(b)`` and its Jacobian for the variable-projection
    objective ``|dA_min(b)|^2``."""
    nb = problem.n_x - problem.n_dA
    bfull = np.empty(nb)
    mask = np.ones(nb, dtype=bool)
    mask[fixed] = False
    bfull[mask] = z
    bfull[fixed] = fixed_val
    offs = [s.start - problem.n_dA for s in problem.x_slices[1:]]
    kernels = [bfull[o:o + lay.col_map.size]
               for o, lay in zip(offs, problem.layouts)]
    P, c = _stacked(problem, kernels)
    Pp = np.linalg.pinv(P, rcond=1e-13)
    v = -Pp @ c
    y = -Pp.T @ v
    x = np.concatenate([v, bfull])
    full = problem.perturbed_embedding(x)
    G = scipy.linalg.block_diag(*[lay.reduce(full)
                                  for lay in problem.layouts])
    rs = problem.residual_slices
    C = np.hstack([_coupling(y[rs[k]], lay, problem._free_vec)
                   for k, lay in enumerate(problem.layouts)])
    Jv = -Pp @ G - (np.eye(P.shape[1]) - Pp @ P) @ C
    return v, Jv[:, mask], x, float(np.linalg.norm(P @ v + c))


def projected_lm(x0, problem: KKTProblem, tol: Tolerances = Tolerances(),
                 history: list | None = None, repivot: bool = False):
    """Levenberg-Marquardt on the kernel with ``dA`` eliminated.

    For fixed kernel columns the cheapest admissible ``dA`` is a minimum
    norm least-squares solution, so the problem reduces to minimizing its
    norm over the kernel alone.  Each column's pivot coordinate is held at
    its current value; with ``repivot`` (single column only) the pivot moves
    to the largest coefficient whenever it drops below half of it.  Stops
    once the LM step is below ``tol.handoff`` relative to the iterate and
    returns the full ``x``.
    """
    nd = problem.n_dA
    b0 = np.asarray(x0, dtype=float)[nd:]
    fixed = np.array([s.start - nd + _pivot_index(problem, c, b0)
                      for c, s in enumerate(problem.x_slices[1:])])
    fixed_val = b0[fixed]
    mask = np.ones(b0.size, dtype=bool)
    mask[fixed] = False
    z = b0[mask]
    v, Jv, x, infeas = _projected(z, problem, fixed, fixed_val)
    f = float(v @ v)
    A_ = Jv.T @ Jv
    tau = tol.tau0 * max(float(np.max(np.diag(A_))), 1e-300)
    nu = 2.0
    for it in range(tol.lm_max_iter):
        g = Jv.T @ v
        h = np.linalg.lstsq(A_ + tau * np.eye(A_.shape[0]), -g,
                            rcond=None)[0]
        hn = float(np.linalg.norm(h))
        if history is not None:
            history.append({"iter": it, "phase": "projected-lm",
                            "dA_norm": float(np.sqrt(f)),
                            "residual_norm": infeas,
                            "gradL_norm": float(np.linalg.norm(g)),
                            "step_norm": hn, "mu_k": 0.0, "tau": tau})
        if hn <= tol.handoff * (1.0 + float(np.linalg.norm(z))) \
                or not np.any(g):
            break
        vt, Jt, xt, inft = _projected(z + h, problem, fixed, fixed_val)
        ft = float(vt @ vt)
        pred = float(h @ (tau * h - g))
        rho = (f - ft) / pred if pred > 0 else -1.0
        if rho > 0:
            z, v, Jv, x, infeas, f = z + h, vt, Jt, xt, inft, ft
            if repivot:
                # dA_min is invariant under scaling b, so a vanishing pivot
                # can be swapped for the largest coefficient at no cost
                b = x[nd:]
                big = int(np.argmax(np.abs(b)))
                if abs(b[fixed[0]]) < 0.5 * abs(b[big]):
                    b = b / b[big]
                    fixed = np.array([big])
                    fixed_val = b[fixed]
                    mask = np.ones(b.size, dtype=bool)
                    mask[fixed] = False
                    z = b[mask]
                    v, Jv, x, infeas = _projected(z, problem, fixed,
                                                  fixed_val)
            A_ = Jv.T @ Jv
            tau *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
        else:
            tau *= nu
            nu *= 2.0
            if tau > tol.tau_max:
                break
    return x


def _pivot_index(problem: KKTProblem, column: int, bflat) -> int:
    spec = problem.normalization
    if spec.kind == "column":
        spec = replace(spec, kind="pivot")
    return pivot_position(spec, column, problem.layouts[column])


# ---------------------------------------------------------------- driver

def quadratic_proxy(step_norms, floor: float = 1e-13,
                    exponent: float = 1.8) -> bool:
    """True when the last three step norms above ``floor`` contract with
    order ``exponent``: ``s[k+1] <= s[k] ** exponent``."""
    s = [float(v) for v in step_norms if v > floor]
    if len(s) < 3:
        # too few informative steps to judge; nothing contradicts the rate
        return True
    a, b, c = s[-3:]
    return b <= a ** exponent and c <= b ** exponent


def _build_spec(A, r, structure, init, kernel_degrees, kernel_support,
                notes) -> KernelSpec:
    n = A.n
    if isinstance(init, KernelSpec):
        return init
    if isinstance(init, str):
        if init != "svd":
            raise ValueError(f"unknown init {init!r}")
        if kernel_degrees is None:
            bounds = select_kernel_degrees(A, r, structure)
            notes.append(f"kernel degree bound {bounds[0]} chosen from the "
                         f"singular value cluster")
        elif kernel_degrees == "full":
            bounds = (default_mu(n, A.d) - 1,) * n
        else:
            bounds = _as_bounds(n, kernel_degrees)
        vecs = init_kernel_svd(A, r, bounds, structure)
        if r == 1:
            prim = make_primitive(vecs[0])
            if prim.deg_bounds != vecs[0].deg_bounds:
                notes.append("removed approximate common content from the "
                             "initial kernel")
            vecs = [prim]
            spec = _spec_from_vectors(vecs, None)
            return replace(spec, deg_bounds=(tuple(
                max(k, -1) for k in prim.deg_bounds),))
        spec = cref_reduce(vecs)
        return spec
    vecs = list(init)
    if len(vecs) != r:
        raise ValueError(f"initial kernel has {len(vecs)} columns, "
                         f"expected r = {r}")
    return _spec_from_vectors(vecs, kernel_degrees, kernel_support)


def solve(A: MatrixPolynomial, r: int = 1,
          structure: PerturbationStructure | None = None,
          normalization: str = "pivot", init="svd",
          tolerances: Tolerances | None = None, *,
          kernel_degrees=None, kernel_support: bool = False,
          damped: bool = False, dA_init="zero",
          method: str = "regularized") -> SolveReport:
    """Locally nearest singular ``A + dA`` with an ``r``-dimensional kernel.

    Parameters
    ----------
    A : MatrixPolynomial
    r : int
        Kernel dimension (rank drop) to enforce.
    structure : PerturbationStructure, optional
        Which coefficients of ``dA`` may move; degree preserving by default.
    normalization : {"pivot", "column", "monic"}
    init : "svd", KernelSpec or sequence of PolyVector
        Initial kernel basis.
    tolerances : Tolerances, optional
    kernel_degrees : int, "full", tuple or list of tuples, optional
        Kernel degree bounds; chosen from the singular values when omitted.
    kernel_support : bool
        Keep the zero coefficients of a supplied kernel at zero.
    damped : bool
        Run the projected Levenberg-Marquardt phase first and damp the
        Newton phase.
    dA_init : "zero", "lstsq" or MatrixPolynomial
        Initial perturbation; ``"lstsq"`` takes the cheapest perturbation
        annihilating the initial kernel.
    method : {"regularized", "newton"}
    """
    tol = Tolerances() if tolerances is None else tolerances
    structure = (structure_degree_preserving(A) if structure is None
                 else structure)
    if structure.free_count == 0:
        raise RigidStructureError("structure has no free coefficients")
    if structure.free.shape != A.coeffs.shape:
        raise ValueError("structure does not match the matrix shape")
    notes = []
    # the iteration starts from A plus the fixed offsets, so the initial
    # kernel is taken from there
    A0 = A + MatrixPolynomial(structure.offset) if not structure.is_linear \
        else A
    spec = _build_spec(A0, r, structure, init, kernel_degrees,
                       kernel_support, notes)
    notes.extend(spec.notes)
    layouts = [minimal_embed(A, bd, structure, pins)
               for bd, pins in zip(spec.deg_bounds, spec.pinned)]
    norm = NormalizationSpec(normalization, spec.pivots)
    if normalization == "monic":
        norm = NormalizationSpec("monic", tuple(
            (e, lay.kernel_degrees[e]) for (e, _), lay in
            zip(spec.pivots, layouts)))
    problem = KKTProblem(A, structure, layouts, norm)
    kernels = []
    for c, (lay, b) in enumerate(zip(layouts, spec.vectors)):
        bred = lay.from_polyvector(b, strict=False)
        piv = pivot_position(NormalizationSpec(
            "pivot" if norm.kind == "column" else norm.kind, norm.pivots),
            c, lay)
        kernels.append(_scale_kernel(bred, norm.kind, piv))
    if isinstance(dA_init, MatrixPolynomial):
        dA0 = structure.from_perturbation(dA_init)
    elif dA_init == "lstsq":
        dA0 = least_squares_perturbation(problem, kernels)
    elif dA_init == "zero":
        dA0 = np.zeros(problem.n_dA)
    else:
        raise ValueError(f"unknown dA_init {dA_init!r}")
    x = np.concatenate([dA0] + kernels)
    history: list = []
    if damped:
        repivot = r == 1 and norm.kind in ("pivot", "column")
        x = projected_lm(x, problem, tol, history, repivot)
        if repivot:
            b = x[problem.n_dA:]
            big = int(np.argmax(np.abs(b)))
            coord = tuple(int(v) for v in layouts[0].kernel_coords[big])
            if coord != norm.pivots[0]:
                notes.append(f"pivot moved to kernel coefficient {coord}")
                norm = replace(norm, pivots=(coord,))
                problem = KKTProblem(A, structure, layouts, norm)
            x[problem.n_dA:] = _scale_kernel(b, norm.kind, big)
        if norm.kind == "column":
            for s in problem.x_slices[1:]:
                x[s] /= np.linalg.norm(x[s])
    lam, lres = init_lambda(x, problem, warn=None)
    if lres > tol.lambda_warn:
        notes.append(f"multiplier least-squares residual {lres:.3g} "
                     f"exceeds {tol.lambda_warn:g}")
    state = SolverState(x=x, lam=lam, tau=tol.tau0 if damped else 0.0,
                        history=history)
    start = (x.copy(), lam.copy())
    g = grad_lagrangian(state.x, state.lam, problem)
    state.mu_k = float(np.abs(g).sum())
    if damped:
        # tied to the merit from the start so the local rate stays quadratic
        state.tau = max(min(state.tau, float(np.linalg.norm(g))), tol.tau_min)
    state.step_norm = np.nan
    _record(state, problem, g, "init")
    failure = None
    growth = 0
    prev = np.inf
    while True:
        if state.iter >= tol.max_iter:
            failure = f"iteration cap {tol.max_iter} reached"
            break
        try:
            if damped:
                state = damped_step(state, problem, tol)
                phase = "damped"
            elif method == "newton":
                try:
                    state = newton_step(state, problem)
                    phase = "newton"
                except SingularKKTError:
                    state = regularized_step(state, problem, tol.rcond)
                    phase = "regularized"
            else:
                state = regularized_step(state, problem, tol.rcond)
                phase = "regularized"
        except SolverError as exc:
            failure = str(exc)
            break
        g = grad_lagrangian(state.x, state.lam, problem)
        _record(state, problem, g, phase)
        if not np.all(np.isfinite(state.x)):
            failure = "diverged: non-finite iterate"
            break
        if state.step_norm <= tol.tol_step:
            break
        growth = growth + 1 if state.step_norm > prev else 0
        prev = state.step_norm
        if growth >= tol.patience:
            failure = (f"diverged: step norm grew for {tol.patience} "
                       f"consecutive iterations")
            break
    report = _report(state, problem, failure, tol, notes, start)
    if (report.converged and r == 1 and kernel_degrees is None
            and isinstance(init, str)):
        report = _trim_layout(report, A, structure, normalization, tol,
                              method)
        report = _reduce_excess(report, A, structure, normalization, tol,
                                method)
    return report


def _trim_layout(report, A, structure, normalization, tol, method):
    """Re-solve on a smaller layout if the kernel has vanishing leading
    coefficients or approximate common content.

    Either makes the Jacobian rank deficient at the solution; the reduced
    kernel still annihilates ``A + dA``, so the re-solve starts feasible.
    """
    b = report.kernel[0]
    cut = 1e-8 * max(float(np.max(np.abs(b.coefficient_vector()))), 1e-300)
    trimmed = PolyVector(tuple(_trim(e, cut) for e in b.entries))
    trimmed = make_primitive(trimmed)
    if trimmed.deg_bounds == b.deg_bounds:
        return report
    R = solve(A, 1, structure, normalization, [trimmed], tol,
              kernel_degrees=trimmed.deg_bounds, dA_init=report.deltaA,
              method=method)
    if not R.converged:
        return report
    hist = report.history + tuple({**h, "phase": "trim"} for h in R.history)
    return replace(
        R, history=hist, iterations=report.iterations + R.iterations,
        start=report.start, noise_floor=report.noise_floor,
        notes=report.notes + (f"kernel degree bounds lowered to "
                              f"{trimmed.deg_bounds}",) + R.notes)


def _reduce_excess(report, A, structure, normalization, tol, method):
    """Re-solve from a lower-degree kernel when ``A + dA`` has one.

    If ``A + dA`` drops rank by more than one, the kernel vector can move
    inside a larger kernel module at fixed ``dA`` and the reduced Hessian
    is singular.  The re-solve starts at ``dA`` with the smallest-degree
    kernel vector and is kept only if it converges to a distance no larger
    than the current one.
    """
    so = report.secondOrder
    if so is None or so.status == "sufficient":
        return report
    top = max(report.kernel_degrees[0])
    B = report.problem.A + report.problem.perturbation(report.x)
    for mu in range(1, top + 1):
        _, s, Vt = np.linalg.svd(r_embed(B, mu).matrix)
        if s[-1] <= 1e-8 * max(s[0], 1.0):
            break
    else:
        return report
    b = unembed_vector(Vt[-1], A.n, mu)
    try:
        R = solve(A, 1, structure, normalization, [b], tol,
                  kernel_degrees=mu - 1, dA_init=report.deltaA,
                  damped=True, method=method)
    except (SolverError, ValueError):
        return report
    if not R.converged or R.distance > report.distance * (1 + 1e-10):
        return report
    hist = report.history + tuple({**h, "phase": "trim"} for h in R.history)
    return replace(
        R, history=hist, iterations=report.iterations + R.iterations,
        start=report.start, noise_floor=report.noise_floor,
        notes=report.notes + (f"singular reduced Hessian; kernel degree "
                              f"bound lowered to {mu - 1}",) + R.notes)


def _report(state, problem, failure, tol, notes, start) -> SolveReport:
    x, lam = state.x, state.lam
    g = grad_lagrangian(x, lam, problem)
    feas = float(np.max(np.abs(g[problem.n_x:]))) if g.size > problem.n_x \
        else 0.0
    kkt = float(np.max(np.abs(g)))
    dA = problem.perturbation(x)
    kernels = problem.kernel_polys(x)
    if failure is None:
        if feas > tol.tol_feas:
            failure = f"infeasible: constraint residual {feas:.3g}"
        elif kkt > tol.tol_kkt:
            failure = f"first-order residual {kkt:.3g} above tolerance"
    converged = failure is None
    second = check_second_order(x, lam, problem) if converged else None
    # a step taken at the final point shows the rounding level of the steps
    probe = regularized_step(replace(state, history=[]), problem, tol.rcond)
    scale = float(np.linalg.norm(np.concatenate([x, lam])))
    floor = 10.0 * max(probe.step_norm, np.finfo(float).eps * scale)
    return SolveReport(
        deltaA=dA, kernel=tuple(kernels), distance=frobenius_norm(dA),
        lowerBound=distance_lower_bound(problem.A), converged=converged,
        iterations=sum(1 for h in state.history
                       if h["phase"] not in ("init", "projected-lm")),
        firstOrderResidual=kkt, feasibility=feas, secondOrder=second,
        failure=failure, history=tuple(state.history),
        kernel_degrees=tuple(lay.kernel_degrees for lay in problem.layouts),
        normalization=problem.normalization, structure=problem.structure,
        lam=lam, x=x, problem=problem, noise_floor=floor, start=start,
        notes=tuple(notes))
