"""Extended-precision replay of the regularized Newton iteration.

Binary64 leaves room for only two or three quadratically contracting steps
before rounding takes over, which is too few to judge the convergence
order when the contraction constant is large.  :func:`extended_newton`
reruns the iteration from the same starting point with the residuals,
gradient and KKT matrix evaluated in ``mpmath`` arithmetic.  Each linear
solve uses a binary64 truncated pseudo-inverse refined against the
extended-precision residual, so rank-deficient systems are handled the same
way as in the binary64 solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np

from .kkt import KKTProblem, grad_lagrangian, hessian_lagrangian, jacobian
from .solver import SolveReport, quadratic_proxy

__all__ = ["ExtendedRun", "extended_newton", "verify_quadratic"]


@dataclass(frozen=True)
class ExtendedRun:
    step_norms: tuple
    x_step_norms: tuple
    grad_norms: tuple
    digits: int
    floor: float

    @property
    def quadratic(self) -> bool:
        return quadratic_proxy(self.step_norms, self.floor)


def _mp(v) -> np.ndarray:
    return np.array([mpmath.mpf(float(t)) for t in np.ravel(v)],
                    dtype=object)


def _f64(v) -> np.ndarray:
    return np.array([float(t) for t in np.ravel(v)]).reshape(np.shape(v))


def _norm(v) -> mpmath.mpf:
    return mpmath.sqrt(mpmath.fsum(t * t for t in v))


def extended_newton(problem: KKTProblem, x0, lam0, digits: int = 60,
                    max_iter: int = 30, rcond: float = 1e-12,
                    refine: int = 12) -> ExtendedRun:
    """Regularized Newton iteration in ``digits``-digit arithmetic.

    Stops when a step falls below ``10**-(digits - 10)``; that value is
    reported as the noise floor.
    """
    floor = 10.0 ** -(digits - 10)
    steps, xsteps, grads = [], [], []
    with mpmath.workdps(digits):
        x, lam = _mp(x0), _mp(lam0)
        nx = x.size
        for _ in range(max_iter):
            J = jacobian(x, problem)
            H = hessian_lagrangian(x, lam, problem)
            g = grad_lagrangian(x, lam, problem, J)
            mu = mpmath.fsum(abs(t) for t in g)
            grads.append(float(_norm(g)))
            m = J.shape[0]
            K = np.block([[H, J.T], [J, np.zeros((m, m), dtype=object)]])
            for i in range(m):
                K[nx + i, nx + i] = -mu
            Kf = _f64(K)
            P = np.linalg.pinv(Kf, rcond=rcond)
            rhs = -g
            step = np.zeros(K.shape[0], dtype=object)
            for _ in range(refine):
                r = rhs - K.dot(step)
                corr = P @ _f64(r)
                step = step + _mp(corr)
                if np.linalg.norm(corr) <= floor * 1e-3 * max(
                        1.0, float(_norm(step))):
                    break
            x = x + step[:nx]
            lam = lam + step[nx:]
            s = float(_norm(step))
            steps.append(s)
            xsteps.append(float(_norm(step[:nx])))
            if s <= floor:
                break
    return ExtendedRun(tuple(steps), tuple(xsteps), tuple(grads), digits,
                       floor)


def verify_quadratic(report: SolveReport, digits: int = 60) -> dict:
    """Quadratic-order proxy in binary64 and, if needed, extended precision.

    Returns ``{"binary64": bool, "extended": bool | None, ...}``; the
    extended replay runs only when the binary64 check fails.
    """
    out = {"binary64": report.quadratic, "extended": None,
           "binary64_steps": report.step_norms}
    if not out["binary64"]:
        x0, lam0 = report.start
        run = extended_newton(report.problem, x0, lam0, digits=digits)
        out["extended"] = run.quadratic
        out["extended_steps"] = list(run.step_norms)
    return out
