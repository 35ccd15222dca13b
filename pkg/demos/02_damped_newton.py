"""
Damping and the choice of kernel degree
=======================================

Plain Newton on the KKT system converges fast near a solution but can
wander from a poor start.  The damped variant adds a Levenberg-type shift
that fades as the merit function goes to zero, so the final iterations
are still Newton steps.
"""

import numpy as np

from polyrank.cli import fixture_path, parse_problem
from polyrank.polycore import PolyVector
from polyrank.solver import solve

A = parse_problem(fixture_path("example_2_11.mp")).A


def show(label, R):
    status = "converged" if R.converged else f"failed ({R.failure})"
    print(f"{label:28s} {status}, distance {R.distance:.8f}, "
          f"{R.iterations} iterations")
    newton = [h for h in R.history if h["phase"] in ("damped",
                                                     "regularized")]
    for h in newton[-4:]:
        print(f"{'':30s}step {h['step_norm']:.2e}  tau {h['tau']:.1e}")


show("undamped, SVD start", solve(A, 1))
show("damped, SVD start", solve(A, 1, damped=True))

# A kernel vector of degree two in every entry reaches a slightly smaller
# distance than the degree chosen from the singular value gap.
b = PolyVector(([0.12362, 0.25146, 0.16409],
                [0.55516, 0.23740, 0.0],
                [-0.0060443, -0.48688, 0.0]))
R = solve(A, 1, init=[b], kernel_degrees=(2, 2, 2), damped=True)
show("damped, degree-2 start", R)
print("\nfinal kernel:")
for e in R.kernel[0].entries:
    print("  ", np.round(e, 6))
