"""
Nearest singular pencil under different structures
==================================================

A 3x3 pencil ``A(t) = A0 + A1 t`` is nonsingular.  We look for a small
perturbation ``dA`` such that ``A + dA`` has a nontrivial polynomial
kernel, and compare what different perturbation structures allow.
"""

import numpy as np

from polyrank.cli import fixture_path, parse_problem
from polyrank.embedding import distance_lower_bound
from polyrank.polycore import apply, frobenius_norm
from polyrank.solver import solve
from polyrank.structure import (structure_degree_preserving,
                                structure_support_preserving)

np.set_printoptions(precision=5, suppress=True)

A = parse_problem(fixture_path("example_2_10.mp")).A
print("A0 =\n", A.coeffs[0])
print("A1 =\n", A.coeffs[1])

# The smallest singular value of the block-Toeplitz embedding gives a lower
# bound on the distance to singularity for any structure.
print(f"\nlower bound: {distance_lower_bound(A):.6f}")

# Four structures, from the most to the least restrictive:
#   zeros-fixed  keep the zero entries of A0 and leave A1 alone
#   lead-fixed   perturb every entry of A0, leave A1 alone
#   support      perturb only nonzero coefficients
#   degree       perturb any coefficient up to the degree of each entry
structures = {
    "zeros-fixed": structure_support_preserving(A).fix(k=1),
    "lead-fixed": structure_degree_preserving(A).fix(k=1),
    "support": structure_support_preserving(A),
    "degree": structure_degree_preserving(A),
}

for name, S in structures.items():
    R = solve(A, 1, S)
    b = R.kernel[0]
    res = frobenius_norm(apply(A + R.deltaA, b))
    print(f"\n{name:12s} distance {R.distance:.6f} after {R.iterations} "
          f"iterations, |(A + dA) b| = {res:.1e}")
    print(f"{'':12s} second-order status: {R.secondOrder.status}, "
          f"kernel degrees {R.kernel_degrees[0]}")

# Every structured distance sits above the lower bound.  Here each
# relaxation also lowers the distance, though local solutions need not be
# ordered that way in general.
R = solve(A, 1, structures["zeros-fixed"])
print("\nperturbation with zeros kept and A1 fixed:\n", R.deltaA.coeffs[0])
print("kernel vector entries:")
for e in R.kernel[0].entries:
    print("  ", e)
