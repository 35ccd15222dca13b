"""
Rank drop two and the local convergence rate
============================================

A 4x4 quadratic matrix polynomial is pushed to rank two by a tiny affine
perturbation.  The kernel now has two columns kept in column echelon form.
We also look at the step norms: at this solution the constraint Jacobian
is rank deficient, so Newton converges linearly, and replaying the run in
60-digit arithmetic shows the same.
"""

from polyrank.cli import fixture_path, parse_problem
from polyrank.extended import extended_newton
from polyrank.solver import solve

for name in ("example_4x4.mp", "example_4x4_cref.mp"):
    prob = parse_problem(fixture_path(name))
    support = prob.options.get("kernel-support", "false") == "true"
    R = solve(prob.A, 2, prob.structure,
              prob.options.get("normalize", "pivot"), list(prob.kernel),
              kernel_support=support)
    so = R.secondOrder
    print(f"{name}: distance {R.distance:.7f} in {R.iterations} iterations")
    print(f"  J rank {so.jacobian_rank} of {so.jacobian_rows} rows, "
          f"reduced Hessian status {so.status}")
    print("  binary64 steps:", " ".join(f"{s:.1e}" for s in R.step_norms))
    print(f"  quadratic proxy: {R.quadratic}")

    run = extended_newton(R.problem, *R.start, digits=60, max_iter=25)
    steps = [float(s) for s in run.step_norms]
    ratios = [b / a for a, b in zip(steps[-6:-1], steps[-5:])]
    print("  60-digit step ratios:", " ".join(f"{q:.3f}" for q in ratios))
    print(f"  quadratic in extended precision: {run.quadratic}\n")
