import time

import numpy as np
import pytest

from polyrank.embedding import r_embed, r_embed_vector
from polyrank.kkt import KKTProblem, grad_lagrangian
from polyrank.polycore import MatrixPolynomial, PolyVector, apply, \
    frobenius_norm
from polyrank.solver import (RigidStructureError, SolverError, SolverState,
                             Tolerances, approximate_gcd, cref_reduce,
                             init_kernel_svd, init_lambda, make_primitive,
                             newton_step, quadratic_proxy, regularized_step,
                             select_kernel_degrees, solve)
from polyrank.structure import (NormalizationSpec,
                                structure_degree_preserving,
                                structure_support_preserving)

from conftest import (B_GLM_211, B_INIT_210, B_INIT_211, DA0_PRINTED,
                      pencil_210, pencil_211, problem_4x4,
                      random_matrix_polynomial, solve_4x4, structures_210)


def _newton_phase(R):
    return [h for h in R.history
            if h["phase"] not in ("init", "projected-lm", "trim")]


# ---------------------------------------------------------------- init

def test_svd_init_recovers_planted_kernel(rng):
    for _ in range(10):
        c = rng.standard_normal((2, 3, 3))
        v = rng.standard_normal(3)
        c -= np.einsum("kij,j->ki", c, v)[:, :, None] * v / (v @ v)
        A = MatrixPolynomial(c)
        b = init_kernel_svd(A, 1, (0, 0, 0))[0]
        u = b.coefficient_vector()
        assert abs(abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
                   - 1) <= 1e-10
        full = init_kernel_svd(A, 1)[0]
        mu = 3 * 1 + 1
        assert np.linalg.norm(r_embed(A).matrix
                              @ r_embed_vector(full, mu)) <= 1e-10


@pytest.mark.parametrize("A_fn,printed", [(pencil_210, B_INIT_210),
                                          (pencil_211, B_INIT_211)])
def test_svd_init_matches_printed_guess(A_fn, printed):
    b = init_kernel_svd(A_fn(), 1)[0]
    got = np.concatenate([b.entries[i][:len(e)]
                          for i, e in enumerate(printed)])
    ref = np.concatenate([np.asarray(e) for e in printed])
    scale = (got @ ref) / (got @ got)
    assert np.max(np.abs(scale * got - ref)) <= 1e-4


def test_svd_init_rejects_bad_rank(rng):
    A = random_matrix_polynomial(rng, 2, 1)
    with pytest.raises(ValueError):
        init_kernel_svd(A, 0)
    with pytest.raises(ValueError):
        init_kernel_svd(A, 4, (1, 1))


def test_make_primitive_removes_exact_content():
    g = np.array([1.0, 1.0])
    b = PolyVector((np.convolve([0.0, 1.0], g), g))
    p = make_primitive(b)
    assert p.deg_bounds == (1, 0)
    t, one = p.entries
    assert abs(t[0]) <= 1e-12
    assert t[1] / one[0] == pytest.approx(1.0, rel=1e-12)


def test_make_primitive_keeps_primitive(rng):
    b = PolyVector((np.array([1.0, 2.0]), np.array([3.0]),
                    np.array([0.5, -1.0, 2.0])))
    p = make_primitive(b)
    assert p is b


def test_make_primitive_with_noise(rng):
    for _ in range(10):
        core = PolyVector(tuple(rng.standard_normal(k + 1)
                                for k in (2, 1, 2)))
        g = rng.standard_normal(2)
        noisy = PolyVector(tuple(
            np.convolve(e, g) + 1e-8 * rng.standard_normal(e.size + 1)
            for e in core.entries))
        clean = make_primitive(core)
        got = make_primitive(noisy, tol=1e-6 * noisy.norm())
        assert got.deg_bounds == clean.deg_bounds == (2, 1, 2)


def test_make_primitive_zero_vector():
    with pytest.raises(ValueError):
        make_primitive(PolyVector(([0.0], [0.0, 0.0])))


def test_approximate_gcd_degree(rng):
    g = rng.standard_normal(3)
    p = np.convolve(g, rng.standard_normal(3))
    q = np.convolve(g, rng.standard_normal(2))
    h = approximate_gcd(p, q, 1e-10)
    assert h.size == 3
    gn = g / np.linalg.norm(g)
    assert abs(abs(h @ gn) - 1) <= 1e-8


def test_cref_single_column(rng):
    b = PolyVector((rng.standard_normal(2), rng.standard_normal(3)))
    spec = cref_reduce([b])
    e, k = spec.pivots[0]
    assert spec.vectors[0].entries[e][k] == 1.0
    flat = np.concatenate(b.entries)
    assert abs(abs(flat).max() - abs(b.entries[e][k])) == 0


def test_cref_dependent_columns(rng):
    b = PolyVector((rng.standard_normal(2), rng.standard_normal(2)))
    with pytest.raises(ValueError):
        cref_reduce([b, b])


def test_cref_general_basis_is_reduced(rng):
    vecs = [PolyVector(tuple(rng.standard_normal(3) for _ in range(3)))
            for _ in range(2)]
    spec = cref_reduce(vecs)
    for c, (e, k) in enumerate(spec.pivots):
        for o, v in enumerate(spec.vectors):
            assert v.entries[e][k] == (1.0 if o == c else 0.0)


def test_cref_accepts_echelon_basis():
    prob = problem_4x4("example_4x4_cref.mp")
    spec = cref_reduce(list(prob.kernel))
    for c, (e, k) in enumerate(spec.pivots):
        for o, w in enumerate(prob.kernel):
            if o != c:
                assert k >= w.entries[e].size or w.entries[e][k] == 0
    for v, w in zip(spec.vectors, prob.kernel):
        a, b = v.coefficient_vector(), np.concatenate(
            [np.pad(e, (0, len(f) - len(e))) for e, f in
             zip(w.entries, v.entries)])
        s = (a @ b) / (b @ b)
        np.testing.assert_allclose(a, s * b, atol=1e-12)


def test_select_kernel_degrees_admissible():
    A = pencil_210()
    S = structure_degree_preserving(A)
    bd = select_kernel_degrees(A, 1, S)
    assert len(bd) == 3 and 0 <= bd[0] <= 3


# ---------------------------------------------------------------- lambda

def _problem_210(bounds=(1, 0, 0)):
    A = pencil_210()
    S = structures_210(A)["zeros-fixed"]
    return KKTProblem.build(A, S, [bounds],
                            NormalizationSpec("pivot", ((0, 1),)))


def test_init_lambda_at_zero_perturbation(rng):
    p = _problem_210()
    x = np.concatenate([np.zeros(p.n_dA),
                        rng.standard_normal(p.n_x - p.n_dA)])
    lam, res = init_lambda(x, p)
    assert np.linalg.norm(lam) <= 1e-14 and res <= 1e-14


def test_init_lambda_reproduces_converged_multipliers():
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["zeros-fixed"])
    assert R.converged and R.secondOrder.full_row_rank
    lam, res = init_lambda(R.x, R.problem)
    assert res <= 1e-10
    assert np.max(np.abs(lam - R.lam)) <= 1e-8


def test_init_lambda_warns_on_poor_start(rng):
    p = _problem_210((2, 2, 2))
    x = rng.standard_normal(p.n_x) * 10
    with pytest.warns(RuntimeWarning):
        _, res = init_lambda(x, p, warn=1e-2)
    assert res > 1e-2


# ---------------------------------------------------------------- steps

def test_newton_step_is_zero_at_kkt_point():
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["zeros-fixed"])
    st = SolverState(x=R.x, lam=R.lam)
    new = newton_step(st, R.problem)
    assert new.step_norm <= 1e-13
    reg = regularized_step(st, R.problem)
    assert reg.step_norm <= 1e-13 and reg.mu_k <= 1e-13


def test_newton_step_solves_kkt_system(rng):
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["zeros-fixed"],
              tolerances=Tolerances(max_iter=2))
    st = SolverState(x=R.start[0], lam=R.start[1])
    n1 = newton_step(st, R.problem)
    from polyrank.kkt import kkt_matrices
    km = kkt_matrices(st.x, st.lam, R.problem)
    step = np.linalg.solve(km.K, -km.gradL)
    np.testing.assert_allclose(n1.x - st.x, step[:R.problem.n_x],
                               atol=1e-12)


def test_quadratic_proxy():
    assert quadratic_proxy([1e-1, 1e-2, 1e-4, 1e-8])
    assert not quadratic_proxy([1e-1, 5e-2, 2.5e-2, 1.2e-2])
    assert quadratic_proxy([1e-2, 1e-4, 1e-8, 1e-15], floor=1e-13)


# ---------------------------------------------------------------- solve

REGRESSIONS = [
    ("zeros-fixed", None, 0.135507),
    ("lead-fixed", None, 0.135497),
    ("degree", None, 0.115585),
    ("support", None, 0.135313),
]


@pytest.mark.parametrize("name,bounds,target", REGRESSIONS)
def test_pencil_regressions(name, bounds, target):
    A = pencil_210()
    R = solve(A, 1, structures_210(A)[name], kernel_degrees=bounds)
    assert R.converged
    assert R.distance == pytest.approx(target, abs=5e-5)
    assert R.distance >= R.lowerBound - 1e-10


def test_zeros_fixed_matches_printed_perturbation():
    A = pencil_210()
    t0 = time.perf_counter()
    R = solve(A, 1, structures_210(A)["zeros-fixed"])
    elapsed = time.perf_counter() - t0
    assert R.iterations <= 10 and elapsed < 1.0
    np.testing.assert_allclose(R.deltaA.coeffs[0], DA0_PRINTED, atol=1e-4)
    assert not np.any(R.deltaA.coeffs[1])
    assert R.deltaA.coeffs[0, 0, 0] == 0.0 and R.deltaA.coeffs[0, 1, 2] == 0.0


def test_degree_structure_printed_kernel_shape():
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["degree"], kernel_degrees=(1, 0, 0))
    assert R.converged
    assert R.distance == pytest.approx(0.115585, abs=5e-5)


def test_fixed_coefficients_bit_identical_in_every_iterate():
    A = pencil_210()
    S = structures_210(A)["zeros-fixed"]
    R = solve(A, 1, S)
    dA = R.problem.perturbation(R.start[0])
    for xk in (R.start[0], R.x):
        dA = R.problem.perturbation(xk)
        assert np.array_equal(dA.coeffs[~S.free], S.offset[~S.free])


def test_affine_offsets_are_respected():
    from polyrank.structure import PerturbationStructure
    A = pencil_210()
    free = np.ones(A.coeffs.shape, dtype=bool)
    free[1, 0, 0] = False
    off = np.zeros(A.coeffs.shape)
    off[1, 0, 0] = 0.05
    S = PerturbationStructure(free, off)
    R = solve(A, 1, S, damped=True)
    assert R.converged
    assert R.deltaA.coeffs[1, 0, 0] == 0.05
    assert frobenius_norm(apply(A + R.deltaA, R.kernel[0])) <= 1e-10
    assert R.secondOrder.status == "sufficient"


def test_structure_without_singular_completion():
    """A fixed nonzero A0[0,0] next to the fixed A1 keeps det(A) nonzero."""
    from polyrank.structure import PerturbationStructure
    A = pencil_210()
    free = np.ones(A.coeffs.shape, dtype=bool)
    free[1] = False
    free[0, 0, 0] = False
    off = np.zeros(A.coeffs.shape)
    off[0, 0, 0] = 0.05
    with pytest.raises(ValueError, match="no free coefficients"):
        solve(A, 1, PerturbationStructure(free, off))


def test_monotone_final_phase_on_regressions():
    A = pencil_210()
    for S in structures_210(A).values():
        R = solve(A, 1, S)
        g = [h["gradL_norm"] for h in _newton_phase(R)]
        for a, b in zip(g[-4:-1], g[-3:]):
            assert b <= a or b <= 1e-15
        mu = [h["mu_k"] for h in _newton_phase(R) if h["mu_k"] > 1e-13]
        assert mu[-1] <= 1e-5
        for a, b in zip(mu[-3:-1], mu[-2:]):
            assert b <= 10 * a * a


def test_damped_example_2_11_from_svd():
    R = solve(pencil_211(), 1, damped=True)
    assert R.converged
    assert R.distance == pytest.approx(0.949578, abs=1e-3)


def test_undamped_example_2_11_is_reported_not_raised():
    R = solve(pencil_211(), 1)
    assert isinstance(R.converged, bool)
    if not R.converged:
        assert R.failure


def test_damped_example_2_11_degree_two_kernel():
    b = PolyVector(B_GLM_211)
    R = solve(pencil_211(), 1, init=[b], kernel_degrees=(2, 2, 2),
              damped=True)
    assert R.converged
    assert R.distance == pytest.approx(0.94356416, abs=1e-4)
    assert R.distance < 0.9438619


def test_damping_switches_off_near_solution():
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["zeros-fixed"], damped=True)
    assert R.converged
    tol = Tolerances()
    assert _newton_phase(R)[-1]["tau"] == tol.tau_min


def test_four_by_four_rank_two():
    R = solve_4x4()
    assert R.converged and R.iterations <= 12
    assert R.distance == pytest.approx(0.0007844, abs=1e-5)
    for b in R.kernel:
        assert frobenius_norm(apply(R.problem.A + R.deltaA, b)) <= 1e-10


def test_four_by_four_nine_iterations():
    assert solve_4x4().iterations <= 9


def test_four_by_four_echelon_kernel():
    R = solve_4x4("example_4x4_cref.mp")
    assert R.converged
    assert R.distance == pytest.approx(0.0008408, abs=1e-5)


def test_rigid_structure_is_rejected():
    A = MatrixPolynomial.zeros(2, 1)
    with pytest.raises(RigidStructureError):
        solve(A, 1, structure_support_preserving(A))


def test_init_rank_mismatch():
    A = pencil_210()
    with pytest.raises(ValueError):
        solve(A, 2, init=[PolyVector(([1.0], [0.0], [0.0]))])


def test_iteration_cap_reported():
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["zeros-fixed"],
              tolerances=Tolerances(max_iter=2))
    assert not R.converged and "iteration cap" in R.failure


def test_report_dict_is_complete():
    A = pencil_210()
    d = solve(A, 1, structures_210(A)["support"]).as_dict()
    for key in ("distance", "lowerBound", "iterations", "history",
                "secondOrder", "structure", "kernel", "deltaA",
                "firstOrderResidual", "converged"):
        assert key in d
    assert d["secondOrder"]["status"] == "sufficient"


def test_converged_first_order_residual():
    A = pencil_210()
    R = solve(A, 1, structures_210(A)["degree"])
    g = grad_lagrangian(R.x, R.lam, R.problem)
    assert np.max(np.abs(g)) <= 1e-10


def test_solver_error_hierarchy():
    assert issubclass(RigidStructureError, SolverError)
    assert issubclass(RigidStructureError, ValueError)
