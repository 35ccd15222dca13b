import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from polyrank.embedding import (default_mu, distance_lower_bound,
                                minimal_embed, phi, psi, r_embed,
                                r_embed_vector, unembed_vector)
from polyrank.polycore import (MatrixPolynomial, PolyVector, apply,
                               frobenius_norm, vectorize)
from polyrank.structure import structure_support_preserving

from conftest import pencil_210, random_matrix_polynomial


def test_phi_linear():
    np.testing.assert_array_equal(phi([1, 2], 2),
                                  [[1, 0], [2, 1], [0, 2]])


def test_phi_constant_is_identity():
    np.testing.assert_array_equal(phi([1.0], 3), np.eye(3))


def test_phi_rejects_zero_width():
    with pytest.raises(ValueError):
        phi([1.0], 0)


def test_phi_is_convolution(rng):
    for _ in range(20):
        a = rng.standard_normal(4)
        mu = int(rng.integers(1, 7))
        b = rng.standard_normal(mu)
        np.testing.assert_allclose(phi(a, mu) @ b, np.convolve(a, b),
                                   atol=1e-13)


def test_embed_scalar_t():
    A = MatrixPolynomial(np.array([[[0.0]], [[1.0]]]))
    E = r_embed(A)
    assert E.mu == 2
    np.testing.assert_array_equal(E.matrix, phi([0, 1], 2))


def test_embedding_shape(rng):
    A = random_matrix_polynomial(rng, 3, 2)
    E = r_embed(A)
    assert E.mu == 7
    assert E.matrix.shape == (E.N, E.M) == (3 * 9, 3 * 7)


def test_embedding_blocks(rng):
    A = random_matrix_polynomial(rng, 2, 2)
    E = r_embed(A)
    h, w = E.mu + E.d, E.mu
    for i in range(2):
        for j in range(2):
            blk = E.matrix[i * h:(i + 1) * h, j * w:(j + 1) * w]
            np.testing.assert_array_equal(blk, phi(A.entry(i, j), E.mu))


def test_embedding_norm_identity(rng):
    for _ in range(20):
        n, d = int(rng.integers(1, 5)), int(rng.integers(0, 4))
        A = random_matrix_polynomial(rng, n, d)
        E = r_embed(A)
        assert np.sum(E.matrix ** 2) == pytest.approx(
            E.mu * frobenius_norm(A) ** 2, rel=1e-12)


def test_equal_columns_make_embedding_singular(rng):
    c = rng.standard_normal((3, 3, 3))
    c[:, :, 2] = c[:, :, 0]
    E = r_embed(MatrixPolynomial(c))
    s = scipy.linalg.svdvals(E.matrix)
    assert s[-1] <= 1e-13 * s[0]


def test_vector_embedding():
    np.testing.assert_array_equal(
        r_embed_vector(PolyVector(([1.0], [0.0])), 2), [1, 0, 0, 0])


def test_vector_embedding_degree_overflow():
    with pytest.raises(ValueError):
        r_embed_vector(PolyVector(([1.0, 2.0, 3.0],)), 2)


def test_vector_roundtrip(rng):
    b = PolyVector(tuple(rng.standard_normal(4) for _ in range(3)))
    back = unembed_vector(r_embed_vector(b, 4), 3, 4)
    for e, f in zip(back.entries, b.entries):
        np.testing.assert_array_equal(e, f)


def test_kernel_correspondence(rng):
    """A b = 0 exactly when the embedded product vanishes."""
    for _ in range(20):
        n, d = 3, 2
        c = rng.standard_normal((d + 1, n, n))
        # plant a constant kernel vector
        v = rng.standard_normal(n)
        c -= np.einsum("kij,j->ki", c, v)[:, :, None] * v / (v @ v)
        A = MatrixPolynomial(c)
        b = PolyVector(tuple(np.array([x]) for x in v))
        mu = default_mu(n, d)
        assert frobenius_norm(apply(A, b)) <= 1e-12
        assert np.linalg.norm(r_embed(A).matrix @ r_embed_vector(b, mu)) \
            <= 1e-12
        # a generic vector is not in the kernel of either
        g = PolyVector(tuple(rng.standard_normal(2) for _ in range(n)))
        assert frobenius_norm(apply(A, g)) > 1e-3
        assert np.linalg.norm(r_embed(A).matrix @ r_embed_vector(g, mu)) \
            > 1e-3


def test_minimal_embed_full_bounds_is_identity(rng):
    A = random_matrix_polynomial(rng, 3, 1)
    mu = default_mu(3, 1)
    lay = minimal_embed(A, (mu - 1,) * 3)
    np.testing.assert_array_equal(lay.matrix, r_embed(A).matrix)
    assert lay.col_map.size == 3 * mu


def test_minimal_embed_zero_entry_drops_columns(rng):
    A = random_matrix_polynomial(rng, 3, 1)
    lay = minimal_embed(A, (3, -1, 3))
    mu = default_mu(3, 1)
    assert not np.any((lay.col_map >= mu) & (lay.col_map < 2 * mu))
    assert lay.col_map.size == 8


def test_minimal_embed_printed_kernel_shape():
    A = pencil_210()
    lay = minimal_embed(A, (1, 0, 0), structure_support_preserving(A))
    assert lay.col_map.size == 4
    assert lay.kernel_degrees == (1, 0, 0)


def test_minimal_embed_empty_layout():
    A = MatrixPolynomial.identity(2, 1)
    with pytest.raises(ValueError):
        minimal_embed(A, (-1, -1))


def test_minimal_embed_drops_only_structurally_zero_rows(rng):
    for _ in range(20):
        c = rng.standard_normal((3, 3, 3))
        c[rng.random(c.shape) < 0.4] = 0.0
        A = MatrixPolynomial(c)
        S = structure_support_preserving(A)
        bounds = tuple(int(k) for k in rng.integers(-1, 4, size=3))
        if max(bounds) < 0:
            continue
        try:
            lay = minimal_embed(A, bounds, S, mu=4)
        except ValueError:
            continue
        pattern = r_embed(MatrixPolynomial(
            (c != 0).astype(float)), 4).matrix != 0
        cols = lay.col_map
        keep = pattern[:, cols].any(axis=1)
        assert np.array_equal(np.flatnonzero(keep), lay.row_map)


def test_minimal_embed_is_value_independent(rng):
    c = rng.standard_normal((2, 3, 3))
    c[0, 0, 0] = 0.0
    A = MatrixPolynomial(c)
    B = MatrixPolynomial(np.where(c != 0, rng.standard_normal(c.shape), 0))
    S = structure_support_preserving(A)
    l1 = minimal_embed(A, (1, 2, 0), S)
    l2 = minimal_embed(B, (1, 2, 0), S)
    assert np.array_equal(l1.row_map, l2.row_map)
    assert np.array_equal(l1.col_map, l2.col_map)


def test_psi_zero_vector(rng):
    A = random_matrix_polynomial(rng, 3, 1)
    lay = minimal_embed(A, (2, 2, 2))
    P = psi(np.zeros(lay.col_map.size), lay)
    assert not np.any(P)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_psi_identity(n, d, seed):
    rng = np.random.default_rng(seed)
    A = random_matrix_polynomial(rng, n, d)
    mu = default_mu(n, d)
    bounds = tuple(int(k) for k in rng.integers(0, mu, size=n))
    lay = minimal_embed(A, bounds)
    b = rng.standard_normal(lay.col_map.size)
    lhs = psi(b, lay) @ vectorize(A)
    rhs = lay.matrix @ b
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(1.0, np.linalg.norm(rhs))


def test_psi_scalar_is_convolution(rng):
    a = rng.standard_normal(3)
    A = MatrixPolynomial(a.reshape(3, 1, 1))
    lay = minimal_embed(A, (2,))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(psi(b, lay), phi(b, 3), atol=0)


def test_lower_bound_singular(rng):
    c = rng.standard_normal((2, 3, 3))
    c[:, 1] = c[:, 0]
    assert distance_lower_bound(MatrixPolynomial(c)) <= 1e-13


def test_lower_bound_homogeneous(rng):
    A = random_matrix_polynomial(rng, 3, 2)
    lb = distance_lower_bound(A)
    assert distance_lower_bound(A * 2.5) == pytest.approx(2.5 * lb,
                                                          rel=1e-12)


def test_lower_bound_value():
    A = pencil_210()
    s = scipy.linalg.svdvals(r_embed(A).matrix)[-1]
    assert distance_lower_bound(A) == pytest.approx(s / 2.0, rel=1e-14)
    assert distance_lower_bound(A) <= 0.115585
